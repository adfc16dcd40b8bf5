"""Fast built-in checks: gradients, loss oracles, AUC and probe calibration."""

import math
import time

import numpy as np

from leakbench import autodiff as ad
from leakbench import nn
from leakbench.autodiff import Tensor, gradcheck
from leakbench.metrics import aggregate_seeds, roc_auc
from leakbench.optim import AdamW, fit_multinomial_logreg, probe_accuracy

NTXENT_B2_ORTHOGONAL = 0.5514447139320509
ADAMW_STEP_FROM_ZERO = -0.0009999999900000003


def _grad_cases():
    lab = np.array([0, 2, 1, 1])
    return {
        "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda a, b: ad.sum(ad.square(ad.matmul(a, b)))),
        "conv2d": (
            lambda r: [r.normal(size=(2, 2, 6, 6)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
            lambda x, w, b: ad.sum(ad.square(ad.conv2d(x, w, b, stride=2, padding=1))),
        ),
        "relu": (lambda r: [r.normal(size=(4, 3)) + 0.1], lambda x: ad.sum(ad.square(ad.relu(x)))),
        "exp/log": (lambda r: [r.uniform(0.5, 2.0, size=5)], lambda x: ad.sum(ad.log(ad.add_scalar(ad.exp(x), 1.0)))),
        "l2_normalize": (
            lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))],
            lambda x, c: ad.sum(ad.mul(ad.l2_normalize(x), c)),
        ),
        "standardize_columns": (
            lambda r: [r.normal(size=(5, 3)), r.normal(size=(5, 3))],
            lambda x, c: ad.sum(ad.mul(ad.square(ad.standardize_columns(x)), c)),
        ),
        "global_mean_pool": (lambda r: [r.normal(size=(2, 3, 4, 4))], lambda x: ad.sum(ad.square(ad.global_mean_pool(x)))),
        "softmax_cross_entropy": (lambda r: [r.normal(size=(4, 3))], lambda x: ad.softmax_cross_entropy(x, lab)),
        "bce_with_logits": (
            lambda r: [r.normal(scale=3.0, size=(4, 1))],
            lambda x: ad.bce_with_logits(x, np.array([1, 0, 0, 1]), pos_weight=3.0),
        ),
        "infonce": (
            lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))],
            lambda a, b: nn.infonce_loss(ad.l2_normalize(a), ad.l2_normalize(b), 0.5),
        ),
    }


def check_gradients(instances=20, tol=1e-6):
    worst = {}
    for name, (make, build) in _grad_cases().items():
        worst[name] = max(gradcheck(build, make(np.random.default_rng(seed))) for seed in range(instances))
    bad = {k: v for k, v in worst.items() if not v < tol}
    return not bad, f"max relative error {max(worst.values()):.2e}" + (f"; failing: {sorted(bad)}" if bad else "")


def check_grl(trials=10):
    for seed in range(trials):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(3, 4))
        w = Tensor(rng.normal(size=(4, 2)))
        lam = float(rng.uniform(0.1, 3.0))
        a = Tensor(x0, requires_grad=True)
        out = ad.grad_reverse(a, lam)
        if not np.array_equal(out.data, x0):
            return False, "forward is not the identity"
        ad.backward(ad.sum(ad.exp(ad.matmul(out, w))))
        b = Tensor(x0, requires_grad=True)
        ad.backward(ad.sum(ad.exp(ad.matmul(b, w))))
        if not np.allclose(a.grad, -lam * b.grad, rtol=1e-15, atol=0):
            return False, f"backward mismatch at trial {seed}"
    return True, f"{trials} composites"


def check_loss_oracles():
    z = Tensor([[0.6, 0.8]])
    e = Tensor([[1.0, 0.0], [0.0, 1.0]])
    got = {
        "ntxent_b1": nn.infonce_loss(z, z).item(),
        "ntxent_b2": nn.infonce_loss(e, e, 1.0).item(),
        "bce": nn.weighted_bce_loss(Tensor([[0.0]]), np.array([1]), 1.0).item(),
    }
    p = Tensor([0.0], requires_grad=True)
    opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.0)
    p.grad = np.array([1.0])
    opt.step()
    ok = (
        got["ntxent_b1"] == 0.0
        and abs(got["ntxent_b2"] - NTXENT_B2_ORTHOGONAL) < 1e-10
        and abs(got["bce"] - math.log(2)) < 1e-12
        and abs(p.data[0] - ADAMW_STEP_FROM_ZERO) < 1e-12
    )
    return ok, "NT-Xent B=1/B=2, BCE ln 2, AdamW step"


def check_auc(instances=100):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, size=n)
        y[:2] = (0, 1)
        s = rng.integers(0, max(2, n // 4), size=n).astype(float)
        pos, neg = s[y == 1], s[y == 0]
        diff = pos[:, None] - neg[None, :]
        brute = (np.sum(diff > 0) + 0.5 * np.sum(diff == 0)) / diff.size
        worst = max(worst, abs(roc_auc(s, y) - brute))
    return worst < 1e-12, f"max deviation {worst:.1e} over {instances} tied instances"


def check_probe_calibration():
    rng = np.random.default_rng(0)
    n = 20000
    s = rng.integers(0, 2, size=n)
    X = (2.0 * s - 1.0 + rng.normal(size=n))[:, None]
    W = fit_multinomial_logreg(X[: n // 2], s[: n // 2])
    acc = probe_accuracy(W, X[n // 2 :], s[n // 2 :])
    bayes = 0.5 * (1 + math.erf(1 / math.sqrt(2)))
    return abs(acc - bayes) < 0.02, f"Gaussian probe {acc:.4f} vs Bayes {bayes:.4f}"


def check_cv():
    a = aggregate_seeds([0.7804 - 0.0197, 0.7804, 0.7804 + 0.0197]).cv
    b = aggregate_seeds([0.7241 - 0.0956, 0.7241, 0.7241 + 0.0956]).cv
    return abs(a - 0.025) <= 0.003 and abs(b - 0.132) <= 0.003, f"cv {a:.4f} and {b:.4f}"


SUITES = (
    ("gradients", check_gradients),
    ("grl", check_grl),
    ("loss-oracles", check_loss_oracles),
    ("auc", check_auc),
    ("probe-calibration", check_probe_calibration),
    ("seed-statistics", check_cv),
)


def run_selftest(out=print):
    """Run every suite, print one line each; return True when all pass."""
    all_ok = True
    for name, fn in SUITES:
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is reported as a failure of that suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        out(f"{'PASS' if ok else 'FAIL'}  {name:<18s} {detail} ({time.perf_counter() - t0:.1f}s)")
    return all_ok
