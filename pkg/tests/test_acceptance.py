"""Acceptance criteria 1-10, one PASS/FAIL line each (printed in the terminal summary).

Criteria 6-8 run the full default leave-one-site-out suite once (about ten
minutes on one core); set ``LEAKBENCH_SKIP_FULL=1`` to skip them.
"""

import math
import os
import time

import numpy as np
import pytest

from conftest import TINY_INI, record_acceptance
from leakbench import autodiff as ad
from leakbench import nn, protocol, report
from leakbench.autodiff import Tensor, gradcheck
from leakbench.config import ExperimentConfig, load_config
from leakbench.metrics import aggregate_seeds, roc_auc
from leakbench.optim import AdamW, fit_multinomial_logreg, probe_accuracy
from test_autodiff import CASES

INSTANCES = 20


def _loss_cases():
    shape = nn.ModelShape(feature_dim=5, adv_hidden=4)

    def site_ce(rng):
        adv = nn.init_adversary(rng, shape, 3)
        return [rng.normal(size=(6, 5)), adv["fc1.w"].data, adv["fc1.b"].data, adv["fc2.w"].data, adv["fc2.b"].data]

    def site_ce_build(h, w1, b1, w2, b2):
        # gradient reversal flips the sign of dL/dh, so the check undoes it with a second reversal upstream
        params = {"fc1.w": w1, "fc1.b": b1, "fc2.w": w2, "fc2.b": b2}
        return nn.site_ce_loss(params, ad.grad_reverse(h, 1.0), np.array([0, 1, 2, 2, 1, 0]), w_site=0.2, lam=1.0)

    return {
        "infonce": (
            lambda r: [r.normal(size=(4, 3)), r.normal(size=(4, 3))],
            lambda a, b: nn.infonce_loss(ad.l2_normalize(a), ad.l2_normalize(b), 0.2),
        ),
        "site_ce_through_grl": (site_ce, site_ce_build),
        "weighted_bce": (
            lambda r: [r.normal(scale=2.0, size=(6, 1))],
            lambda x: nn.weighted_bce_loss(x, np.array([1, 0, 0, 0, 1, 0]), 2.0),
        ),
    }


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst, failing = 0.0, []
    cases = {**CASES, **_loss_cases()}
    for name, (make, build) in sorted(cases.items()):
        err = 0.0
        for seed in range(INSTANCES):
            arrays = make(np.random.default_rng(seed))
            if name == "grad_reverse":
                leaf = Tensor(arrays[0], requires_grad=True)
                ad.backward(build(leaf))
                num = ad.numeric_grad(lambda x: build(Tensor(x)).item(), [arrays[0].copy()])[0]
                err = max(err, ad.relative_error(-leaf.grad / 0.7, num))
            else:
                err = max(err, gradcheck(build, arrays))
        worst = max(worst, err)
        if not err < 1e-6:
            failing.append(name)
    elapsed = time.perf_counter() - t0
    ok = not failing and elapsed < 30
    record_acceptance(1, ok, f"{len(cases)} cases x {INSTANCES} instances, max rel err {worst:.1e}, {elapsed:.1f}s")
    assert ok, failing


def test_criterion_2_grl_contract():
    ok = True
    for seed in range(10):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(4, 3))
        w = Tensor(rng.normal(size=(3, 2)))
        lam = float(rng.uniform(0.1, 3.0))
        a = Tensor(x0, requires_grad=True)
        out = ad.grad_reverse(a, lam)
        ok &= np.array_equal(out.data, x0)
        ad.backward(ad.sum(ad.square(ad.matmul(ad.relu(out), w))))
        b = Tensor(x0, requires_grad=True)
        ad.backward(ad.sum(ad.square(ad.matmul(ad.relu(b), w))))
        ok &= np.allclose(a.grad, -lam * b.grad, rtol=1e-15, atol=0.0)
    record_acceptance(2, ok, "forward bit-exact, backward = -lambda x identity path on 10 composites")
    assert ok


def test_criterion_3_loss_oracles():
    z = Tensor([[0.6, 0.8]])
    b1 = nn.infonce_loss(z, z, 0.2).item()
    e = Tensor(np.eye(2))
    b2 = nn.infonce_loss(e, e, 1.0).item()
    # each anchor: one positive at similarity 1, two negatives at 0, temperature 1
    b2_oracle = -math.log(math.e / (math.e + 2.0))
    bce = nn.weighted_bce_loss(Tensor([[0.0]]), np.array([1]), 1.0).item()
    p = Tensor([0.0], requires_grad=True)
    opt = AdamW({"p": p}, lr=1e-3, weight_decay=0.0, eps=1e-8)
    p.grad = np.array([1.0])
    opt.step()
    # bias-corrected moments are both exactly 1 after one step with g = 1
    adam_oracle = -1e-3 * 1.0 / (math.sqrt(1.0) + 1e-8)
    errs = (abs(b2 - b2_oracle), abs(bce - math.log(2)), abs(p.data[0] - adam_oracle))
    ok = b1 == 0.0 and errs[0] < 1e-10 and errs[1] < 1e-12 and errs[2] < 1e-12
    record_acceptance(3, ok, f"B=1 {b1 + 0.0}, B=2 err {errs[0]:.1e}, BCE err {errs[1]:.1e}, AdamW err {errs[2]:.1e}")
    assert ok


def test_criterion_4_auc_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        y = rng.integers(0, 2, size=n)
        y[:2] = (0, 1)
        s = rng.integers(0, max(2, n // 5), size=n).astype(float)
        brute = 0.0
        pos, neg = s[y == 1], s[y == 0]
        for a in pos:
            for b in neg:
                brute += 1.0 if a > b else 0.5 if a == b else 0.0
        worst = max(worst, abs(roc_auc(s, y) - brute / (len(pos) * len(neg))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-12 and elapsed < 10
    record_acceptance(4, ok, f"max deviation {worst:.1e} on 100 tied instances, {elapsed:.1f}s")
    assert ok


def test_criterion_5_probe_calibration():
    ini = TINY_INI.replace("prevalence = 0.3", "prevalence = 0.3\nseverity = 0.0").replace("per_site = 16", "per_site = 256")
    ini = ini.replace("n_train = 32", "n_train = 256").replace("n_test = 32", "n_test = 256")
    cfg = load_config(text=ini)
    data = protocol.build_data(cfg)
    rep = protocol.run_leakage_probes(nn.init_bundle(0, cfg.model), "random-init", cfg, data, [(0, 1)])[0]
    se = math.sqrt(0.25 / rep.n_test)
    chance_ok = abs(rep.accuracy - 0.5) < 3 * se

    rng = np.random.default_rng(7)
    n = 20000
    s = rng.integers(0, 2, size=n)
    x = (2.0 * s - 1.0 + rng.normal(size=n))[:, None]
    acc = probe_accuracy(fit_multinomial_logreg(x[: n // 2], s[: n // 2]), x[n // 2 :], s[n // 2 :])
    bayes = 0.5 * (1.0 + math.erf(1.0 / math.sqrt(2.0)))
    ok = chance_ok and abs(acc - bayes) < 0.02
    record_acceptance(
        5, ok, f"severity 0: {rep.accuracy:.4f} (3 SE = {3 * se:.4f}); Gaussian: {acc:.4f} vs {bayes:.4f}"
    )
    assert ok


# --------------------------------------------------------- full default suite


@pytest.fixture(scope="module")
def default_suite(tmp_path_factory):
    if os.environ.get("LEAKBENCH_SKIP_FULL") == "1":
        pytest.skip("LEAKBENCH_SKIP_FULL=1")
    cfg = ExperimentConfig().validate()
    out = tmp_path_factory.mktemp("default_runs")
    t0 = time.perf_counter()
    records = protocol.run_loso(cfg, out_root=str(out))
    elapsed = time.perf_counter() - t0
    paths = report.emit_reports(records, str(out / cfg.config_hash()))
    return records, report.load_summary(paths["json"]), elapsed


def _heldout_mean(summary, method):
    row = next(r for r in summary["auc"] if r["method"] == method)
    return row["splits"]["heldout-mean"]["mean"]


def _binary_probe(summary, stage, rep):
    row = next(r for r in summary["leakage"] if r["stage"] == stage and r["probe"] == "binary")
    return row["representations"][rep]["mean"]


def test_criterion_6_ssl_beats_random(default_suite):
    records, summary, elapsed = default_suite
    rnd, ssl = _heldout_mean(summary, "random-init"), _heldout_mean(summary, "ssl-only")
    ok = ssl - rnd >= 0.05 and elapsed < 15 * 60 and len(records) == 27
    record_acceptance(
        6, ok, f"held-out AUC random-init {rnd:.4f} -> ssl-only {ssl:.4f} (delta {ssl - rnd:+.4f}); LOSO {elapsed / 60:.1f} min"
    )
    assert ok


def test_criterion_7_canonicalf_reduces_leakage(default_suite):
    _, summary, _ = default_suite
    f_ssl, f_cf = _binary_probe(summary, "ssl-only", "f"), _binary_probe(summary, "canonicalf", "f")
    z_ssl, z_cf = _binary_probe(summary, "ssl-only", "z"), _binary_probe(summary, "canonicalf", "z")
    ok = f_ssl >= 0.85 and f_ssl - f_cf >= 0.05 and f_cf >= 0.55 and z_cf < z_ssl
    record_acceptance(
        7, ok, f"probe f {f_ssl:.4f} -> {f_cf:.4f} (delta {f_cf - f_ssl:+.4f}); probe z {z_ssl:.4f} -> {z_cf:.4f}"
    )
    assert ok


def test_criterion_8_z_not_above_f(default_suite):
    _, summary, _ = default_suite
    f_ssl, z_ssl = _binary_probe(summary, "ssl-only", "f"), _binary_probe(summary, "ssl-only", "z")
    ok = z_ssl <= f_ssl
    record_acceptance(8, ok, f"ssl-only probe z {z_ssl:.4f} <= probe f {f_ssl:.4f}")
    assert ok


def test_criterion_9_seed_statistics():
    a = aggregate_seeds([0.7804 - 0.0197, 0.7804, 0.7804 + 0.0197])
    b = aggregate_seeds([0.7241 - 0.0956, 0.7241, 0.7241 + 0.0956])
    ok = abs(a.cv - 0.025) <= 0.003 and abs(b.cv - 0.132) <= 0.003
    record_acceptance(9, ok, f"cv {a.cv:.4f} (target 0.025) and {b.cv:.4f} (target 0.132)")
    assert ok


def test_criterion_10_protocol_integrity(tmp_path):
    cfg = load_config(text=TINY_INI)
    data = protocol.build_data(cfg)
    checks = {}

    bundle = nn.init_bundle(0, cfg.model)
    before = bundle.checksum("encoder")
    src = data[0]
    protocol.train_linear_head(bundle, cfg, 0, src.where(split="train"), src.where(split="val"))
    protocol.run_leakage_probes(bundle, "random-init", cfg, data, [(0, 1), (0, 1, 2)])
    checks["frozen-encoder"] = bundle.checksum("encoder") == before

    runs = {}
    for tag in ("a", "b"):
        runs[tag] = protocol.run_loso(cfg, out_root=str(tmp_path / tag))
    held_ids = {sid: set(data[sid].ids.tolist()) for sid in cfg.site_ids}
    audit = True
    for held in cfg.site_ids:
        pool = tuple(s for s in cfg.site_ids if s != held)
        seen = protocol.pretrain_ssl(cfg, 0, pool, data).seen_ids
        audit &= not (seen & held_ids[held])
    checks["loso-isolation"] = audit and all(r.heldout not in r.pretrain_sites for r in runs["a"])

    hashes = {}
    for r in runs["a"]:
        for p in r.probes:
            hashes.setdefault((r.heldout, p.kind), set()).add(p.split_hash)
    checks["probe-split-sharing"] = all(len(v) == 1 for v in hashes.values())

    texts = []
    for tag in ("a", "b"):
        paths = report.emit_reports(runs[tag], str(tmp_path / f"report_{tag}"))
        texts.append({k: open(v, "rb").read() for k, v in paths.items()})
    checks["byte-identical-reports"] = texts[0] == texts[1]

    ok = all(checks.values())
    record_acceptance(10, ok, ", ".join(f"{k} {'ok' if v else 'FAILED'}" for k, v in checks.items()))
    assert ok
