"""AdamW for network training and a full-batch solver for logistic-regression probes."""

import logging
from dataclasses import dataclass

import numpy as np

from leakbench.autodiff import log_softmax_rows

log = logging.getLogger(__name__)


class AdamW:
    """AdamW with bias correction and decoupled weight decay.

    ``params`` is an ordered ``name -> Tensor`` mapping. Each step rebinds
    ``tensor.data`` to a new array, so snapshots taken earlier stay valid.
    """

    def __init__(self, params, lr=3e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        missing = [k for k, p in self.params.items() if p.grad is None]
        if missing:
            raise ValueError(f"AdamW.step: no gradient for parameter(s) {', '.join(missing)}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            theta = p.data
            if self.weight_decay:
                theta = theta - self.lr * self.weight_decay * theta
            m_hat = self.m[k] / c1
            v_hat = self.v[k] / c2
            p.data = theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adamw_step(state, params, grads):
    """Functional form: attach ``grads`` to ``params`` and step ``state`` (an :class:`AdamW`)."""
    for k, g in grads.items():
        params[k].grad = g
    state.step()
    return params, state


# ---------------------------------------------------------------- probes


@dataclass(frozen=True)
class ProbeSolverConfig:
    l2_strength: float = 1e-4
    max_iters: int = 2000
    grad_tol: float = 1e-7


@dataclass
class ProbeFit:
    weights: np.ndarray
    iterations: int
    converged: bool
    objective_trace: list

    @property
    def warning(self):
        return not self.converged


def _design(X):
    return np.hstack([X, np.ones((X.shape[0], 1))])


def logreg_objective(W, Xb, s, l2):
    """Mean multinomial cross-entropy plus ``l2/2 * ||W||^2`` (intercept row unpenalised)."""
    return _objective(W, Xb, s, l2)[0]


def _objective(W, Xb, s, l2):
    logp = log_softmax_rows(Xb @ W)
    n = Xb.shape[0]
    return -logp[np.arange(n), s].mean() + 0.5 * l2 * np.sum(W[:-1] ** 2), logp


def _gradient(W, Xb, logp, onehot, l2):
    g = Xb.T @ (np.exp(logp) - onehot) / Xb.shape[0]
    g[:-1] += l2 * W[:-1]
    return g


def fit_multinomial_logreg(X, s, cfg=ProbeSolverConfig(), num_classes=None, return_info=False):
    """ℓ2-regularised multinomial logistic regression by full-batch gradient descent.

    Each iteration proposes a Barzilai-Borwein step length and backtracks
    (Armijo, factor 1/2) until the objective decreases sufficiently, so the
    objective trace is monotone. Starts from zero weights; the result is a
    deterministic function of ``(X, s, cfg)``. Returns a [D+1, K] matrix whose
    last row is the intercept.
    """
    X = np.asarray(X, dtype=np.float64)
    s = np.asarray(s).astype(np.intp)
    if X.ndim != 2 or s.shape != (X.shape[0],):
        raise ValueError(f"fit_multinomial_logreg: X {X.shape} incompatible with labels {s.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("fit_multinomial_logreg: non-finite features")
    k = int(num_classes if num_classes is not None else s.max() + 1)
    counts = np.bincount(s, minlength=k)
    if np.any(counts == 0):
        raise ValueError(f"fit_multinomial_logreg: class(es) {np.flatnonzero(counts == 0).tolist()} absent")
    if X.shape[0] < k:
        raise ValueError("fit_multinomial_logreg: fewer samples than classes")
    Xb = _design(X)
    onehot = np.eye(k)[s]
    W = np.zeros((Xb.shape[1], k))
    f, logp = _objective(W, Xb, s, cfg.l2_strength)
    g = _gradient(W, Xb, logp, onehot, cfg.l2_strength)
    trace = [f]
    step = 1.0
    converged = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        gnorm2 = float(np.sum(g * g))
        if np.sqrt(gnorm2) < cfg.grad_tol:
            converged = True
            it -= 1
            break
        t = step
        while True:
            W_new = W - t * g
            f_new, logp = _objective(W_new, Xb, s, cfg.l2_strength)
            if f_new <= f - 0.5 * t * gnorm2 or t < 1e-20:
                break
            t *= 0.5
        if f_new > f:
            # line search exhausted: no representable descent step left
            converged = bool(np.sqrt(gnorm2) < 10 * cfg.grad_tol)
            break
        g_new = _gradient(W_new, Xb, logp, onehot, cfg.l2_strength)
        dw = (W_new - W).ravel()
        dg = (g_new - g).ravel()
        curv = float(dw @ dg)
        step = float(dw @ dw) / curv if curv > 0 else 2.0 * t
        W, f, g = W_new, f_new, g_new
        trace.append(f)
    else:
        converged = float(np.sqrt(np.sum(g * g))) < cfg.grad_tol
    if not converged:
        log.warning("probe solver stopped after %d iterations (|grad| = %.3g)", it, np.sqrt(np.sum(g * g)))
    if return_info:
        return ProbeFit(W, it, converged, trace)
    return W


def predict_classes(W, X):
    """Argmax class; ``np.argmax`` breaks ties toward the lowest index."""
    return np.argmax(_design(np.asarray(X, dtype=np.float64)) @ W, axis=1)


def probe_accuracy(W, X_test, s_test):
    s_test = np.asarray(s_test)
    if s_test.size == 0:
        return float("nan")
    return float(np.mean(predict_classes(W, X_test) == s_test))
