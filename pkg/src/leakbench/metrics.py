"""ROC AUC and multi-seed summary statistics."""

from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

import numpy as np


def midranks(x):
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    # boundaries of runs of equal values in the sorted array
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], n]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def roc_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 * P(tie)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ValueError(f"roc_auc: {scores.size} scores vs {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValueError("roc_auc: labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined: labels contain a single class")
    r = midranks(scores)
    u = r[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def round4(x):
    """Half-even rounding to 4 decimals of the shortest repr of ``x``."""
    return Decimal(repr(float(x))).quantize(Decimal("0.0001"), rounding=ROUND_HALF_EVEN)


def fmt4(x):
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return "NA"
    return f"{round4(x):.4f}"


@dataclass(frozen=True)
class SeedStats:
    values: tuple
    mean: float
    std: float
    cv: float = None

    @property
    def cv_defined(self):
        return self.cv is not None

    def format(self, ascii_only=False):
        sep = " +/- " if ascii_only else " ± "
        return f"{fmt4(self.mean)}{sep}{fmt4(self.std)}"

    def __str__(self):
        return self.format()


def aggregate_seeds(values):
    """Mean, sample standard deviation (n-1) and coefficient of variation."""
    vals = tuple(float(v) for v in values)
    if len(vals) < 2:
        raise ValueError(f"aggregate_seeds: need at least 2 values, got {len(vals)}")
    # sorted so the result does not depend on seed order
    arr = np.sort(np.array(vals))
    mean = float(arr.sum() / len(arr))
    std = float(np.sqrt(np.sum((arr - mean) ** 2) / (len(arr) - 1)))
    cv = std / mean if mean != 0 else None
    return SeedStats(vals, mean, std, cv)


def parse_mean_std(text):
    """Parse a ``"0.7804 ± 0.0197"`` cell back into ``(mean, std)``."""
    for sep in ("±", "+/-"):
        if sep in text:
            a, b = text.split(sep)
            return float(a), float(b)
    raise ValueError(f"not a mean ± std cell: {text!r}")
