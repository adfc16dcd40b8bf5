import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leakbench.metrics import aggregate_seeds, fmt4, midranks, parse_mean_std, roc_auc, round4


def _brute_auc(scores, labels):
    pos = [a for a, y in zip(scores, labels) if y == 1]
    neg = [b for b, y in zip(scores, labels) if y == 0]
    total = 0.0
    for a in pos:
        for b in neg:
            total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def test_auc_examples():
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]) == 0.5
    assert roc_auc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert roc_auc([4, 3, 2, 1], [0, 0, 1, 1]) == 0.0


def test_auc_single_class_raises():
    with pytest.raises(ValueError, match="AUC undefined"):
        roc_auc([0.1, 0.2], [1, 1])


def test_auc_rejects_bad_labels():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2, 0.3], [0, 1, 2])


def test_midranks_ties():
    np.testing.assert_array_equal(midranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


def test_auc_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, max(2, n // 4), size=n).astype(float)
        worst = max(worst, abs(roc_auc(scores, labels) - _brute_auc(scores.tolist(), labels.tolist())))
    assert worst < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_auc_antisymmetric_and_monotone_invariant(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        return
    auc = roc_auc(scores, labels)
    assert abs(roc_auc(-scores, labels) - (1.0 - auc)) < 1e-12
    assert abs(roc_auc(np.exp(scores / 3.0) + 7.0, labels) - auc) < 1e-12


def test_aggregate_seeds_example():
    st_ = aggregate_seeds([0.7, 0.8, 0.9])
    assert st_.mean == pytest.approx(0.8, abs=1e-15)
    assert st_.std == pytest.approx(0.1, abs=1e-15)
    assert st_.cv == pytest.approx(0.125, abs=1e-14)
    assert st_.format() == "0.8000 ± 0.1000"
    assert st_.format(ascii_only=True) == "0.8000 +/- 0.1000"


def test_aggregate_seeds_order_independent():
    a = aggregate_seeds([0.9, 0.7, 0.8])
    b = aggregate_seeds([0.7, 0.8, 0.9])
    assert (a.mean, a.std) == (b.mean, b.std)


def test_aggregate_seeds_needs_two_values():
    with pytest.raises(ValueError):
        aggregate_seeds([0.5])


def test_aggregate_seeds_zero_mean_has_no_cv():
    assert aggregate_seeds([-1.0, 1.0]).cv is None


def test_published_cv_remarks():
    # published rows: SSL-only on the held-out site and CanonicalF on a target
    ssl = aggregate_seeds([0.7804 - 0.0197, 0.7804, 0.7804 + 0.0197])
    adv = aggregate_seeds([0.7241 - 0.0956, 0.7241, 0.7241 + 0.0956])
    assert abs(ssl.cv - 0.025) <= 0.003
    assert abs(adv.cv - 0.132) <= 0.003


def test_round4_half_even():
    assert str(round4(0.12345)) == "0.1234"
    assert str(round4(0.12355)) == "0.1236"
    assert fmt4(0.5) == "0.5000"
    assert fmt4(None) == "NA"
    assert fmt4(float("nan")) == "NA"


def test_parse_mean_std_roundtrip():
    assert parse_mean_std("0.7804 ± 0.0197") == (0.7804, 0.0197)
    assert parse_mean_std("0.7804 +/- 0.0197") == (0.7804, 0.0197)
    with pytest.raises(ValueError):
        parse_mean_std("0.7804")
