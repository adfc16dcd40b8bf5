import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leakbench import autodiff as ad
from leakbench.autodiff import Tensor, gradcheck


def test_matmul_ones():
    out = ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
    assert out.shape == (2, 1)
    np.testing.assert_array_equal(out.data.ravel(), [3.0, 3.0])


def test_l2_normalize_345():
    out = ad.l2_normalize(Tensor([[3.0, 4.0]]))
    np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-12)


def test_relu_definition():
    np.testing.assert_array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_backward_square():
    x = Tensor([1.0, -2.0], requires_grad=True)
    ad.backward(ad.sum(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, -4.0])


def test_backward_mean():
    x = Tensor(np.arange(4.0), requires_grad=True)
    ad.backward(ad.mean(x))
    np.testing.assert_array_equal(x.grad, [0.25] * 4)


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.mul(x, x))


def test_backward_accumulates_until_reset():
    x = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum(ad.square(x)))
    ad.backward(ad.sum(ad.square(x)))
    np.testing.assert_array_equal(x.grad, [12.0])
    x.zero_grad()
    ad.backward(ad.sum(ad.square(x)))
    np.testing.assert_array_equal(x.grad, [6.0])


def test_shape_errors_name_primitive():
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ad.ShapeError, match="conv2d"):
        ad.conv2d(Tensor(np.ones((1, 2, 5, 5))), Tensor(np.ones((3, 1, 3, 3))))


def test_no_broadcasting_between_tensors():
    with pytest.raises(ad.ShapeError):
        ad.mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


def test_check_finite():
    ad.check_finite(Tensor([1.0, 2.0]))
    with pytest.raises(ad.NonFiniteError):
        ad.check_finite(Tensor([1.0, np.nan]))


def test_no_graph_without_requires_grad():
    out = ad.mul(Tensor([1.0]), Tensor([2.0]))
    assert out.node is None and not out.requires_grad


def test_diamond_graph_sums_contributions():
    # y = a*b + a*c with b = 2a, c = a + 1  ->  y = 2a^2 + a^2 + a, dy/da = 6a + 1
    a = Tensor([1.5, -0.5], requires_grad=True)
    b = ad.scalar_mul(a, 2.0)
    c = ad.add_scalar(a, 1.0)
    y = ad.sum(ad.add(ad.mul(a, b), ad.mul(a, c)))
    ad.backward(y)
    np.testing.assert_allclose(a.grad, 6 * a.data + 1, rtol=0, atol=1e-14)


def test_nodes_visited_in_reverse_creation_order():
    x = Tensor([1.0], requires_grad=True)
    y = ad.exp(x)
    z = ad.log(y)
    assert x.node is None
    assert y.node.id < z.node.id
    assert z.node.inputs[0] is y


# --------------------------------------------------------- finite differences

RNG_SEEDS = range(20)
TOL = 1e-6


def _away_from_zero(rng, shape, lo=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < lo, np.sign(x + 1e-12) * lo, x)


CASES = {
    "matmul": (lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], lambda a, b: ad.sum(ad.square(ad.matmul(a, b)))),
    "conv2d_s1_p1": (
        lambda r: [r.normal(size=(2, 2, 5, 5)), r.normal(size=(3, 2, 3, 3)), r.normal(size=3)],
        lambda x, w, b: ad.sum(ad.square(ad.conv2d(x, w, b, stride=1, padding=1))),
    ),
    "conv2d_s2_p1": (
        lambda r: [r.normal(size=(2, 2, 6, 6)), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)],
        lambda x, w, b: ad.sum(ad.square(ad.conv2d(x, w, b, stride=2, padding=1))),
    ),
    "conv2d_s1_p0": (
        lambda r: [r.normal(size=(1, 3, 4, 5)), r.normal(size=(2, 3, 2, 2))],
        lambda x, w: ad.sum(ad.square(ad.conv2d(x, w, stride=1, padding=0))),
    ),
    "relu": (lambda r: [_away_from_zero(r, (4, 3))], lambda x: ad.sum(ad.square(ad.relu(x)))),
    "add": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))], lambda a, b: ad.sum(ad.square(ad.add(a, b)))),
    "sub": (lambda r: [r.normal(size=(3, 2)), r.normal(size=(3, 2))], lambda a, b: ad.sum(ad.square(ad.sub(a, b)))),
    "mul": (lambda r: [r.normal(size=(5,)), r.normal(size=(5,))], lambda a, b: ad.sum(ad.square(ad.mul(a, b)))),
    "scalar_mul": (lambda r: [r.normal(size=(4,))], lambda x: ad.sum(ad.square(ad.scalar_mul(x, -1.7)))),
    "sum": (lambda r: [r.normal(size=(3, 3))], lambda x: ad.square(ad.sum(x))),
    "mean": (lambda r: [r.normal(size=(3, 3))], lambda x: ad.square(ad.mean(x))),
    "exp": (lambda r: [r.normal(size=(4,))], lambda x: ad.sum(ad.exp(x))),
    "log": (lambda r: [r.uniform(0.5, 2.0, size=(4,))], lambda x: ad.sum(ad.square(ad.log(x)))),
    "l2_normalize": (
        lambda r: [r.normal(size=(3, 4)), r.normal(size=(3, 4))],
        lambda x, c: ad.sum(ad.mul(ad.l2_normalize(x), c)),
    ),
    "softmax_cross_entropy": (
        lambda r: [r.normal(size=(5, 3))],
        lambda x: ad.softmax_cross_entropy(x, np.array([0, 2, 1, 1, 0])),
    ),
    "bce_with_logits": (
        lambda r: [r.normal(scale=3.0, size=(6, 1))],
        lambda x: ad.bce_with_logits(x, np.array([1, 0, 0, 1, 0, 1]), pos_weight=3.5),
    ),
    "concat": (
        lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3)), r.normal(size=(3, 3))],
        lambda a, b, c: ad.sum(ad.square(ad.matmul(ad.concat([a, b]), ad.transpose(c)))),
    ),
    "slice": (lambda r: [r.normal(size=(4, 5))], lambda x: ad.sum(ad.square(ad.slice(x, (slice(1, 3), slice(0, 4, 2)))))),
    "transpose": (
        lambda r: [r.normal(size=(2, 3)), r.normal(size=(2, 3))],
        lambda a, b: ad.sum(ad.square(ad.matmul(ad.transpose(a), b))),
    ),
    "standardize_columns": (
        lambda r: [r.normal(scale=0.1, size=(5, 3)), r.normal(size=(5, 3))],
        lambda x, c: ad.sum(ad.mul(ad.square(ad.standardize_columns(x)), c)),
    ),
    "global_mean_pool": (
        lambda r: [r.normal(size=(2, 3, 4, 4))],
        lambda x: ad.sum(ad.square(ad.global_mean_pool(x))),
    ),
    "bias_add": (lambda r: [r.normal(size=(3, 4)), r.normal(size=4)], lambda x, b: ad.sum(ad.square(ad.bias_add(x, b)))),
    "reshape": (lambda r: [r.normal(size=(2, 6))], lambda x: ad.sum(ad.square(ad.matmul(ad.reshape(x, (3, 4)), Tensor(np.ones((4, 1))))))),
    "grad_reverse": (lambda r: [r.normal(size=(4,))], lambda x: ad.sum(ad.square(ad.grad_reverse(x, 0.7)))),
}


def _reverse_sign(name):
    return name == "grad_reverse"


@pytest.mark.parametrize("name", sorted(CASES))
def test_primitive_matches_finite_differences(name):
    make, build = CASES[name]
    worst = 0.0
    for seed in RNG_SEEDS:
        arrays = make(np.random.default_rng(seed))
        if _reverse_sign(name):
            # the reversed gradient is, by design, the negative of the finite difference
            leaf = Tensor(arrays[0], requires_grad=True)
            ad.backward(build(leaf))
            num = ad.numeric_grad(lambda x: build(Tensor(x)).item(), [arrays[0].copy()])[0]
            worst = max(worst, ad.relative_error(-leaf.grad / 0.7, num))
        else:
            worst = max(worst, gradcheck(build, arrays))
    assert worst < TOL, f"{name}: relative error {worst:.2e}"


# ------------------------------------------------------------ gradient reversal


def test_grad_reverse_forward_identity():
    x = Tensor([5.0, -1.0])
    np.testing.assert_array_equal(ad.grad_reverse(x, 1.0).data, [5.0, -1.0])


def test_grad_reverse_examples():
    x = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum(ad.square(ad.grad_reverse(x, 1.0))))
    np.testing.assert_array_equal(x.grad, [-6.0])
    x = Tensor([3.0], requires_grad=True)
    ad.backward(ad.sum(ad.square(ad.grad_reverse(x, 0.2))))
    # chain rule by hand: d/dx (x^2) = 6, times -0.2
    assert abs(x.grad[0] - (-0.2 * 2 * 3.0)) < 1e-15


@pytest.mark.parametrize("lam", [0.0, -1.0])
def test_grad_reverse_rejects_nonpositive_lambda(lam):
    with pytest.raises(ValueError):
        ad.grad_reverse(Tensor([1.0]), lam)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(min_value=1, max_value=5),
    st.integers(min_value=1, max_value=5),
    st.floats(min_value=0.01, max_value=10.0),
    st.integers(min_value=0, max_value=2**31 - 1),
)
def test_grad_reverse_is_negated_scaled_identity(rows, cols, lam, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(rows, cols))
    w = Tensor(rng.normal(size=(cols, 2)))

    def composite(t):
        return ad.sum(ad.exp(ad.scalar_mul(ad.matmul(t, w), 0.3)))

    xa = Tensor(x0, requires_grad=True)
    out = ad.grad_reverse(xa, lam)
    assert np.array_equal(out.data, x0)
    ad.backward(composite(out))
    xb = Tensor(x0, requires_grad=True)
    ad.backward(composite(xb))
    np.testing.assert_allclose(xa.grad, -lam * xb.grad, rtol=1e-15, atol=0)
