"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive that receives at least one input with ``requires_grad`` records
a :class:`Node` carrying a monotonically increasing id. Node ids give a
topological order by construction, so :func:`backward` only has to visit the
reachable nodes in decreasing id order.

Broadcasting is deliberately limited to tensor-scalar arithmetic. Row-wise bias
addition is its own primitive (:func:`bias_add`).
"""

import itertools

import numpy as np

from leakbench import kernels

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """Raised when a tensor holds NaN or Inf where finite values are required."""


class Node:
    __slots__ = ("id", "op", "inputs", "backward_fn")

    def __init__(self, op, inputs, backward_fn):
        self.id = next(_ids)
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array with an optional gradient record.

    Leaves created with ``requires_grad=True`` receive ``.grad`` after
    :func:`backward`. Gradients accumulate across calls; callers reset them
    with :meth:`zero_grad`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def backward(self):
        backward(self)

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op, data, inputs, backward_fn):
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, backward_fn)
    return out


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def check_finite(x, what="tensor"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return x


def backward(loss):
    """Populate ``.grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    nodes = {}
    stack = [loss]
    seen = set()
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is not None:
            nodes[t.node.id] = t
            stack.extend(t.node.inputs)
    leaves = [t for t in _iter_leaves(loss)]
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(id(t), None)
        if g is None:
            continue
        in_grads = t.node.backward_fn(g)
        for inp, ig in zip(t.node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for leaf in leaves:
        g = grads.get(id(leaf))
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def _iter_leaves(root):
    seen = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t.node is None:
            if t.requires_grad:
                yield t
        else:
            stack.extend(t.node.inputs)


# ---------------------------------------------------------------- primitives


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data

    def bw(g):
        return g @ B.T, A.T @ g

    return _record("matmul", A @ B, (a, b), bw)


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D cross-correlation of ``x`` [N, C, H, W] with ``w`` [O, C, kh, kw]."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match weight {w.shape}")
    n, _, h, wd = x.shape
    o, c, kh, kw = w.shape
    oh = kernels.out_size(h, kh, stride, padding)
    ow = kernels.out_size(wd, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} too large for input {x.shape}")
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, padding)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    if b is not None:
        out = out + b.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)
    xshape = x.shape

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        dx = None
        if x.requires_grad:
            dx = kernels.col2im(g2 @ wmat, xshape, kh, kw, stride, padding)
        if b is None:
            return dx, dw
        return dx, dw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", np.ascontiguousarray(out), inputs, bw)


def relu(x):
    mask = x.data > 0
    return _record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def add(a, b):
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _record("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scalar_mul(x, c):
    c = float(c)
    return _record("scalar_mul", x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x, c):
    c = float(c)
    return _record("add_scalar", x.data + c, (x,), lambda g: (g,))


def neg(x):
    return _record("neg", -x.data, (x,), lambda g: (-g,))


def square(x):
    return mul(x, x)


def bias_add(x, b):
    """Add ``b`` [D] to every row of ``x`` [B, D]."""
    if x.data.ndim != 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias_add: incompatible shapes {x.shape} and {b.shape}")
    return _record("bias_add", x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)))


def sum(x):  # noqa: A001 - mirrors the primitive name
    shape = x.shape
    return _record("sum", np.array(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


def mean(x):
    shape, n = x.shape, x.size
    return _record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def exp(x):
    y = np.exp(x.data)
    return _record("exp", y, (x,), lambda g: (g * y,))


def log(x):
    X = x.data
    return _record("log", np.log(X), (x,), lambda g: (g / X,))


def transpose(x):
    if x.data.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {x.shape}")
    return _record("transpose", x.data.T.copy(), (x,), lambda g: (g.T,))


def reshape(x, shape):
    old = x.shape
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _record("reshape", data, (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=0):
    tensors = list(tensors)
    shapes = [t.shape for t in tensors]
    ref = list(shapes[0])
    for s in shapes[1:]:
        if len(s) != len(ref) or any(a != b for k, (a, b) in enumerate(zip(s, ref)) if k != axis):
            raise ShapeError(f"concat: incompatible shapes {shapes[0]} and {s} along axis {axis}")
    bounds = np.cumsum([0] + [s[axis] for s in shapes])

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _record("concat", np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw)


def slice(x, index):  # noqa: A001
    """Basic (slice/int) indexing; the result is a copy."""
    shape = x.shape
    data = np.array(x.data[index])

    def bw(g):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return _record("slice", data, (x,), bw)


def global_mean_pool(x):
    """Average [N, C, H, W] over the spatial axes to [N, C]."""
    if x.data.ndim != 4:
        raise ShapeError(f"global_mean_pool: expected [N, C, H, W], got shape {x.shape}")
    n, c, h, w = x.shape

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], (n, c, h, w)).copy(),)

    return _record("global_mean_pool", x.data.mean(axis=(2, 3)), (x,), bw)


def l2_normalize(x, eps=1e-12):
    """Row-wise ``x / sqrt(sum(x**2) + eps)``; ``eps`` keeps zero rows finite."""
    if x.data.ndim != 2:
        raise ShapeError(f"l2_normalize: expected [B, D], got shape {x.shape}")
    norm = np.sqrt((x.data**2).sum(axis=1, keepdims=True) + eps)
    y = x.data / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return _record("l2_normalize", y, (x,), bw)


def standardize_columns(x, eps=1e-8):
    """Column-wise ``(x - mean) / sqrt(var + eps)`` over the batch axis of ``x`` [B, D]."""
    if x.data.ndim != 2:
        raise ShapeError(f"standardize_columns: expected [B, D], got shape {x.shape}")
    centred = x.data - x.data.mean(axis=0, keepdims=True)
    scale = np.sqrt((centred**2).mean(axis=0, keepdims=True) + eps)
    y = centred / scale

    def bw(g):
        return ((g - g.mean(axis=0, keepdims=True) - y * (g * y).mean(axis=0, keepdims=True)) / scale,)

    return _record("standardize_columns", y, (x,), bw)


def log_softmax_rows(logits):
    k = logits.shape[1]
    if k > 8:
        shifted = logits - logits.max(axis=1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    # few classes: column loops avoid numpy's slow reductions over a short axis
    top = logits[:, 0].copy()
    for j in range(1, k):
        np.maximum(top, logits[:, j], out=top)
    shifted = logits - top[:, None]
    e = np.exp(shifted)
    total = e[:, 0].copy()
    for j in range(1, k):
        total += e[:, j]
    return shifted - np.log(total)[:, None]


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy of integer ``labels`` [B] under row-softmax of ``logits`` [B, K]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} incompatible with labels {labels.shape}"
        )
    b, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"softmax_cross_entropy: labels must lie in [0, {k})")
    labels = labels.astype(np.intp)
    logp = log_softmax_rows(logits.data)
    loss = -logp[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return (p * (float(g) / b),)

    return _record("softmax_cross_entropy", np.array(loss), (logits,), bw)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def bce_with_logits(logits, y, pos_weight=1.0):
    """Mean of ``pos_weight*y*softplus(-l) + (1-y)*softplus(l)`` over the batch."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if logits.data.size != y.size or logits.data.ndim != 2 or logits.shape[1] != 1:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} incompatible with labels {y.shape}")
    pw = float(pos_weight)
    lg = logits.data.reshape(-1)
    per = pw * y * np.logaddexp(0.0, -lg) + (1.0 - y) * np.logaddexp(0.0, lg)
    n = y.size

    def bw(g):
        d = -pw * y * sigmoid(-lg) + (1.0 - y) * sigmoid(lg)
        return ((d * (float(g) / n)).reshape(logits.shape),)

    return _record("bce_with_logits", np.array(per.mean()), (logits,), bw)


def grad_reverse(x, lam=1.0):
    """Identity forward; the backward pass multiplies the incoming gradient by ``-lam``."""
    lam = float(lam)
    if not lam > 0:
        raise ValueError(f"grad_reverse: lambda must be > 0, got {lam}")
    out = _record("grad_reverse", x.data, (x,), lambda g: (-lam * g,))
    return out


# ------------------------------------------------------------ gradient check


def numeric_grad(fn, arrays, h=1e-5):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*arrays)
            flat[i] = orig - h
            fm = fn(*arrays)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """Max absolute difference scaled by the largest gradient magnitude."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-10)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def gradcheck(build, arrays, h=1e-5):
    """Compare autodiff against finite differences for ``build(*tensors) -> scalar Tensor``.

    Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(*leaves))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]
    numeric = numeric_grad(lambda *xs: build(*[Tensor(x) for x in xs]).item(), arrays, h=h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
