"""Dense tensors with reverse-mode automatic differentiation.

The graph is recorded implicitly: every op closes over its inputs and a
backward function, and ``backward`` walks the closure graph in reverse
topological order. Default precision is float32; verification code builds
graphs in float64.

Reductions along axes that may be permuted (attention keys, pooled tokens)
go through :func:`osum`, which sums sorted addends so the result is
bitwise independent of input ordering.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

# When enabled, every primitive verifies its output is finite and raises a
# diagnostic naming the op. Turned on inside grad_check.
CHECK_FINITE = False


class Tensor:
    """A numpy array plus the bookkeeping to pull gradients back through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=None):
        arr = np.asarray(data)
        if arr.dtype.kind in "iub":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, neg(_ensure(other)))

    def __rsub__(self, other):
        return add(_ensure(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Parameter(Tensor):
    """A named leaf tensor that participates in optimization."""

    __slots__ = ("name",)

    def __init__(self, name, data):
        super().__init__(data, requires_grad=True, op="param")
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _ensure(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _pair(a, b):
    """Coerce a binary-op operand pair to Tensors; python scalars adopt the
    other operand's dtype so float32 graphs stay float32."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype) if isinstance(b, (int, float)) else np.asarray(b))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype) if isinstance(a, (int, float)) else np.asarray(a))
    return _ensure(a), _ensure(b)


def _make(data, parents, backward, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise ContractError(f"non-finite values produced by op {op!r}")
    rg = any(p.requires_grad for p in parents)
    if not rg:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad, shape):
    """Sum a broadcasted gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad.reshape(shape)


# -- arithmetic ---------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out_data, (a, b), backward, "add")


def mul(a, b):
    a, b = _pair(a, b)
    out_data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out_data, (a, b), backward, "mul")


def div(a, b):
    a, b = _pair(a, b)
    out_data = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out_data, (a, b), backward, "div")


def neg(a):
    a = _ensure(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = _ensure(a)
    out_data = np.exp(a.data)
    return _make(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a):
    a = _ensure(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = _ensure(a)
    out_data = np.sqrt(a.data)
    return _make(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def square(a):
    a = _ensure(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def relu(a):
    a = _ensure(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def matmul(a, b):
    a, b = _ensure(a), _ensure(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out_data, (a, b), backward, "matmul")


# -- reductions ---------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    a = _ensure(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out_data, (a,), backward, "sum")


def osum(a, axis, keepdims=False):
    """Order-independent sum: addends are sorted before summation, so the
    result is bitwise invariant under permutation along ``axis``."""
    a = _ensure(a)
    out_data = np.ascontiguousarray(np.sort(a.data, axis=axis)).sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out_data, (a,), backward, "osum")


def mean(a, axis=None, keepdims=False):
    a = _ensure(a)
    n = a.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def amax(a, axis, keepdims=False):
    """Max along an axis; gradient flows to the first-occurrence argmax."""
    a = _ensure(a)
    out_data = a.data.max(axis=axis, keepdims=keepdims)
    idx = np.expand_dims(a.data.argmax(axis=axis), axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, idx, np.asarray(g), axis)
        return (ga,)

    return _make(out_data, (a,), backward, "amax")


def logsumexp(a, axis, keepdims=False):
    """Numerically stable log-sum-exp with an order-independent inner sum."""
    a = _ensure(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.ascontiguousarray(np.sort(e, axis=axis)).sum(axis=axis, keepdims=True)
    out_data = m + np.log(s)
    if not keepdims:
        out_data = np.squeeze(out_data, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * (e / s),)

    return _make(out_data, (a,), backward, "logsumexp")


def softmax(a, axis=-1):
    """Stabilized softmax; slices along ``axis`` sum to 1."""
    a = _ensure(a)
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {a.shape}")
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    s = np.ascontiguousarray(np.sort(e, axis=axis)).sum(axis=axis, keepdims=True)
    y = e / s

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "softmax")


def masked_softmax(a, mask, axis=-1):
    """Softmax with hard exclusion: positions where ``mask`` is 0 get exactly
    zero weight and receive zero gradient. ``mask`` is a plain 0/1 array
    broadcastable against ``a``."""
    a = _ensure(a)
    mask = np.asarray(mask, dtype=a.dtype)
    neg = np.finfo(a.dtype).min
    shifted = np.where(mask > 0, a.data, neg)
    m = shifted.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m) * mask
    s = np.ascontiguousarray(np.sort(e, axis=axis)).sum(axis=axis, keepdims=True)
    y = e / s

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), backward, "masked_softmax")


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be > 0, got {eps}")
    x, gamma, beta = _ensure(x), _ensure(gamma), _ensure(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise DimensionError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match feature dim {x.shape[-1:]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gxhat = g * gamma.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta

    return _make(gamma.data * xhat + beta.data, (x, gamma, beta), backward, "layer_norm")


def attend(weights, values):
    """Weighted sum over the key axis: out[..., q, d] = sum_j w[..., q, j] * v[..., j, d].

    The forward sum over j is order-independent so attention output is
    bitwise invariant under a joint permutation of keys/values."""
    weights, values = _ensure(weights), _ensure(values)
    if weights.shape[-1] != values.shape[-2]:
        raise DimensionError(f"attend key extents differ: {weights.shape} vs {values.shape}")
    prod = weights.data[..., :, :, None] * values.data[..., None, :, :]
    out_data = np.ascontiguousarray(np.sort(prod, axis=-2)).sum(axis=-2)

    def backward(g):
        gw = _unbroadcast(np.matmul(g, np.swapaxes(values.data, -1, -2)), weights.shape)
        gv = _unbroadcast(np.matmul(np.swapaxes(weights.data, -1, -2), g), values.shape)
        return gw, gv

    return _make(out_data, (weights, values), backward, "attend")


# -- shape manipulation -------------------------------------------------

def reshape(a, shape):
    a = _ensure(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes):
    a = _ensure(a)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx):
    a = _ensure(a)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _make(a.data[idx], (a,), backward, "getitem")


def gather_rows(table, ids):
    """Row lookup with scatter-add gradient; ``ids`` is an integer array."""
    table = _ensure(table)
    ids = np.asarray(ids)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(table.data[ids], (table,), backward, "gather_rows")


def concat(tensors, axis=0):
    tensors = [_ensure(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def l2_normalize(x, axis=-1, eps=0.0):
    """Rows scaled to unit L2 norm along ``axis``."""
    sq = tsum(square(x), axis=axis, keepdims=True)
    if eps:
        sq = sq + eps
    return x / sqrt(sq)


# -- reverse pass -------------------------------------------------------

def _toposort(root):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss, params=None):
    """Reverse-mode accumulation from a scalar loss.

    Returns a GradientMap: dict of parameter name -> gradient array. With
    ``params`` given, parameters unreachable from the loss map to exact
    zeros. Gradients of parameters used at several graph sites are summed.
    """
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent.requires_grad or g is None:
                continue
            if parent.grad is None:
                parent.grad = np.array(g, dtype=parent.data.dtype, copy=True)
            else:
                parent.grad += g
    out = {}
    if params is not None:
        for name, p in params.items():
            out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    else:
        for node in order:
            if isinstance(node, Parameter) and node.grad is not None:
                out[node.name] = node.grad
    return out


def zero_grad(params):
    for p in params.values():
        p.grad = None


def grad_check(builder, params, h=1e-5, max_coords=6, seed=0, noise_floor=1e-7):
    """Compare analytic gradients against central finite differences.

    ``builder`` rebuilds the scalar loss from the current parameter values;
    ``params`` is a dict of name -> Parameter (float64 recommended). Returns
    the max over sampled coordinates of the relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).

    Coordinates where both gradients sit below ``noise_floor`` are treated
    as matching: central differences on an exactly-zero gradient produce
    ~eps*|loss|/h of rounding noise, which would otherwise dominate the
    1e-8 denominator floor.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"grad_check step h={h} outside [1e-7, 1e-3]")
    global CHECK_FINITE
    prev, CHECK_FINITE = CHECK_FINITE, True
    try:
        zero_grad(params)
        analytic = backward(builder(), params)
        rng = np.random.default_rng(seed)
        worst = 0.0
        for name, p in params.items():
            n = p.size
            coords = rng.choice(n, size=min(max_coords, n), replace=False)
            flat = p.data.reshape(-1)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                hi = float(builder().data)
                flat[c] = orig - h
                lo = float(builder().data)
                flat[c] = orig
                numeric = (hi - lo) / (2 * h)
                a = float(analytic[name].reshape(-1)[c])
                if abs(a) < noise_floor and abs(numeric) < noise_floor:
                    continue
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    finally:
        CHECK_FINITE = prev
    return worst
