"""A small reverse-mode autodiff engine over numpy arrays.

Every differentiable operation goes through :func:`apply_primitive`, which
looks up a forward rule in ``_PRIMITIVES``.  A forward rule returns the output
array together with a closure mapping the output gradient to one gradient per
input (``None`` for inputs that need none).
"""

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError, ZeroNormError

_DEFAULT_DTYPE = [np.float32]

NORM_EPS = 1e-12


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


def set_default_dtype(dtype):
    _DEFAULT_DTYPE[0] = np.dtype(dtype).type


@contextmanager
def default_dtype(dtype):
    """Temporarily switch the dtype new tensors are created with.

    Gradient checks run under ``default_dtype(np.float64)``.
    """
    previous = _DEFAULT_DTYPE[0]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE[0] = previous


class Tensor:
    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype or get_default_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            input_grads = node._backward(node.grad)
            for parent, g in zip(node._parents, input_grads):
                if g is None or not parent.requires_grad:
                    continue
                g = np.asarray(g, dtype=parent.data.dtype)
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, other)
        return elementwise_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """A named trainable tensor with its SGD momentum buffer."""

    def __init__(self, data, name, requires_grad=True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def detach(v):
    """Same values, no gradient path back to ``v``."""
    return Tensor(as_tensor(v).data, requires_grad=False)


# ---------------------------------------------------------------------------
# primitive registry
# ---------------------------------------------------------------------------

_PRIMITIVES = {}


def _primitive(name):
    def register(fn):
        _PRIMITIVES[name] = fn
        return fn

    return register


def primitive_kinds():
    return sorted(_PRIMITIVES)


def apply_primitive(kind, inputs, attrs=None):
    try:
        rule = _PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    inputs = [as_tensor(t) for t in inputs]
    attrs = attrs or {}
    with np.errstate(all="ignore"):
        out_data, backward_fn = rule([t.data for t in inputs], attrs)
    out_data = np.asarray(out_data)
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{kind}: non-finite output")
    out = Tensor(out_data, dtype=out_data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._parents = tuple(inputs)
        out._backward = backward_fn
        out._op = kind
    return out


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


@_primitive("matmul")
def _matmul(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return a @ b, lambda g: (g @ b.T, a.T @ g)


@_primitive("add")
def _add(xs, attrs):
    a, b = xs
    _check_broadcast("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


@_primitive("sub")
def _sub(xs, attrs):
    a, b = xs
    _check_broadcast("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape))


@_primitive("scalar_mul")
def _scalar_mul(xs, attrs):
    (a,) = xs
    s = attrs["scalar"]
    return a * a.dtype.type(s), lambda g: (g * s,)


@_primitive("elementwise_mul")
def _elementwise_mul(xs, attrs):
    a, b = xs
    _check_broadcast("elementwise_mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


@_primitive("relu")
def _relu(xs, attrs):
    (a,) = xs
    mask = a > 0
    return np.where(mask, a, 0).astype(a.dtype), lambda g: (g * mask,)


@_primitive("exp")
def _exp(xs, attrs):
    (a,) = xs
    out = np.exp(a)
    return out, lambda g: (g * out,)


@_primitive("log")
def _log(xs, attrs):
    (a,) = xs
    return np.log(a), lambda g: (g / a,)


@_primitive("softmax_last_dim")
def _softmax(xs, attrs):
    (a,) = xs
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return out, backward


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


@_primitive("sum")
def _sum(xs, attrs):
    (a,) = xs
    axes = _norm_axis(attrs.get("axis"), a.ndim)
    keepdims = attrs.get("keepdims", False)
    out = a.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return out, backward


@_primitive("mean")
def _mean(xs, attrs):
    (a,) = xs
    axes = _norm_axis(attrs.get("axis"), a.ndim)
    keepdims = attrs.get("keepdims", False)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return out, backward


@_primitive("reshape")
def _reshape(xs, attrs):
    (a,) = xs
    shape = tuple(attrs["shape"])
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


@_primitive("transpose")
def _transpose(xs, attrs):
    (a,) = xs
    axes = attrs.get("axes")
    if axes is None:
        if a.ndim != 2:
            raise ShapeError(f"transpose: default axes need a 2-d input, got {a.shape}")
        axes = (1, 0)
    inverse = np.argsort(axes)
    return a.transpose(axes), lambda g: (g.transpose(inverse),)


@_primitive("concat_rows")
def _concat_rows(xs, attrs):
    tails = {x.shape[1:] for x in xs}
    if len(tails) != 1:
        raise ShapeError(f"concat_rows: trailing dims differ: {sorted(tails)}")
    bounds = np.cumsum([x.shape[0] for x in xs])[:-1]
    return np.concatenate(xs, axis=0), lambda g: tuple(np.split(g, bounds, axis=0))


@_primitive("global_avg_pool")
def _global_avg_pool(xs, attrs):
    (a,) = xs
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N, C, H, W), got {a.shape}")
    hw = a.shape[2] * a.shape[3]

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / hw, a.shape).copy(),)

    return a.mean(axis=(2, 3)), backward


@_primitive("max_pool")
def _max_pool(xs, attrs):
    (a,) = xs
    k = attrs.get("kernel", 2)
    stride = attrs.get("stride", k)
    if a.ndim != 4 or a.shape[2] < k or a.shape[3] < k:
        raise ShapeError(f"max_pool: input {a.shape} too small for kernel {k}")
    out, arg = kernels.maxpool_forward(a, k, stride)
    return out, lambda g: (kernels.maxpool_backward(np.ascontiguousarray(g), arg, a.shape, k, stride),)


@_primitive("conv2d")
def _conv2d(xs, attrs):
    x, w = xs[0], xs[1]
    stride = attrs.get("stride", 1)
    pad = attrs.get("padding", 0)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with padding {pad}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        dw = (g2.T @ cols).reshape(w.shape)
        dxp = kernels.col2im(g2 @ wmat, xp.shape, kh, kw, stride, ho, wo)
        dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
        return dx, dw

    return np.ascontiguousarray(out), backward


@_primitive("batch_norm")
def _batch_norm(xs, attrs):
    """Inputs ``(x, gamma, beta)``; ``x`` is (N, F) or (N, C, H, W).

    attrs: ``training`` (bool), ``momentum`` (fraction of the old running value
    kept, default 0.9), ``eps`` (1e-5), ``running_mean``/``running_var`` arrays
    updated in place when training and ``update_running`` is true.
    """
    x, gamma, beta = xs
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise ShapeError(f"batch_norm: expected 2-d or 4-d input, got {x.shape}")
    feat = x.shape[1]
    if gamma.shape != (feat,) or beta.shape != (feat,):
        raise ShapeError(f"batch_norm: affine params {gamma.shape}/{beta.shape} do not match {feat} features")
    eps = attrs.get("eps", 1e-5)
    momentum = attrs.get("momentum", 0.9)
    rm, rv = attrs.get("running_mean"), attrs.get("running_var")
    g_ = gamma.reshape(bshape)

    if not attrs.get("training", True):
        if rm is None or rv is None:
            raise ContractError("batch_norm: eval mode needs running statistics")
        inv = (1.0 / np.sqrt(rv + eps)).astype(x.dtype).reshape(bshape)
        xhat = (x - rm.reshape(bshape).astype(x.dtype)) * inv
        out = xhat * g_ + beta.reshape(bshape)

        def backward_eval(g):
            return g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return out, backward_eval

    m = x.size // feat
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * g_ + beta.reshape(bshape)
    if attrs.get("update_running", True) and rm is not None and rv is not None:
        unbiased = var.reshape(-1) * (m / max(m - 1, 1))
        rm *= momentum
        rm += (1.0 - momentum) * mu.reshape(-1)
        rv *= momentum
        rv += (1.0 - momentum) * unbiased

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        dx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True) - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        return dx, dgamma, dbeta

    return out, backward


@_primitive("l2_normalize")
def _l2_normalize(xs, attrs):
    (a,) = xs
    eps = attrs.get("eps", NORM_EPS)
    norm = np.sqrt((a * a).sum(axis=-1, keepdims=True))
    if np.any(norm < eps):
        bad = np.argwhere(norm.reshape(-1) < eps).reshape(-1)
        raise ZeroNormError(f"l2_normalize: rows {bad.tolist()[:8]} have norm below {eps:g}")
    out = a / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return out, backward


# ---------------------------------------------------------------------------
# functional wrappers
# ---------------------------------------------------------------------------


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def scalar_mul(a, s):
    return apply_primitive("scalar_mul", [a], {"scalar": float(s)})


def elementwise_mul(a, b):
    return apply_primitive("elementwise_mul", [a, b])


def relu(a):
    return apply_primitive("relu", [a])


def exp(a):
    return apply_primitive("exp", [a])


def log(a):
    return apply_primitive("log", [a])


def softmax_last_dim(a):
    return apply_primitive("softmax_last_dim", [a])


def tsum(a, axis=None, keepdims=False):
    return apply_primitive("sum", [a], {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    return apply_primitive("mean", [a], {"axis": axis, "keepdims": keepdims})


def reshape(a, shape):
    return apply_primitive("reshape", [a], {"shape": shape})


def transpose(a, axes=None):
    return apply_primitive("transpose", [a], {"axes": axes})


def concat_rows(tensors):
    return apply_primitive("concat_rows", list(tensors))


def global_avg_pool(a):
    return apply_primitive("global_avg_pool", [a])


def max_pool(a, kernel=2, stride=None):
    return apply_primitive("max_pool", [a], {"kernel": kernel, "stride": stride or kernel})


def conv2d(x, w, stride=1, padding=0):
    return apply_primitive("conv2d", [x, w], {"stride": stride, "padding": padding})


def batch_norm(x, gamma, beta, running_mean=None, running_var=None, training=True,
               momentum=0.9, eps=1e-5, update_running=True):
    attrs = {
        "training": training,
        "momentum": momentum,
        "eps": eps,
        "running_mean": running_mean,
        "running_var": running_var,
        "update_running": update_running,
    }
    return apply_primitive("batch_norm", [x, gamma, beta], attrs)


def l2_normalize(v, eps=NORM_EPS):
    return apply_primitive("l2_normalize", [v], {"eps": eps})


# ---------------------------------------------------------------------------
# gradients and optimisation
# ---------------------------------------------------------------------------


def zero_grad(params):
    for p in params:
        p.grad = None


def backward(loss, params=()):
    """Backpropagate ``loss`` and return ``{name: grad}`` for ``params``.

    Parameters the loss does not reach get an all-zero gradient.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward needs a scalar loss tensor, got shape {shape}")
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for p in params:
        grads[p.name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return grads


def sgd_update(params, grads, lr, momentum=0.0, weight_decay=0.0):
    """SGD with heavy-ball momentum and L2 weight decay.

    ``buf = momentum * buf + (grad + weight_decay * p)``; ``p -= lr * buf``.
    """
    for p in params:
        if p.name not in grads:
            raise ContractError(f"sgd_update: no gradient for trainable parameter {p.name!r}")
        d = grads[p.name] + weight_decay * p.data
        p.momentum_buffer = (momentum * p.momentum_buffer + d).astype(p.data.dtype)
        p.data = (p.data - lr * p.momentum_buffer).astype(p.data.dtype)
