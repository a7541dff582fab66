"""Dense tensors with reverse-mode automatic differentiation.

Just enough machinery to express and train the navigation policy on the
CPU: numpy arrays for storage, a dynamically built graph for gradients,
and an Adam optimizer. Training runs in float64 so gradient checks have
headroom; float32 is accepted for inference-only workloads.
"""
from __future__ import annotations

import numpy as np
from scipy import special


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class UsageError(RuntimeError):
    """The autodiff API was called in an unsupported way."""


class PoisonedUpdateError(RuntimeError):
    """An optimizer step saw NaN or Inf gradients and was rejected."""


def _as_array(x, dtype=np.float64):
    a = np.asarray(x, dtype=dtype)
    return a


class Tensor:
    """A dense array plus optional provenance for backpropagation.

    ``data`` is never mutated by ops (graph nodes are immutable); only the
    optimizer writes parameter data, at one synchronization point per
    training iteration. ``grad`` is populated on leaf tensors that have
    ``requires_grad`` set, and accumulates across ``backward`` calls until
    ``zero_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _grad_fn=None):
        self.data = data if isinstance(data, np.ndarray) else _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = _parents
        self._grad_fn = _grad_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        """A view of the same values with no graph history."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self):
        return backward(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name=None):
    return Tensor(x, requires_grad=False, name=name)


def parameter(data, name=None):
    return Tensor(_as_array(data), requires_grad=True, name=name)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_GRAD_ENABLED = True


class no_grad:
    """Context manager that skips graph recording (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self.prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self.prev
        return False


def _make(data, parents, grad_fn):
    if not _GRAD_ENABLED:
        return Tensor(data)
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _grad_fn=grad_fn)


# -- elementwise arithmetic ---------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), grad_fn)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data / b.data
    except ValueError:
        raise ShapeError("div", a.shape, b.shape) from None

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(out, (a, b), grad_fn)


def pow_const(a, exponent):
    a = as_tensor(a)
    e = float(exponent)
    out = a.data**e

    def grad_fn(g):
        return (g * e * a.data ** (e - 1.0),)

    return _make(out, (a,), grad_fn)


def square(a):
    return pow_const(a, 2.0)


def sqrt(a):
    return pow_const(a, 0.5)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def grad_fn(g):
        return (g * out,)

    return _make(out, (a,), grad_fn)


def log(a):
    a = as_tensor(a)
    out = np.log(a.data)

    def grad_fn(g):
        return (g / a.data,)

    return _make(out, (a,), grad_fn)


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return _make(out, (a,), grad_fn)


def relu(a):
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def grad_fn(g):
        return (g * (a.data > 0.0),)

    return _make(out, (a,), grad_fn)


def softplus(a):
    # log(1 + exp(x)), computed stably for large |x|
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)

    def grad_fn(g):
        return (g * special.expit(a.data),)

    return _make(out, (a,), grad_fn)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a):
    """Exact Gaussian-error-linear unit; smooth, so finite differences apply."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + special.erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def grad_fn(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
        return (g * (cdf + a.data * pdf),)

    return _make(out, (a,), grad_fn)


def lgamma(a):
    a = as_tensor(a)
    out = special.gammaln(a.data)

    def grad_fn(g):
        return (g * special.digamma(a.data),)

    return _make(out, (a,), grad_fn)


def digamma(a):
    a = as_tensor(a)
    out = special.digamma(a.data)

    def grad_fn(g):
        return (g * special.polygamma(1, a.data),)

    return _make(out, (a,), grad_fn)


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(out, (a, b), grad_fn)


def maximum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    out = np.where(take_a, a.data, b.data)

    def grad_fn(g):
        return _unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)

    return _make(out, (a, b), grad_fn)


def clip(a, lo, hi):
    return minimum(maximum(a, lo), hi)


# -- linear algebra, reductions, shaping ---------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    if b.ndim == 2 and a.ndim > 2:
        # lower stacked @ matrix to a single BLAS call
        lead = a.shape[:-1]
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(*lead, b.shape[-1])

        def grad_fn(g):
            g2 = g.reshape(-1, b.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape)
            gb = a.data.reshape(-1, a.shape[-1]).T @ g2
            return ga, gb

        return _make(out, (a, b), grad_fn)

    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), grad_fn)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), grad_fn)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))

    def grad_fn(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _make(out, (a,), grad_fn)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _make(out, (a,), grad_fn)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def grad_fn(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), grad_fn)


def transpose(a, axes):
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def grad_fn(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), grad_fn)


def getitem(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    def grad_fn(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _make(out, (a,), grad_fn)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), grad_fn)


def dropout(a, p, rng, train):
    """Inverted dropout: scales by 1/(1-p) at train time, identity in eval."""
    a = as_tensor(a)
    if not train or p <= 0.0:
        return a
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return mul(a, Tensor(keep))


# -- 2D convolution pieces (stride 1) -------------------------------------

def pad2d(a, pad_h, pad_w, mode_h="constant", mode_w="constant"):
    """Pad the last two axes, each with its own mode ('constant' or 'wrap')."""
    a = as_tensor(a)
    h = a.shape[-2]
    spec_h = [(0, 0)] * (a.ndim - 2) + [(pad_h, pad_h), (0, 0)]
    spec_w = [(0, 0)] * (a.ndim - 1) + [(pad_w, pad_w)]
    out = np.pad(a.data, spec_h, mode=mode_h) if pad_h else a.data
    out = np.pad(out, spec_w, mode=mode_w) if pad_w else out

    def grad_fn(g):
        if pad_w:
            core = g[..., :, pad_w:g.shape[-1] - pad_w].copy()
            if mode_w == "wrap":
                core[..., :, -pad_w:] += g[..., :, :pad_w]
                core[..., :, :pad_w] += g[..., :, -pad_w:]
            g = core
        if pad_h:
            core = g[..., pad_h:pad_h + h, :].copy()
            if mode_h == "wrap":
                core[..., -pad_h:, :] += g[..., :pad_h, :]
                core[..., :pad_h, :] += g[..., -pad_h:, :]
            g = core
        return (g,)

    return _make(out, (a,), grad_fn)


def conv2d(a, w):
    """Valid cross-correlation of (B,C,H,W) with kernels (O,C,kh,kw), stride 1.

    Lowered to one matrix multiply via im2col so BLAS does the work.
    """
    a, w = as_tensor(a), as_tensor(w)
    if a.ndim != 4 or w.ndim != 4 or a.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", a.shape, w.shape)
    b, c, h, wd = a.shape
    o, _, kh, kw = w.shape
    ho, wo = h - kh + 1, wd - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("conv2d", a.shape, w.shape)
    win = np.lib.stride_tricks.sliding_window_view(a.data, (kh, kw), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * kh * kw)
    w_flat = w.data.reshape(o, c * kh * kw)
    out = (cols @ w_flat.T).reshape(b, ho, wo, o).transpose(0, 3, 1, 2)

    def grad_fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(b * ho * wo, o)
        gw = (g2.T @ cols).reshape(o, c, kh, kw)
        gcols = (g2 @ w_flat).reshape(b, ho, wo, c, kh, kw)
        ga = np.zeros_like(a.data)
        for di in range(kh):
            for dj in range(kw):
                ga[:, :, di:di + ho, dj:dj + wo] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return ga, gw

    return _make(out, (a, w), grad_fn)


def avg_pool2d(a, kh, kw):
    a = as_tensor(a)
    b, c, h, w = a.shape
    if h % kh or w % kw:
        raise ShapeError("avg_pool2d", a.shape, (kh, kw))
    out = a.data.reshape(b, c, h // kh, kh, w // kw, kw).mean(axis=(3, 5))

    def grad_fn(g):
        g = g[:, :, :, None, :, None] / (kh * kw)
        return (np.broadcast_to(g, (b, c, h // kh, kh, w // kw, kw)).reshape(a.shape).copy(),)

    return _make(out, (a,), grad_fn)


# -- backward pass ---------------------------------------------------------

def backward(loss):
    """Backpropagate from a scalar loss to every reachable leaf.

    Gradients on leaves with ``requires_grad`` accumulate across calls;
    use ``zero_grad`` between optimizer steps.
    """
    if not isinstance(loss, Tensor):
        raise UsageError("backward expects a Tensor")
    if loss.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("backward on a detached tensor (no graph attached)")

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if id(node) in seen:
            continue
        if expanded:
            seen.add(id(node))
            order.append(node)
            continue
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._grad_fn is None:
            # leaf: accumulate into .grad
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- Adam ------------------------------------------------------------------

class AdamState:
    """Adam accumulators for a fixed list of parameter tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state):
    """One bias-corrected Adam update over ``state.params`` using their grads.

    Raises PoisonedUpdateError and leaves parameters and state untouched if
    any gradient contains NaN or Inf.
    """
    grads = []
    for p in state.params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise PoisonedUpdateError(f"non-finite gradient on {p.name or 'parameter'}; step rejected")
        grads.append(g)

    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def zero_grads(params):
    for p in params:
        p.grad = None
