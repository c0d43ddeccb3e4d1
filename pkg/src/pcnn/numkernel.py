"""Dense tensor ops with reverse-mode autodiff.

Everything runs in float64. Ops record themselves on the innermost active
Tape; with no tape active they are plain forward computations (used for
inference and finite-difference probing).
"""

import threading

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operands do not conform."""


class ConfigError(ValueError):
    """Bad structural configuration (e.g. heads not dividing depth)."""


class TapeError(RuntimeError):
    """Misuse of the tape (backward on a foreign or non-scalar node)."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested on a batch of size 1."""


_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


class Tape:
    """Ordered record of one forward pass; creation order is topological."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    stack = _tape_stack()
    if stack and out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
        stack[-1].nodes.append(out)
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g, shape):
    """Sum gradient g down to `shape` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(tape, loss):
    """Reverse-replay the tape, accumulating grads into requiring tensors."""
    if loss._backward is None and loss not in tape.nodes:
        raise TapeError("loss was not produced under this tape")
    found = any(n is loss for n in tape.nodes)
    if not found:
        raise TapeError("loss was not produced under this tape")
    if loss.data.shape != ():
        raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)


# ---------------------------------------------------------------- primitives


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data + b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data - b.data

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), back)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out_data = a.data * b.data

    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back)


def pow_scalar(a, p):
    a = _as_tensor(a)
    out_data = a.data**p

    def back(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(out_data, (a,), back)


def matmul(a, b):
    """2D @ 2D, batched with identical leading dims, or ND @ 2D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.data.shape} @ {b.data.shape}")
    stacked_weight = a.data.ndim > 2 and b.data.ndim == 2
    if not stacked_weight and (a.data.ndim > 2 or b.data.ndim > 2):
        if a.data.shape[:-2] != b.data.shape[:-2]:
            raise ShapeError(
                f"matmul: batch dims differ, {a.data.shape} @ {b.data.shape}"
            )
    out_data = a.data @ b.data

    def back(g):
        _accum(a, g @ np.swapaxes(b.data, -1, -2))
        if stacked_weight:
            i = a.data.shape[-1]
            _accum(b, a.data.reshape(-1, i).T @ g.reshape(-1, g.shape[-1]))
        else:
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)

    return _make(out_data, (a, b), back)


def reshape(a, shape):
    a = _as_tensor(a)
    old = a.data.shape
    out_data = a.data.reshape(shape)

    def back(g):
        _accum(a, g.reshape(old))

    return _make(out_data, (a,), back)


def transpose(a, axes):
    a = _as_tensor(a)
    inv = np.argsort(axes)
    out_data = a.data.transpose(axes)

    def back(g):
        _accum(a, g.transpose(inv))

    return _make(out_data, (a,), back)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(out_data, tuple(tensors), back)


def slice_axis(a, axis, start, stop):
    a = _as_tensor(a)
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out_data = a.data[idx]

    def back(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accum(a, full)

    return _make(out_data, (a,), back)


def broadcast_to(a, shape):
    a = _as_tensor(a)
    out_data = np.broadcast_to(a.data, shape).copy()

    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))

    return _make(out_data, (a,), back)


def mean_axis(a, axis, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.shape[axis]

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape) / n)

    return _make(out_data, (a,), back)


def sum_all(a):
    a = _as_tensor(a)
    out_data = np.asarray(a.data.sum())

    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(out_data, (a,), back)


def mean_all(a):
    a = _as_tensor(a)
    out_data = np.asarray(a.data.mean())
    n = a.data.size

    def back(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(out_data, (a,), back)


# ----------------------------------------------------------- nonlinearities


def gelu(x):
    """Exact erf-based GELU: x * Phi(x)."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi

    def back(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        _accum(x, g * (phi + x.data * pdf))

    return _make(out_data, (x,), back)


def sigmoid(x):
    x = _as_tensor(x)
    out_data = np.empty_like(x.data)
    pos = x.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def back(g):
        _accum(x, g * out_data * (1.0 - out_data))

    return _make(out_data, (x,), back)


def softmax(x):
    """Softmax over the last axis."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        inner = (g * out_data).sum(axis=-1, keepdims=True)
        _accum(x, out_data * (g - inner))

    return _make(out_data, (x,), back)


def bce_with_logits(o, y):
    """Mean binary cross-entropy on logits, stable at large |o|."""
    o = _as_tensor(o)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != o.data.shape:
        raise ShapeError(f"bce: logits {o.data.shape} vs labels {y.shape}")
    if y.size and not np.all((y == 0) | (y == 1)):
        raise ValueError("bce labels must be 0 or 1")
    z = o.data
    loss = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out_data = np.asarray(loss.mean())
    n = max(z.size, 1)

    def back(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        _accum(o, g * (s - y) / n)

    return _make(out_data, (o,), back)


# ------------------------------------------------------------------- layers


def linear(x, w, b):
    """y = x @ w + b over the trailing feature axis."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.data.shape[-1] != w.data.shape[0]:
        raise ShapeError(f"linear: input {x.data.shape} does not match weight {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"linear: bias {b.data.shape} does not match weight {w.data.shape}")
    return add(matmul(x, w), b)


class BatchNormParams:
    """Affine batch-norm state for one feature axis of width F."""

    def __init__(self, f, eps=1e-5, momentum=0.1):
        self.gamma = Tensor(np.ones(f), requires_grad=True)
        self.beta = Tensor(np.zeros(f), requires_grad=True)
        self.running_mean = np.zeros(f)
        self.running_var = np.ones(f)
        self.eps = eps
        self.momentum = momentum


def batchnorm(x, params, mode):
    """Normalize (B, F) over the batch axis. Biased variance throughout."""
    x = _as_tensor(x)
    if x.data.ndim != 2 or x.data.shape[1] != params.gamma.data.shape[0]:
        raise ShapeError(
            f"batchnorm: input {x.data.shape} vs feature width {params.gamma.data.shape[0]}"
        )
    if mode == "train":
        if x.data.shape[0] < 2:
            raise DegenerateBatchError("batchnorm needs batch size >= 2 in train mode")
        mu = mean_axis(x, 0)
        xc = sub(x, mu)
        var = mean_axis(mul(xc, xc), 0)
        inv = pow_scalar(add(var, params.eps), -0.5)
        xhat = mul(xc, inv)
        m = params.momentum
        params.running_mean = (1 - m) * params.running_mean + m * mu.data
        params.running_var = (1 - m) * params.running_var + m * var.data
    elif mode == "eval":
        inv = 1.0 / np.sqrt(params.running_var + params.eps)
        xhat = mul(sub(x, params.running_mean), inv)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    return add(mul(xhat, params.gamma), params.beta)


class AttentionParams:
    """Q/K/V/output projection weights for one attention layer."""

    def __init__(self, d, rng, std=0.02):
        def w():
            return Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True)

        self.wq, self.wk, self.wv, self.wo = w(), w(), w(), w()
        self.bq = Tensor(np.zeros(d), requires_grad=True)
        self.bk = Tensor(np.zeros(d), requires_grad=True)
        self.bv = Tensor(np.zeros(d), requires_grad=True)
        self.bo = Tensor(np.zeros(d), requires_grad=True)

    def tensors(self):
        return [self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]


def _split_heads(x, heads):
    b, s, d = x.data.shape
    return transpose(reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, s, dh = x.data.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def _attend(q, k, v, scale):
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
    return matmul(softmax(scores), v)


def mhsa(x, params, heads):
    """Scaled-dot-product multi-head self-attention, no residual."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise ShapeError(f"mhsa expects (B, S, D), got {x.data.shape}")
    d = x.data.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"feature depth {d} not divisible by {heads} heads")
    q = _split_heads(linear(x, params.wq, params.bq), heads)
    k = _split_heads(linear(x, params.wk, params.bk), heads)
    v = _split_heads(linear(x, params.wv, params.bv), heads)
    ctx = _merge_heads(_attend(q, k, v, 1.0 / np.sqrt(d // heads)))
    return linear(ctx, params.wo, params.bo)


def cross_attention(y1, y2, params, heads):
    """CLS-as-query fusion; one shared parameter set serves both directions.

    The CLS row of each output attends over every token of the opposite
    branch; non-CLS rows pass through unchanged.
    """
    y1, y2 = _as_tensor(y1), _as_tensor(y2)
    if y1.data.shape != y2.data.shape:
        raise ShapeError(f"cross_attention: {y1.data.shape} vs {y2.data.shape}")
    if y1.data.ndim != 3:
        raise ShapeError(f"cross_attention expects (B, S, D), got {y1.data.shape}")
    d = y1.data.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"feature depth {d} not divisible by {heads} heads")
    scale = 1.0 / np.sqrt(d // heads)

    def fuse(a, b):
        cls = slice_axis(a, 1, 0, 1)
        q = _split_heads(linear(cls, params.wq, params.bq), heads)
        k = _split_heads(linear(b, params.wk, params.bk), heads)
        v = _split_heads(linear(b, params.wv, params.bv), heads)
        ctx = _merge_heads(_attend(q, k, v, scale))
        new_cls = linear(ctx, params.wo, params.bo)
        return concat([new_cls, slice_axis(a, 1, 1, a.data.shape[1])], axis=1)

    return fuse(y1, y2), fuse(y2, y1)
