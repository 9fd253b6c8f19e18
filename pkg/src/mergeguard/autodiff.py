"""A small reverse-mode differentiation engine over numpy arrays.

Operations executed while a :class:`GradTape` is active are recorded in
creation order, which is already a topological order of the graph; the
backward pass replays them in reverse. Outside a tape every op is a plain
numpy computation and nothing is retained.

Tensors keep whatever float dtype they were built with. Training runs in
float32; gradient checks cast models to float64 (the "shadow" path).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import activations as act
from .errors import ContractError, DataError, DimensionError, TrainingError

DEFAULT_DTYPE = np.float32

_TAPES: list["GradTape"] = []


class Tensor:
    """Dense float array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def check_finite(x, what="tensor"):
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(data)):
        raise TrainingError(f"non-finite values in {what}")


class GradTape:
    """Records differentiable operations for one backward pass.

    Use as a context manager; it is confined to the thread that created it.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, node):
        self.nodes.append(node)

    def backward(self, loss, params=None):
        """Gradients of the scalar ``loss`` for each tensor in ``params``.

        ``params`` maps names to leaf tensors (a list of named tensors also
        works). Parameters the loss does not depend on get exact zeros.
        """
        if not isinstance(loss, Tensor) or loss.size != 1:
            shape = loss.shape if isinstance(loss, Tensor) else type(loss).__name__
            raise ContractError(f"backward needs a scalar loss, got shape {shape}")
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        if params is None:
            return grads
        if not isinstance(params, dict):
            params = {p.name: p for p in params}
        out = {}
        for name, p in params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g.reshape(p.shape)
        return out


def backward(tape, loss, params=None):
    return tape.backward(loss, params)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if _TAPES and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        _TAPES[-1].record(out)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, a.dtype)
    b = as_tensor(b)
    return as_tensor(a, b.dtype), b


def add(a, b):
    a, b = _pair(a, b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _pair(a, b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = _pair(a, b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2 * a.data * g,))


def sum_all(a):
    return _make(
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).copy(),),
    )


def mean_all(a):
    n = a.size
    return _make(
        np.asarray(a.data.mean(), dtype=a.dtype),
        (a,),
        lambda g: (np.full(a.shape, g / n, dtype=a.dtype),),
    )


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def matmul(a, b):
    """Matrix product of 2-D tensors."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x, weight, bias):
    """``x @ weight.T + bias`` for x of shape (batch, in)."""
    if x.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense layer expects (batch, {weight.shape[1]}), got {x.shape}")
    out = x.data @ weight.data.T + bias.data

    def bw(g):
        return g @ weight.data, g.T @ x.data, g.sum(axis=0)

    return _make(out, (x, weight, bias), bw)


def logistic(a):
    s = act.logistic(a.data).astype(a.dtype)
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def parametric_activation(x, alpha, kind, beta=1.0):
    """Blend of a base activation and the identity; ``alpha`` is a 0-d tensor."""
    alpha = as_tensor(alpha, x.dtype)
    a = alpha.data.astype(x.dtype)
    y, dx, da = act.derivatives(kind, x.data, a, beta)
    y = y.astype(x.dtype, copy=False)

    def bw(g):
        return g * dx, np.asarray((g * da).sum(), dtype=alpha.dtype).reshape(alpha.shape)

    return _make(y, (x, alpha), bw)


def _im2col(xp, k, stride):
    # (n, c, hp, wp) -> (n, ho, wo, c, k, k)
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return win.transpose(0, 2, 3, 1, 4, 5)


def conv_output_size(size, k, padding, stride):
    span = size + 2 * padding - k
    if span < 0:
        raise DimensionError(f"spatial size {size} with padding {padding} is smaller than kernel {k}")
    if span % stride:
        raise DimensionError(
            f"(size {size} + 2*{padding} - {k}) is not divisible by stride {stride}"
        )
    return span // stride + 1


def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlation of x (n, c_in, h, w) with kernel (c_out, c_in, k, k)."""
    n, c, h, w = x.shape
    c_out, c_in, k, k2 = kernel.shape
    if k != k2:
        raise DimensionError(f"only square kernels are supported, got {k}x{k2}")
    if c != c_in:
        raise DimensionError(f"conv expects {c_in} input channels, got {c}")
    ho = conv_output_size(h, k, padding, stride)
    wo = conv_output_size(w, k, padding, stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride)[:, :ho, :wo].reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(c_out, c * k * k)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        gk = (gm.T @ cols).reshape(kernel.shape)
        gb = gm.sum(axis=0)
        dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
        gxp = np.zeros_like(xp)
        span_h = stride * (ho - 1) + 1
        span_w = stride * (wo - 1) + 1
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + span_h:stride, j:j + span_w:stride] += dcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + h, padding:padding + w]
        return gx, gk, gb

    return _make(np.ascontiguousarray(out), (x, kernel, bias), bw)


def max_pool2d(x, size):
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise DimensionError(f"pool size {size} exceeds spatial dims {h}x{w}")
    xc = x.data[:, :, :ho * size, :wo * size]
    blocks = xc.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, ho, wo, size * size)
    idx = blocks.argmax(axis=-1)[..., None]
    out = np.take_along_axis(blocks, idx, axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((n, c, ho, wo, size * size), dtype=g.dtype)
        np.put_along_axis(gb, idx, g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, :ho * size, :wo * size] = gb.reshape(n, c, ho * size, wo * size)
        return (gx,)

    return _make(out, (x,), bw)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects (batch, classes), got {logits.shape}")
    b, k = logits.shape
    if labels.shape != (b,):
        raise DimensionError(f"expected {b} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(b)
    loss = np.asarray(-logp[rows, labels].mean(), dtype=logits.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1
        return (p * (g / b),)

    return _make(loss, (logits,), bw)
