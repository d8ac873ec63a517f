"""Reverse-mode automatic differentiation over numpy arrays.

Every op records its parents and a closure that maps the output gradient to
parent gradients. :func:`backward` walks the recorded graph in reverse
topological order; the order is fixed by creation order, so gradient
accumulation is deterministic.
"""
from __future__ import annotations

import contextlib

import numpy as np

from cmcppg.errors import ShapeError, StateError

_GRAD_ENABLED = True
_DEFAULT_DTYPE = np.float32
_COUNTER = 0


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def dtype_mode(dtype):
    """Temporarily switch the dtype used for new parameters and inputs."""
    global _DEFAULT_DTYPE
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        global _COUNTER
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name
        _COUNTER += 1
        self._id = _COUNTER

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def mean(self):
        return mean_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def _wrap(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(value, parents, backward_fn):
    out = Tensor(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss, grad=None):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    The graph is released afterwards; a second call on the same node, or a
    call on a node recorded without gradient tracking, raises StateError.
    """
    if loss._backward is None:
        raise StateError("backward() called on a node with no recorded forward graph")
    if grad is None:
        if loss.data.size != 1:
            raise ShapeError("backward() without explicit grad needs a scalar loss")
        grad = np.ones_like(loss.data)

    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node._id in seen:
            continue
        seen.add(node._id)
        stack.append((node, True))
        for p in sorted(node._parents, key=lambda t: t._id, reverse=True):
            if p._backward is not None and p._id not in seen:
                stack.append((p, False))

    grads = {loss._id: np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accum(parent, pg)
            elif parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw)


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw)


def relu(a):
    out = np.maximum(a.data, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def sigmoid(a):
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make(s, (a,), lambda g: (g * s * (1 - s),))


def matmul(a, b):
    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw)


def sum_all(a):
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape),))


def mean_all(a):
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.broadcast_to(g / n, a.shape),))


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


# ---------------------------------------------------------------- layers

def linear(x, w, b=None):
    """x (B, I) @ w (O, I).T + b (O,)"""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear expects last dim {w.shape[1]}, got {x.shape}")
    # einsum keeps each output row independent of batch size and position,
    # which BLAS gemm does not guarantee at the last ulp
    out = np.einsum("bi,oi->bo", x.data, w.data)
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data
        gw = g.T @ x.data
        gb = g.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, bw if b is not None else (lambda g: bw(g)[:2]))


def _conv_out_len(length, k, stride, pad):
    return (length + 2 * pad - k) // stride + 1


def conv1d(x, w, b=None, stride=1, padding=0):
    """1-D cross-correlation on channels-last activations.

    x (N, L, C), w (O, C, K) -> (N, Lout, O).
    """
    if x.data.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d expects (N, L, {w.shape[1]}), got {x.shape}")
    n, length, c = x.shape
    o, _, k = w.shape
    lout = _conv_out_len(length, k, stride, padding)
    if lout < 1:
        raise ShapeError(f"conv1d input length {length} too short for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (0, 0))) if padding else x.data
    span = stride * (lout - 1) + 1
    if k == 1:
        cols = np.ascontiguousarray(xp[:, :span:stride, :]).reshape(n * lout, c)
    else:
        cols = np.concatenate([xp[:, j:j + span:stride, :] for j in range(k)], axis=2)
        cols = cols.reshape(n * lout, k * c)
    # rows of wmat ordered (k, c) to match cols
    wmat = np.ascontiguousarray(w.data.transpose(2, 1, 0)).reshape(k * c, o)
    out = cols @ wmat
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(n * lout, o)
        gw = (cols.T @ g2).reshape(k, c, o).transpose(2, 1, 0)
        gb = g2.sum(axis=0) if b is not None else None
        gcols = (g2 @ wmat.T).reshape(n, lout, k, c)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for j in range(k):
            gxp[:, j:j + span:stride, :] += gcols[:, :, j, :]
        gx = gxp[:, padding:padding + length, :] if padding else gxp
        return gx, np.ascontiguousarray(gw), gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out.reshape(n, lout, o), parents, bw if b is not None else (lambda g: bw(g)[:2]))


def _colsum(a2, ones):
    """Column sums of a 2-D array through a BLAS matrix-vector product."""
    return ones @ a2


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.9, eps=1e-5):
    """Per-channel batch normalization over channels-last (N, L, C) or (N, C).

    ``running_mean``/``running_var`` are plain arrays updated in place in
    training mode: running = momentum * running + (1 - momentum) * batch.
    """
    c = x.shape[-1]
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    ones = np.ones(m, dtype=x.data.dtype)
    if training:
        mu = _colsum(x2, ones) / m
        xc = x2 - mu
        var = _colsum(xc * xc, ones) / m
        running_mean *= momentum
        running_mean += (1 - momentum) * mu
        running_var *= momentum
        running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    else:
        mu = running_mean.astype(x.data.dtype, copy=False)
        var = running_var
        xc = x2 - mu
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype, copy=False)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        g2 = g.reshape(-1, c)
        gb = _colsum(g2, ones)
        gg = _colsum(g2 * xhat, ones)
        if training:
            gx = (g2 - gb / m - xhat * (gg / m)) * (gamma.data * inv)
        else:
            gx = g2 * (gamma.data * inv)
        return gx.reshape(x.shape), gg, gb

    return _make(out.reshape(x.shape), (x, gamma, beta), bw)


def max_pool1d(x, size=2):
    """Non-overlapping max pooling along L of (N, L, C); a trailing
    remainder is dropped and ties go to the earliest position."""
    n, length, c = x.shape
    lout = length // size
    out = x.data[:, 0:lout * size:size, :].copy()
    winner = np.zeros(out.shape, dtype=np.int8)
    for j in range(1, size):
        cand = x.data[:, j:lout * size:size, :]
        better = cand > out
        out[better] = cand[better]
        winner[better] = j

    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        for j in range(size):
            full[:, j:lout * size:size, :] = g * (winner == j)
        return (full,)

    return _make(out, (x,), bw)


def upsample1d(x, factor=2):
    """Nearest-neighbour upsampling along L of (N, L, C)."""
    out = np.repeat(x.data, factor, axis=1)

    def bw(g):
        n, length, c = x.shape
        return (g.reshape(n, length, factor, c).sum(axis=2),)

    return _make(out, (x,), bw)


def global_avg_pool(x):
    """(N, L, C) -> (N, C)"""
    length = x.shape[1]
    return _make(x.data.mean(axis=1), (x,),
                 lambda g: (np.broadcast_to(g[:, None, :] / length, x.shape),))


def crop(x, length):
    """Keep the first ``length`` positions of (N, L, C)."""
    def bw(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :length, :] = g
        return (full,)

    return _make(x.data[:, :length, :], (x,), bw)


def transpose12(x):
    """Swap axes 1 and 2 of a 3-D tensor: (N, C, L) <-> (N, L, C)."""
    return _make(np.ascontiguousarray(x.data.transpose(0, 2, 1)), (x,),
                 lambda g: (g.transpose(0, 2, 1),))


# ---------------------------------------------------------------- losses

def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    b = logits.shape[0]
    lsm = log_softmax(logits.data)
    loss = -lsm[np.arange(b), labels].mean()

    def bw(g):
        p = np.exp(lsm)
        p[np.arange(b), labels] -= 1
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def symmetric_cross_entropy(logits, labels, alpha=1.0, beta=1.0, clamp_log=-4.0):
    """alpha * CE + beta * RCE, where RCE = -sum_k p_k log q_k with the
    one-hot target q and log 0 replaced by ``clamp_log``. Batch mean."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    lsm = log_softmax(logits.data)
    p = np.exp(lsm)
    onehot = np.zeros_like(p)
    onehot[np.arange(b), labels] = 1
    ce = -lsm[np.arange(b), labels]
    # log q is 0 on the true class and clamp_log elsewhere
    rce = -clamp_log * (1 - p[np.arange(b), labels])
    loss = (alpha * ce + beta * rce).mean()

    def bw(g):
        gce = p - onehot
        # d(1 - p_y)/dz_j = -p_y (1[j=y] - p_j)
        py = p[np.arange(b), labels][:, None]
        grce = -clamp_log * (-py * (onehot - p))
        return ((alpha * gce + beta * grce) * (g / b),)

    return _make(np.asarray(loss, dtype=logits.data.dtype), (logits,), bw)


def mse(pred, target):
    diff = pred.data - target
    n = diff.size
    return _make(np.asarray((diff * diff).mean(), dtype=pred.data.dtype), (pred,),
                 lambda g: (diff * (2.0 * g / n),))
