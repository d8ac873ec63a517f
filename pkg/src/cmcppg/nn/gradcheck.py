"""Central finite-difference gradient checking.

Analytic gradients come from ordinary backprop in the tensors' own dtype.
The numeric side perturbs each entry by ``h`` *in storage precision* and,
for 32-bit tensors, evaluates the loss with 64-bit accumulation (the stored
values are upcast exactly), so the oracle's own rounding does not swamp
the comparison.
"""
from __future__ import annotations

import numpy as np

from cmcppg.nn import tensor as T


def default_step(dtype):
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-3


def relative_error(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(loss_fn, t, idx, h, accumulate64=True):
    """Central differences of ``loss_fn()`` at the flat entries ``idx`` of ``t``."""
    store = t.data.dtype
    saved = t.data
    work = saved.astype(np.float64) if accumulate64 else saved.copy()
    flat = work.reshape(-1)
    out = np.empty(len(idx))
    t.data = work
    try:
        with T.no_grad():
            for n, i in enumerate(idx):
                orig = flat[i]
                up_v = float(store.type(orig + h))
                down_v = float(store.type(orig - h))
                flat[i] = up_v
                up = float(loss_fn().data)
                flat[i] = down_v
                down = float(loss_fn().data)
                flat[i] = orig
                out[n] = (up - down) / (up_v - down_v)
    finally:
        t.data = saved
    return out


def check_gradients(loss_fn, tensors, h=None, max_entries=24, rng=None, accumulate64=True):
    """Compare backprop gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph on every call and return a scalar
    Tensor. At most ``max_entries`` randomly chosen entries per tensor are
    perturbed. Returns the worst norm-relative error over ``tensors``.

    Piecewise-linear layers (ReLU, max-pool) are only differentiable away
    from their switching points; keep inputs clear of them by more than
    ``h`` or the numeric side measures a secant across the kink.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    T.backward(loss_fn())
    analytic = [np.array(t.grad, copy=True) for t in tensors]

    worst = 0.0
    for t, ga in zip(tensors, analytic):
        step = h if h is not None else default_step(t.data.dtype)
        size = t.data.size
        idx = np.arange(size)
        if size > max_entries:
            idx = np.sort(rng.choice(size, max_entries, replace=False))
        num = numeric_gradient(loss_fn, t, idx, step, accumulate64)
        worst = max(worst, relative_error(ga.reshape(-1)[idx], num))
    return worst
