"""Finite-difference verification of reverse-mode gradients.

The checker perturbs inputs in float64 with central differences and compares
against the gradients produced by one backward pass. Small inputs get every
coordinate checked; large inputs get a random sample of coordinates plus one
directional-derivative probe, which keeps whole-block checks affordable
while still exercising the full backward graph.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, backward, reset_tape


def _scalar_loss(fn: Callable[..., Tensor], tensors: Sequence[Tensor]) -> float:
    out = fn(*tensors)
    value = float(out.data.sum())
    reset_tape()
    return value


def numeric_grad(fn: Callable[..., Tensor], tensors: Sequence[Tensor], which: int,
                 index, eps: float = 1e-3) -> float:
    """Central-difference derivative of sum(fn(*tensors)) w.r.t. one coordinate."""
    t = tensors[which]
    orig = t.data[index]
    t.data[index] = orig + eps
    hi = _scalar_loss(fn, tensors)
    t.data[index] = orig - eps
    lo = _scalar_loss(fn, tensors)
    t.data[index] = orig
    return (hi - lo) / (2.0 * eps)


def check_gradients(fn: Callable[..., Tensor], tensors: Sequence[Tensor],
                    eps: float = 1e-3, rtol: float = 1e-3, atol: float = 1e-6,
                    max_coords: int = 24,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic and numeric gradients of ``sum(fn(*tensors))``.

    Returns the worst relative error seen. Raises AssertionError when any
    checked coordinate falls outside ``atol + rtol * |numeric|``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tensors = list(tensors)
    for t in tensors:
        if t.data.dtype != np.float64:
            raise TypeError("gradient checks require float64 inputs")
        t.grad = None

    out = fn(*tensors)
    ones = np.ones_like(out.data)
    total = (out * Tensor(ones)) if out.data.ndim else out
    if total.data.ndim:
        from . import ops

        total = ops.sum_(total)
    backward(total)

    worst = 0.0
    for which, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        coords = list(np.ndindex(t.data.shape))
        if len(coords) > max_coords:
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[int(p)] for p in picks]
        for index in coords:
            num = numeric_grad(fn, tensors, which, index, eps=eps)
            ana = float(analytic[index])
            err = abs(ana - num)
            tol = atol + rtol * abs(num)
            rel = err / max(abs(num), abs(ana), 1e-12)
            worst = max(worst, min(rel, err))
            assert err <= tol, (
                f"gradient mismatch on input {which} at {index}: "
                f"analytic {ana:.8g}, numeric {num:.8g}, err {err:.3g} > tol {tol:.3g}")
    return worst


def check_directional(fn: Callable[..., Tensor], tensors: Sequence[Tensor],
                      eps: float = 1e-3, rtol: float = 2e-3, atol: float = 1e-6,
                      rng: Optional[np.random.Generator] = None) -> float:
    """Directional-derivative probe: <grad, v> vs (f(x+eps v) - f(x-eps v))/2eps.

    One probe exercises every parameter of a composite block at once, so it
    catches wrong backward wiring even when coordinate sampling would miss it.
    """
    if rng is None:
        rng = np.random.default_rng(1)
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    out = fn(*tensors)
    from . import ops

    total = ops.sum_(out) if out.data.ndim else out
    backward(total)

    directions = []
    dot = 0.0
    for t in tensors:
        if t.requires_grad:
            v = rng.standard_normal(t.data.shape)
            v /= max(np.linalg.norm(v), 1e-12)
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            dot += float((g * v).sum())
        else:
            v = None
        directions.append(v)

    originals = [t.data.copy() for t in tensors]

    def _eval_at(sign: float) -> float:
        for t, v, o in zip(tensors, directions, originals):
            t.data = o + sign * eps * v if v is not None else o
        return _scalar_loss(fn, tensors)

    hi = _eval_at(+1.0)
    lo = _eval_at(-1.0)
    for t, o in zip(tensors, originals):
        t.data = o
    num = (hi - lo) / (2.0 * eps)
    err = abs(dot - num)
    assert err <= atol + rtol * abs(num), (
        f"directional derivative mismatch: analytic {dot:.8g}, numeric {num:.8g}")
    return err / max(abs(num), 1e-12)
