"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .core import Tensor, no_grad


def numerical_grad(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int,
                   h: float = 1e-5, coords: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arrays[which]``.

    Only flat positions in ``coords`` are perturbed (all when ``None``);
    others are left at zero.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    flat = target.reshape(-1)
    grad = np.zeros_like(flat)
    coords = np.arange(flat.size) if coords is None else coords
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*[Tensor(a) for a in base]).item()
            flat[i] = orig - h
            fm = f(*[Tensor(a) for a in base]).item()
            flat[i] = orig
            grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(target.shape)


def analytic_grads(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    out = f(*tensors)
    if out.shape != ():
        raise ValueError("gradient check needs a scalar-valued function")
    out.backward()
    return [t.grad.data if t.grad is not None else np.zeros(t.shape) for t in tensors]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise relative error.

    The denominator is floored at ``floor * max|numeric|`` so entries that are
    zero up to roundoff do not dominate.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(np.max(np.abs(n), initial=0.0), np.max(np.abs(a), initial=0.0))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), max(floor * scale, 1e-300))
    return float(np.max(np.abs(a - n) / denom, initial=0.0))


def check_gradients(f: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5,
                    max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Worst relative error between backprop and finite differences over all inputs.

    With ``max_coords`` set, a random subset of that many positions per input
    is checked.
    """
    grads = analytic_grads(f, arrays)
    worst = 0.0
    for k, arr in enumerate(arrays):
        size = np.size(arr)
        coords = None
        if max_coords is not None and size > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(size, size=max_coords, replace=False))
        num = numerical_grad(f, arrays, k, h=h, coords=coords)
        ana = grads[k]
        if coords is not None:
            num = num.reshape(-1)[coords]
            ana = ana.reshape(-1)[coords]
        worst = max(worst, relative_error(ana, num))
    return worst
