"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, gradients


def numeric_grad(fn: Callable[[], Tensor], t: Tensor, coords, eps: float = 1e-5) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.empty(len(coords))
    for n, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn().item()
        flat[i] = orig - eps
        fm = fn().item()
        flat[i] = orig
        out[n] = (fp - fm) / (2 * eps)
    return out


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], *, eps: float = 1e-5,
                    max_coords: int | None = 24, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences.

    ``fn`` must rebuild the scalar output from ``inputs`` on every call (the
    inputs are perturbed in place).  For tensors with more than ``max_coords``
    elements a seeded random subset of coordinates is probed.  The error of a
    coordinate is ``|analytic - numeric| / max(|numeric|, 1e-3 * scale)`` with
    ``scale`` the largest numeric gradient magnitude of that tensor, so
    coordinates whose true gradient is negligible are judged against the
    tensor's overall gradient size.
    """
    rng = np.random.default_rng(seed)
    analytic = gradients(fn(), inputs)
    worst = 0.0
    for t, g in zip(inputs, analytic):
        n = t.size
        if max_coords is None or n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        num = numeric_grad(fn, t, coords, eps)
        ana = g.data.reshape(-1)[coords]
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-12)
        denom = np.maximum(np.abs(num), 1e-3 * scale)
        worst = max(worst, float(np.max(np.abs(ana - num) / denom)))
    return worst
