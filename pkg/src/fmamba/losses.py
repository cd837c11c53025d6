"""Training objective: pixel, gradient and SSIM terms, 2D and 3D."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor, _make, as_tensor

GRAD_EPS = 1e-8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


@dataclass(frozen=True)
class LossWeights:
    pixel: float = 2.0
    grad: float = 10.0
    ssim: float = 5.0

    def __post_init__(self):
        if min(self.pixel, self.grad, self.ssim) < 0:
            raise ConfigError("loss weights must be non-negative")


def _check_same(*xs) -> None:
    s = xs[0].shape
    for x in xs[1:]:
        if x.shape != s:
            raise ShapeError(f"loss inputs differ in shape: {s} vs {x.shape}")


def _target(x1, x2) -> Tensor:
    # targets are constants; max routes nothing back to the sources
    return Tensor(np.maximum(as_tensor(x1).data, as_tensor(x2).data))


def pixel_loss(xhat: Tensor, x1, x2) -> Tensor:
    """Mean absolute deviation of ``xhat`` from the elementwise max of the sources."""
    xhat = as_tensor(xhat)
    _check_same(xhat, as_tensor(x1), as_tensor(x2))
    return T.mean(T.abs(xhat - _target(x1, x2)))


def _shift(x: Tensor, axis: int, lo: int, n: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(lo, lo + n)
    return x[tuple(idx)]


def gradient_map(x, dims: int = 2) -> Tensor:
    """Gradient magnitude over the trailing ``dims`` axes.

    2D: Sobel responses on an edge-replicated border.  3D: forward differences
    along each axis, zero at the far face.  Both add ``GRAD_EPS`` under the root.
    """
    x = as_tensor(x)
    if x.ndim < dims:
        raise ShapeError(f"gradient_map: tensor of rank {x.ndim} has no {dims} spatial axes")
    if dims == 2:
        H, W = x.shape[-2:]
        lead = [(0, 0)] * (x.ndim - 2)
        p = T.pad(x, lead + [(1, 1), (1, 1)], mode="edge")
        ah, aw = x.ndim - 2, x.ndim - 1

        def smooth(t, axis, n):
            return _shift(t, axis, 0, n) + _shift(t, axis, 1, n) * 2.0 + _shift(t, axis, 2, n)

        cols = smooth(p, ah, H)  # vertical smoothing, still W+2 wide
        gx = _shift(cols, aw, 2, W) - _shift(cols, aw, 0, W)
        rows = smooth(p, aw, W)
        gy = _shift(rows, ah, 2, H) - _shift(rows, ah, 0, H)
        return T.sqrt(gx * gx + gy * gy + GRAD_EPS)
    if dims == 3:
        total = None
        for k in range(3):
            axis = x.ndim - 3 + k
            widths = [(0, 0)] * x.ndim
            widths[axis] = (0, 1)
            p = T.pad(x, widths, mode="edge")
            n = x.shape[axis]
            d = _shift(p, axis, 1, n) - x
            total = d * d if total is None else total + d * d
        return T.sqrt(total + GRAD_EPS)
    raise ConfigError(f"dims must be 2 or 3, got {dims}")


def rms(x: Tensor) -> Tensor:
    """Root mean square; the gradient at an all-zero input is taken as zero."""
    x = as_tensor(x)
    xd = x.data
    val = np.sqrt(np.mean(xd * xd))
    out = np.asarray(val, dtype=xd.dtype)

    def vjp(g):
        if val == 0:
            return (np.zeros_like(xd),)
        return (g * xd / (xd.size * val),)

    return _make(out, (x,), vjp, "rms")


def grad_loss(xhat: Tensor, x1, x2, dims: int = 2) -> Tensor:
    xhat = as_tensor(xhat)
    _check_same(xhat, as_tensor(x1), as_tensor(x2))
    with T.no_grad():
        target = np.maximum(gradient_map(x1, dims).data, gradient_map(x2, dims).data)
    return rms(gradient_map(xhat, dims) - Tensor(target))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return w / w.sum()


def ssim(x, y, dims: int = 2, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> Tensor:
    """Mean local SSIM over valid window positions of the trailing ``dims`` axes."""
    x, y = as_tensor(x), as_tensor(y)
    _check_same(x, y)
    if dims not in (2, 3):
        raise ConfigError(f"dims must be 2 or 3, got {dims}")
    spatial = x.shape[-dims:] if x.ndim >= dims else ()
    if len(spatial) < dims or min(spatial) < window:
        raise ShapeError(f"ssim needs every spatial side >= {window} (got {spatial}); "
                         "pad the inputs or use a smaller window")
    k = gaussian_window(window, sigma)
    axes = tuple(range(x.ndim - dims, x.ndim))

    def blur(t):
        return nn.separable_filter(t, k, axes)

    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    num = (mx * my * 2.0 + SSIM_C1) * (sxy * 2.0 + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return T.mean(num / den)


def ssim_loss(xhat: Tensor, x1, x2, dims: int = 2) -> Tensor:
    xhat = as_tensor(xhat)
    _check_same(xhat, as_tensor(x1), as_tensor(x2))
    x1, x2 = Tensor(as_tensor(x1).data), Tensor(as_tensor(x2).data)
    return (1.0 - ssim(xhat, x1, dims)) * 0.5 + (1.0 - ssim(xhat, x2, dims)) * 0.5


def loss_components(xhat: Tensor, x1, x2, dims: int = 2) -> dict:
    return {"pixel": pixel_loss(xhat, x1, x2), "grad": grad_loss(xhat, x1, x2, dims),
            "ssim": ssim_loss(xhat, x1, x2, dims)}


def total_loss(xhat: Tensor, x1, x2, w: LossWeights = LossWeights(), dims: int = 2,
               components: dict | None = None) -> Tensor:
    """Weighted objective.  Pass a dict as ``components`` to receive the three terms."""
    parts = loss_components(xhat, x1, x2, dims)
    if components is not None:
        components.update(parts)
    return parts["pixel"] * w.pixel + parts["grad"] * w.grad + parts["ssim"] * w.ssim
