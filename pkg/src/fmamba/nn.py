"""Convolution, pooling, normalisation and projection primitives (2D and 3D)."""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor, _make, as_tensor


@dataclass
class ConvParams:
    """Weights ``[out, in, k...]`` plus the geometry of one convolution."""

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int | None = None
    dilation: int = 1

    def __post_init__(self):
        ks = self.weight.shape[2:]
        if any(k % 2 == 0 for k in ks):
            raise ShapeError(f"kernel sizes must be odd, got {ks}")
        if self.stride < 1 or self.dilation < 1:
            raise ShapeError("stride and dilation must be >= 1")
        if self.padding is not None and self.padding < 0:
            raise ShapeError("padding must be >= 0")


def same_padding(kernel: int, dilation: int = 1) -> int:
    return dilation * (kernel - 1) // 2


def conv(x: Tensor, p, bias: Tensor | None = None, *, stride: int = 1,
         padding: int | None = None, dilation: int = 1) -> Tensor:
    """Zero-padded cross-correlation of ``x[B, C, *S]`` with ``weight[O, C, *k]``.

    ``p`` is either a :class:`ConvParams` or the weight tensor itself.
    ``padding=None`` selects "same" padding ``dilation * (k - 1) / 2``.
    """
    if isinstance(p, ConvParams):
        weight, bias = p.weight, p.bias
        stride, padding, dilation = p.stride, p.padding, p.dilation
    else:
        weight = p
    x, weight = as_tensor(x), as_tensor(weight)
    nsp = weight.ndim - 2
    if nsp not in (2, 3) or x.ndim != nsp + 2:
        raise ShapeError(f"conv: input rank {x.ndim} does not match kernel rank {weight.ndim}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv: input has {x.shape[1]} channels, kernel expects {weight.shape[1]}")
    ks = weight.shape[2:]
    if padding is None:
        padding = same_padding(ks[0], dilation)
    spatial = x.shape[2:]
    out_sp = tuple((s + 2 * padding - dilation * (k - 1) - 1) // stride + 1
                   for s, k in zip(spatial, ks))
    if any(o < 1 for o in out_sp):
        raise ShapeError(f"conv: kernel extent exceeds padded input {spatial}")

    xd, wd = x.data, weight.data
    xp = np.pad(xd, [(0, 0), (0, 0)] + [(padding, padding)] * nsp) if padding else xd
    B, C = xp.shape[:2]
    O = wd.shape[0]
    grid = xp.shape[2:]
    # Every kernel tap is a constant shift on the flattened padded grid, so the
    # stride-1 response at grid position q reads X[:, :, f(q) + shift].
    flat = [int(np.prod(grid[i + 1:])) for i in range(nsp)]
    full = [g - dilation * (k - 1) for g, k in zip(grid, ks)]
    N = sum((f - 1) * st for f, st in zip(full, flat)) + 1
    shifts = [sum(o * dilation * st for o, st in zip(off, flat))
              for off in itertools.product(*[range(k) for k in ks])]
    K = len(shifts)
    wmat = wd.reshape(O, C, K).transpose(0, 2, 1).reshape(O, K * C)

    X = xp.reshape(B, C, -1)
    cols = np.empty((B, K, C, N), dtype=xd.dtype)
    for k, sh in enumerate(shifts):
        cols[:, k] = X[:, :, sh:sh + N]
    y = wmat @ cols.reshape(B, K * C, N)
    del cols
    # pick the (strided) output positions out of the flat stride-1 response
    out = np.ascontiguousarray(as_strided(
        y, (B, O) + out_sp, y.strides[:2] + tuple(st * stride * xd.itemsize for st in flat)))
    if bias is not None:
        out += bias.data.reshape((1, -1) + (1,) * nsp)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    sp_axes = tuple(range(2, 2 + nsp))

    offsets = list(itertools.product(*[range(k) for k in ks]))

    def window(off):
        return (slice(None), slice(None)) + tuple(
            slice(o * dilation, o * dilation + stride * (n - 1) + 1, stride)
            for o, n in zip(off, out_sp))

    def vjp(g):
        g_ob = np.ascontiguousarray(np.moveaxis(g, 1, 0))
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros((C, B) + grid, dtype=g.dtype)
        if weight.requires_grad:
            gw = np.empty_like(wd)
        for off in offsets:
            tap = (slice(None), slice(None)) + off
            if weight.requires_grad:
                gw[tap] = np.tensordot(g_ob, xp[window(off)], axes=((1,) + sp_axes, (0,) + sp_axes))
            if x.requires_grad:
                gxp[window(off)] += np.tensordot(wd[tap], g_ob, axes=([0], [0]))
        if x.requires_grad:
            gx = np.moveaxis(gxp, 0, 1)
            if padding:
                gx = gx[(slice(None), slice(None)) + (slice(padding, -padding),) * nsp]
            gx = np.ascontiguousarray(gx)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0,) + sp_axes))
        return tuple(grads)

    return _make(out, inputs, vjp, "conv")


def global_pool(x: Tensor, mode: str = "avg") -> Tensor:
    """Collapse every spatial axis of ``x[B, C, *S]`` into one value per channel."""
    if x.ndim < 3:
        raise ShapeError(f"global_pool expects [B, C, spatial...], got {x.shape}")
    axes = tuple(range(2, x.ndim))
    if mode == "avg":
        return T.reduce("mean", x, axes)
    if mode == "max":
        return T.reduce("max", x, axes)
    raise ValueError(f"unknown pooling mode {mode!r}")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = T.matmul(x, weight)
    return out + bias if bias is not None else out


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    red = tuple(range(xd.ndim - 1))

    def vjp(g):
        dxhat = g * weight.data if weight is not None else g
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [dx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    inputs = (x,) + tuple(t for t in (weight, bias) if t is not None)
    return _make(out, inputs, vjp, "layer_norm")


def causal_depthwise_conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel causal convolution over the token axis of ``x[..., L, d]``.

    ``weight`` is ``[d, k]``; output token ``t`` sees inputs ``t-k+1 .. t``.
    """
    d, k = weight.shape
    if x.shape[-1] != d:
        raise ShapeError(f"depthwise conv: {x.shape[-1]} channels, weight has {d}")
    xd, wd = x.data, weight.data
    L = xd.shape[-2]
    lead = [(0, 0)] * (xd.ndim - 2)
    xp = np.pad(xd, lead + [(k - 1, 0), (0, 0)])
    out = np.zeros_like(xd)
    for j in range(k):
        out += xp[..., j:j + L, :] * wd[:, j]
    if bias is not None:
        out += bias.data

    def vjp(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(wd)
        red = tuple(range(g.ndim - 1))
        for j in range(k):
            gxp[..., j:j + L, :] += g * wd[:, j]
            gw[:, j] = (g * xp[..., j:j + L, :]).sum(axis=red)
        grads = [gxp[..., k - 1:, :], gw]
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return _make(out, inputs, vjp, "dwconv1d")


def separable_filter(x: Tensor, kernel: np.ndarray, axes) -> Tensor:
    """Valid-mode correlation with the same 1-D ``kernel`` along each of ``axes``."""
    kernel = np.asarray(kernel, dtype=x.dtype)
    K = kernel.size
    out = x
    for ax in axes:
        out = _filter1d(out, kernel, ax % x.ndim, K)
    return out


def _filter1d(x: Tensor, kernel: np.ndarray, axis: int, K: int) -> Tensor:
    n = x.shape[axis]
    if n < K:
        raise ShapeError(f"axis {axis} has size {n}, smaller than the {K}-tap window")
    res = sliding_window_view(x.data, K, axis=axis) @ kernel
    rk = kernel[::-1].copy()

    def vjp(g):
        widths = [(0, 0)] * g.ndim
        widths[axis] = (K - 1, K - 1)
        gp = np.pad(g, widths)
        return (sliding_window_view(gp, K, axis=axis) @ rk,)

    return _make(res, (x,), vjp, "filter1d")


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every spatial voxel of ``x[B, C, *S]`` ``factor`` times per axis."""
    xd = x.data
    nsp = xd.ndim - 2
    out = xd
    for ax in range(2, 2 + nsp):
        out = np.repeat(out, factor, axis=ax)
    shape = xd.shape

    def vjp(g):
        split = list(shape[:2])
        for s in shape[2:]:
            split += [s, factor]
        return (g.reshape(split).sum(axis=tuple(range(3, 3 + 2 * nsp, 2))),)

    return _make(out, (x,), vjp, "upsample")


def avg_pool(x: np.ndarray, factor: int = 2) -> np.ndarray:
    """Non-overlapping average pooling of spatial axes (drops trailing remainders)."""
    nsp = x.ndim - 2
    crop = tuple(slice(0, (s // factor) * factor) for s in x.shape[2:])
    x = x[(slice(None), slice(None)) + crop]
    shape = list(x.shape[:2])
    for s in x.shape[2:]:
        shape += [s // factor, factor]
    return x.reshape(shape).mean(axis=tuple(range(3, 3 + 2 * nsp, 2)))
