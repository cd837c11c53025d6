"""Selective state-space blocks and the directional flattenings that feed them.

Feature maps become token sequences with the channel axis as the embedding
dimension (no patchification).  2-D maps are read in four raster orders, 3-D
volumes along the axial, coronal and sagittal planes, and the per-direction
results are merged back onto the grid.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from ._scan_kernels import scan_backward, scan_forward
from .errors import ConfigError, ShapeError
from .tensor import Tensor, _make, as_tensor

SCAN_CHUNK = 256


class ScanDirection(str, enum.Enum):
    LR = "LR"
    RL = "RL"
    TB = "TB"
    BT = "BT"


class Plane(str, enum.Enum):
    AXIAL = "axial"
    CORONAL = "coronal"
    SAGITTAL = "sagittal"


@dataclass(frozen=True)
class MambaBlockConfig:
    d_model: int
    expand: int = 2
    d_state: int = 16
    dconv_width: int = 4

    def __post_init__(self):
        for name in ("d_model", "expand", "d_state", "dconv_width"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model


@dataclass
class SsmParams:
    """Token-wise projections and state matrix of one selective scan.

    ``A_log`` stores ``log(-A)`` so the continuous-time state matrix
    ``A = -exp(A_log)`` is strictly negative for any parameter value.
    """

    W_B: Tensor
    W_C: Tensor
    W_delta: Tensor
    b_delta: Tensor
    A_log: Tensor
    D: Tensor

    @classmethod
    def from_dict(cls, p: dict) -> "SsmParams":
        return cls(p["W_B"], p["W_C"], p["W_delta"], p["b_delta"], p["A_log"], p["D"])

    @property
    def d_inner(self) -> int:
        return self.A_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.A_log.shape[1]

    def A(self) -> Tensor:
        return -T.exp(self.A_log)


# ---------------------------------------------------------------------------
# parameter initialisation


def _uniform(rng: np.random.Generator, shape, bound: float) -> Tensor:
    return T.create(shape, "uniform", seed=int(rng.integers(2**63)), low=-bound, high=bound,
                    requires_grad=True)


def _const(shape, value: float) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=True)


def init_ssm(d_inner: int, d_state: int, rng: np.random.Generator,
             dt_min: float = 1e-3, dt_max: float = 0.1) -> dict:
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), size=d_inner))
    b_delta = dt + np.log(-np.expm1(-dt))  # inverse softplus
    bound = d_inner ** -0.5
    return {
        "W_B": _uniform(rng, (d_inner, d_state), bound),
        "W_C": _uniform(rng, (d_inner, d_state), bound),
        "W_delta": _uniform(rng, (d_inner, d_inner), bound),
        "b_delta": Tensor(b_delta, requires_grad=True),
        "A_log": Tensor(np.log(np.tile(np.arange(1, d_state + 1, dtype=float), (d_inner, 1))),
                        requires_grad=True),
        "D": _const((d_inner,), 1.0),
    }


def init_mamba_block(cfg: MambaBlockConfig, rng: np.random.Generator) -> dict:
    d, di = cfg.d_model, cfg.d_inner
    return {
        "norm_w": _const((d,), 1.0),
        "norm_b": _const((d,), 0.0),
        "in_proj": _uniform(rng, (d, 2 * di), d ** -0.5),
        "conv_w": _uniform(rng, (di, cfg.dconv_width), cfg.dconv_width ** -0.5),
        "conv_b": _const((di,), 0.0),
        "ssm": init_ssm(di, cfg.d_state, rng),
        "out_proj": _uniform(rng, (di, d), di ** -0.5),
    }


def init_fusion_mamba(d: int, d_state: int, rng: np.random.Generator) -> dict:
    bound = d ** -0.5
    return {
        "a": {"ssm": init_ssm(d, d_state, rng), "gate_w": _uniform(rng, (d, d), bound),
              "gate_b": _const((d,), 0.0)},
        "b": {"ssm": init_ssm(d, d_state, rng), "gate_w": _uniform(rng, (d, d), bound),
              "gate_b": _const((d,), 0.0)},
        "out_w": _uniform(rng, (d, d), bound),
        "out_b": _const((d,), 0.0),
    }


# ---------------------------------------------------------------------------
# discretisation and the scan itself


def discretize(A, B_t, delta_t):
    """Zero-order-hold step: ``A_bar = exp(delta * A)``, ``B_bar = delta * B``.

    ``A`` is ``[d_inner, d_state]``, ``B_t`` is ``[d_state]`` and ``delta_t``
    is one positive step per channel (``[d_inner]``) or a scalar.
    """
    A = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=float)
    B_t = np.asarray(B_t.data if isinstance(B_t, Tensor) else B_t, dtype=float)
    delta_t = np.asarray(delta_t.data if isinstance(delta_t, Tensor) else delta_t, dtype=float)
    if np.any(delta_t <= 0):
        raise ValueError("discretize: step sizes must be positive")
    dcol = delta_t.reshape(-1, 1) if delta_t.ndim else delta_t
    return np.exp(dcol * A), dcol * B_t


def ssm_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor,
             chunk: int = SCAN_CHUNK) -> Tensor:
    """Run ``h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t``, ``y_t = C_t h_t + D u_t``.

    ``u`` and ``delta`` are ``[..., L, d]``, ``B`` and ``C`` are ``[..., L, n]``,
    ``A`` is ``[d, n]`` and ``D`` is ``[d]``.  Leading axes are independent
    sequences.  The recurrence is evaluated by a compiled kernel in one pass;
    the backward pass recomputes states chunk by chunk.
    """
    u, delta, A, B, C, D = (as_tensor(t) for t in (u, delta, A, B, C, D))
    if u.shape != delta.shape or B.shape != C.shape or u.shape[:-1] != B.shape[:-1]:
        raise ShapeError(f"ssm_scan: inconsistent shapes u{u.shape} delta{delta.shape} "
                         f"B{B.shape} C{C.shape}")
    d, n = A.shape
    if u.shape[-1] != d or B.shape[-1] != n or D.shape != (d,):
        raise ShapeError(f"ssm_scan: A{A.shape}, D{D.shape} do not match u{u.shape}, B{B.shape}")
    lead = u.shape[:-2]
    L = u.shape[-2]
    dtype = u.dtype
    arrs = [np.ascontiguousarray(t.data.reshape((-1, L, t.shape[-1])), dtype=dtype)
            for t in (u, delta, B, C)]
    Ad = np.ascontiguousarray(A.data, dtype=dtype)
    Dd = np.ascontiguousarray(D.data, dtype=dtype)
    record = T._state["grad_enabled"] and any(t.requires_grad for t in (u, delta, A, B, C, D))
    y, hs = scan_forward(arrs[0], arrs[1], Ad, arrs[2], arrs[3], Dd, chunk, record)

    def vjp(g):
        g = np.ascontiguousarray(g.reshape((-1, L, d)), dtype=dtype)
        du, ddelta, dA, dB, dC, dD = scan_backward(g, arrs[0], arrs[1], Ad, arrs[2], arrs[3],
                                                   Dd, hs, chunk)
        return (du.reshape(u.shape), ddelta.reshape(u.shape), dA,
                dB.reshape(B.shape), dC.reshape(C.shape), dD)

    return _make(y.reshape(lead + (L, d)), (u, delta, A, B, C, D), vjp, "ssm_scan")


def ssm_scan_reference(u, delta, A, B, C, D) -> np.ndarray:
    """Plain step-by-step recurrence on numpy arrays (no chunking, no kernel)."""
    u, delta, A, B, C, D = (np.asarray(x.data if isinstance(x, Tensor) else x, dtype=float)
                            for x in (u, delta, A, B, C, D))
    L = u.shape[-2]
    h = np.zeros(u.shape[:-2] + A.shape)
    ys = []
    for t in range(L):
        dt = delta[..., t, :, None]
        h = np.exp(dt * A) * h + dt * B[..., t, None, :] * u[..., t, :, None]
        ys.append((h * C[..., t, None, :]).sum(-1) + D * u[..., t, :])
    return np.stack(ys, axis=-2)


def ssm_inputs(u: Tensor, p: SsmParams):
    """Derive per-token ``delta``, ``B`` and ``C`` from the scan input."""
    delta = T.softplus(nn.linear(u, p.W_delta, p.b_delta))
    return delta, T.matmul(u, p.W_B), T.matmul(u, p.W_C)


def selective_scan(u: Tensor, p) -> Tensor:
    """Input-dependent scan of ``u[..., L, d_inner]`` under parameters ``p``."""
    if isinstance(p, dict):
        p = SsmParams.from_dict(p)
    if u.shape[-1] != p.d_inner:
        raise ShapeError(f"selective_scan: width {u.shape[-1]} != d_inner {p.d_inner}")
    delta, B, C = ssm_inputs(u, p)
    return ssm_scan(u, delta, p.A(), B, C, p.D)


# ---------------------------------------------------------------------------
# blocks


def mamba_block(tokens: Tensor, p: dict) -> Tensor:
    """Pre-norm Mamba block on ``tokens[..., L, d_model]`` with a residual path."""
    di = p["out_proj"].shape[0]
    h = nn.layer_norm(tokens, p["norm_w"], p["norm_b"])
    xz = T.matmul(h, p["in_proj"])
    x, z = xz[..., :di], xz[..., di:]
    x = T.silu(nn.causal_depthwise_conv1d(x, p["conv_w"], p["conv_b"]))
    y = selective_scan(x, p["ssm"]) * T.silu(z)
    return tokens + T.matmul(y, p["out_proj"])


def fusion_delta(a: Tensor, b: Tensor, p: dict) -> Tensor:
    """Cross-gated update of :func:`fusion_mamba` without its residual term.

    Both streams are layer-normalised first: the scan output grows with the
    cube of its input scale, so raw features would diverge over K rounds.
    """
    if a.shape != b.shape:
        raise ShapeError(f"fusion_mamba: token shapes differ {a.shape} vs {b.shape}")
    pa, pb = p["a"], p["b"]
    a, b = nn.layer_norm(a), nn.layer_norm(b)
    ya = selective_scan(a, pa["ssm"]) * T.sigmoid(nn.linear(b, pa["gate_w"], pa["gate_b"]))
    yb = selective_scan(b, pb["ssm"]) * T.sigmoid(nn.linear(a, pb["gate_w"], pb["gate_b"]))
    return nn.linear(ya + yb, p["out_w"], p["out_b"])


def fusion_mamba(a: Tensor, b: Tensor, p: dict) -> Tensor:
    """Merge two token streams: each stream's scan is gated by the other one."""
    return fusion_delta(a, b, p) + (a + b) * 0.5


# ---------------------------------------------------------------------------
# flattenings


def scan_order_2d(H: int, W: int, direction) -> np.ndarray:
    """Grid positions (row-major flat indices) in the order they are visited."""
    direction = ScanDirection(direction)
    grid = np.arange(H * W).reshape(H, W)
    order = grid.ravel() if direction in (ScanDirection.LR, ScanDirection.RL) else grid.T.ravel()
    if direction in (ScanDirection.RL, ScanDirection.BT):
        order = order[::-1]
    return np.ascontiguousarray(order)


def scan_order_3d(D: int, H: int, W: int, plane, reverse: bool = False) -> np.ndarray:
    plane = Plane(plane)
    grid = np.arange(D * H * W).reshape(D, H, W)
    perm = {Plane.AXIAL: (0, 1, 2), Plane.CORONAL: (1, 0, 2), Plane.SAGITTAL: (2, 0, 1)}[plane]
    order = grid.transpose(perm).ravel()
    return np.ascontiguousarray(order[::-1] if reverse else order)


def grid_to_tokens(x: Tensor, n_spatial: int) -> Tensor:
    c_axis = x.ndim - n_spatial - 1
    lead, C, sp = x.shape[:c_axis], x.shape[c_axis], x.shape[c_axis + 1:]
    flat = T.reshape(x, lead + (C, int(np.prod(sp))))
    return T.swapaxes(flat, -1, -2)


def tokens_to_grid(tokens: Tensor, spatial: tuple) -> Tensor:
    lead, C = tokens.shape[:-2], tokens.shape[-1]
    return T.reshape(T.swapaxes(tokens, -1, -2), lead + (C,) + tuple(spatial))


def _gather_tokens(tokens: Tensor, order: np.ndarray) -> Tensor:
    if np.array_equal(order, np.arange(order.size)):
        return tokens
    return T.take(tokens, order, axis=tokens.ndim - 2)


def scan_2d(fmap: Tensor, direction) -> Tensor:
    """``[..., C, H, W]`` -> ``[..., H*W, C]`` visited in ``direction`` order."""
    fmap = as_tensor(fmap)
    H, W = fmap.shape[-2:]
    return _gather_tokens(grid_to_tokens(fmap, 2), scan_order_2d(H, W, direction))


def unscan_2d(tokens: Tensor, direction, H: int, W: int) -> Tensor:
    inv = np.argsort(scan_order_2d(H, W, direction))
    return tokens_to_grid(_gather_tokens(tokens, inv), (H, W))


def scan_3d_triplane(vol: Tensor, plane, reverse: bool = False) -> Tensor:
    """``[..., C, D, H, W]`` -> ``[..., D*H*W, C]`` read along ``plane``."""
    vol = as_tensor(vol)
    D, H, W = vol.shape[-3:]
    return _gather_tokens(grid_to_tokens(vol, 3), scan_order_3d(D, H, W, plane, reverse))


def unscan_3d(tokens: Tensor, plane, D: int, H: int, W: int, reverse: bool = False) -> Tensor:
    inv = np.argsort(scan_order_3d(D, H, W, plane, reverse))
    return tokens_to_grid(_gather_tokens(tokens, inv), (D, H, W))


# ---------------------------------------------------------------------------
# directional mixers


def vss_2d(fmap: Tensor, blocks: list) -> Tensor:
    """Four-direction scan of ``fmap[..., C, H, W]``; one Mamba block per direction.

    Each block carries its own residual, so averaging the four unscanned
    outputs adds the mean directional update to the input exactly once.
    """
    if len(blocks) != 4:
        raise ConfigError("vss_2d needs one block per direction (4)")
    H, W = fmap.shape[-2:]
    outs = [unscan_2d(mamba_block(scan_2d(fmap, d), p), d, H, W)
            for d, p in zip(ScanDirection, blocks)]
    return (outs[0] + outs[1] + outs[2] + outs[3]) * 0.25


def triplane_3d(vol: Tensor, p: dict, bidirectional: bool = False) -> Tensor:
    """Axial, coronal and sagittal scans of ``vol[..., C, D, H, W]`` merged by fusion blocks.

    The merge order is fixed: ``(axial + coronal) + sagittal``.  With
    ``bidirectional`` each plane is also read backwards by a second block and
    the two readings are averaged before merging.
    """
    D, H, W = vol.shape[-3:]
    planes = []
    blocks = p["planes"]
    per_plane = 2 if bidirectional else 1
    if len(blocks) != 3 * per_plane:
        raise ConfigError(f"triplane_3d expects {3 * per_plane} plane blocks, got {len(blocks)}")
    for i, plane in enumerate(Plane):
        out = unscan_3d(mamba_block(scan_3d_triplane(vol, plane), blocks[per_plane * i]),
                        plane, D, H, W)
        if bidirectional:
            rev = unscan_3d(mamba_block(scan_3d_triplane(vol, plane, True),
                                        blocks[per_plane * i + 1]), plane, D, H, W, True)
            out = (out + rev) * 0.5
        planes.append(grid_to_tokens(out, 3))
    merged = fusion_mamba(planes[0], planes[1], p["merge"][0])
    merged = fusion_mamba(merged, planes[2], p["merge"][1])
    return tokens_to_grid(merged, (D, H, W))


def planar_3d(vol: Tensor, p: dict) -> Tensor:
    """Slice-wise 2-D scanning of a volume (left-right and top-bottom only).

    Every axial slice is an independent sequence, so nothing propagates along
    the depth axis.  The two in-slice readings are merged by one fusion block.
    """
    lead = vol.shape[:-4]
    C, D, H, W = vol.shape[-4:]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2, nl + 3)
    slices = T.reshape(T.transpose(vol, perm), (-1, C, H, W))
    lr = unscan_2d(mamba_block(scan_2d(slices, "LR"), p["planes"][0]), "LR", H, W)
    tb = unscan_2d(mamba_block(scan_2d(slices, "TB"), p["planes"][1]), "TB", H, W)
    merged = fusion_mamba(grid_to_tokens(lr, 2), grid_to_tokens(tb, 2), p["merge"][0])
    out = T.reshape(tokens_to_grid(merged, (H, W)), lead + (D, C, H, W))
    return T.transpose(out, perm)
