"""The fusion network: per-modality DGCB encoders, latent Mamba stack, CMCA decoder.

Parameters live in a plain nested structure of dicts and lists whose leaves
are :class:`~fmamba.tensor.Tensor` objects.  :func:`flatten_params` turns it
into dotted names (``enc.0.stem.w``) for checkpoints and the optimizer.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import mamba
from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError, ValidationError
from .tensor import Tensor

STRATEGIES = ("four_dir", "triplane", "planar2d")
LRELU_SLOPE = 0.2


@dataclass
class ModelConfig:
    dims: int = 2
    in_channels: int = 1
    stem_channels: int = 32
    latent_channels: int = 64
    dgcb_blocks: int = 2
    dgcb_dilations: tuple = (1, 3, 5)
    k_mamba: int = 5
    cmca_enabled: bool = True
    cmca_reduction: int = 4
    scan_strategy: str | None = None  # None picks four_dir (2D) or triplane (3D)
    triplane_bidirectional: bool = False
    downsample_3d: int = 4
    decoder_layers: int = 3
    mamba_expand: int = 2
    mamba_d_state: int = 16
    mamba_dconv_width: int = 4

    def __post_init__(self):
        self.dgcb_dilations = tuple(int(r) for r in self.dgcb_dilations)
        if self.scan_strategy is None:
            self.scan_strategy = "four_dir" if self.dims == 2 else "triplane"
        self.validate()

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ConfigError(f"dims must be 2 or 3, got {self.dims}")
        if self.in_channels != 1:
            raise ConfigError("only single-channel (luma) inputs are supported")
        for name in ("stem_channels", "latent_channels", "k_mamba", "decoder_layers",
                     "mamba_expand", "mamba_d_state", "mamba_dconv_width", "cmca_reduction"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.dgcb_blocks < 0:
            raise ConfigError("dgcb_blocks must be >= 0")
        if not self.dgcb_dilations or min(self.dgcb_dilations) < 1:
            raise ConfigError("dgcb_dilations needs at least one rate, all >= 1")
        if len(self.dgcb_dilations) > self.latent_channels:
            raise ConfigError("more dilated branches than latent channels")
        if self.scan_strategy not in STRATEGIES:
            raise ConfigError(f"unknown scan_strategy {self.scan_strategy!r}")
        if self.scan_strategy == "four_dir" and self.dims != 2:
            raise ConfigError("scan_strategy four_dir requires dims=2")
        if self.scan_strategy in ("triplane", "planar2d") and self.dims != 3:
            raise ConfigError(f"scan_strategy {self.scan_strategy} requires dims=3")
        ds = self.downsample_3d
        if ds < 1 or ds & (ds - 1):
            raise ConfigError(f"downsample_3d must be a power of two, got {ds}")
        if self.cmca_enabled and self.latent_channels % self.cmca_reduction:
            raise ConfigError(f"latent_channels {self.latent_channels} not divisible by "
                              f"cmca_reduction {self.cmca_reduction}")

    @property
    def n_down(self) -> int:
        return int(math.log2(self.downsample_3d)) if self.dims == 3 else 0

    @property
    def block_config(self) -> mamba.MambaBlockConfig:
        return mamba.MambaBlockConfig(self.latent_channels, self.mamba_expand,
                                      self.mamba_d_state, self.mamba_dconv_width)

    def to_dict(self) -> dict:
        return asdict(self)


def branch_channels(C: int, n: int) -> list[int]:
    """Split ``C`` channels over ``n`` dilated branches as evenly as possible."""
    base, extra = divmod(C, n)
    return [base + (1 if i < extra else 0) for i in range(n)]


def decoder_channels(cfg: ModelConfig) -> list[int]:
    chans = [cfg.latent_channels]
    for _ in range(cfg.decoder_layers):
        c = chans[-1]
        chans.append(max(c // 2, min(16, c)))
    return chans


# ---------------------------------------------------------------------------
# initialisation


def _conv_init(rng, c_out: int, c_in: int, k: int, dims: int, bias: bool = True) -> dict:
    fan_in = c_in * k ** dims
    bound = math.sqrt(6.0 / ((1 + LRELU_SLOPE ** 2) * fan_in))
    p = {"w": mamba._uniform(rng, (c_out, c_in) + (k,) * dims, bound)}
    if bias:
        p["b"] = mamba._const((c_out,), 0.0)
    return p


def _dgcb_init(rng, C: int, dilations, dims: int) -> dict:
    return {
        "gate3": _conv_init(rng, C, C, 3, dims),
        "gate1": _conv_init(rng, C, C, 1, dims),
        "branches": [_conv_init(rng, c, C, 3, dims)
                     for c in branch_channels(C, len(dilations))],
        "merge": _conv_init(rng, C, C, 1, dims),
    }


def _encoder_init(rng, cfg: ModelConfig) -> dict:
    s, c, d = cfg.stem_channels, cfg.latent_channels, cfg.dims
    return {
        "stem": _conv_init(rng, s, cfg.in_channels, 3, d),
        "down": [_conv_init(rng, s, s, 3, d) for _ in range(cfg.n_down)],
        "expand": _conv_init(rng, c, s, 3, d),
        "dgcb": [_dgcb_init(rng, c, cfg.dgcb_dilations, d) for _ in range(cfg.dgcb_blocks)],
    }


def _mixer_init(rng, cfg: ModelConfig):
    bc = cfg.block_config
    if cfg.scan_strategy == "four_dir":
        return [mamba.init_mamba_block(bc, rng) for _ in range(4)]
    if cfg.scan_strategy == "triplane":
        n = 6 if cfg.triplane_bidirectional else 3
        return {"planes": [mamba.init_mamba_block(bc, rng) for _ in range(n)],
                "merge": [mamba.init_fusion_mamba(bc.d_model, bc.d_state, rng)
                          for _ in range(2)]}
    return {"planes": [mamba.init_mamba_block(bc, rng) for _ in range(2)],
            "merge": [mamba.init_fusion_mamba(bc.d_model, bc.d_state, rng)]}


def _cmca_init(rng, C: int, r: int) -> dict:
    h = C // r
    return {"w1": mamba._uniform(rng, (C, h), math.sqrt(6.0 / C)),
            "w2": mamba._uniform(rng, (h, C), math.sqrt(6.0 / h))}


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fresh parameters for ``cfg``; a pure function of ``(cfg, seed)``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {
        "enc": [_encoder_init(rng, cfg) for _ in range(2)],
        "latent": [{"mix": [_mixer_init(rng, cfg) for _ in range(2)],
                    "fuse": mamba.init_fusion_mamba(cfg.latent_channels, cfg.mamba_d_state, rng)}
                   for _ in range(cfg.k_mamba)],
    }
    if cfg.cmca_enabled:
        params["cmca"] = [_cmca_init(rng, cfg.latent_channels, cfg.cmca_reduction)
                          for _ in range(2)]
    chans = decoder_channels(cfg)
    params["dec"] = {
        "layers": [_conv_init(rng, chans[i + 1], chans[i], 3, cfg.dims)
                   for i in range(cfg.decoder_layers)],
        "up": [_conv_init(rng, chans[-1], chans[-1], 3, cfg.dims) for _ in range(cfg.n_down)],
        "out": _conv_init(rng, 1, chans[-1], 1, cfg.dims),
    }
    return params


# ---------------------------------------------------------------------------
# parameter-tree utilities


def flatten_params(params, prefix: str = "") -> dict:
    """Dotted-name view of a parameter tree, in deterministic traversal order."""
    out = {}
    if isinstance(params, Tensor):
        out[prefix] = params
    elif isinstance(params, dict):
        for k, v in params.items():
            out.update(flatten_params(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(params, (list, tuple)):
        for i, v in enumerate(params):
            out.update(flatten_params(v, f"{prefix}.{i}" if prefix else str(i)))
    elif params is not None:
        raise TypeError(f"unexpected parameter leaf {type(params).__name__} at {prefix!r}")
    return out


def param_count(params) -> int:
    if not params:
        return 0
    return int(sum(t.size for t in flatten_params(params).values()))


def map_params(fn, params):
    """Rebuild the tree with ``fn`` applied to every tensor leaf."""
    if isinstance(params, Tensor):
        return fn(params)
    if isinstance(params, dict):
        return {k: map_params(fn, v) for k, v in params.items()}
    if isinstance(params, (list, tuple)):
        return [map_params(fn, v) for v in params]
    return params


def zero_params(params):
    return map_params(lambda t: Tensor(np.zeros_like(t.data), requires_grad=True), params)


def swap_modalities(params: dict) -> dict:
    """Exchange every modality-specific parameter set (encoders, mixers, gates, CMCA)."""
    out = dict(params)
    out["enc"] = [params["enc"][1], params["enc"][0]]
    out["latent"] = []
    for blk in params["latent"]:
        fuse = dict(blk["fuse"])
        fuse["a"], fuse["b"] = blk["fuse"]["b"], blk["fuse"]["a"]
        out["latent"].append({"mix": [blk["mix"][1], blk["mix"][0]], "fuse": fuse})
    if "cmca" in params:
        out["cmca"] = [params["cmca"][1], params["cmca"][0]]
    return out


# ---------------------------------------------------------------------------
# forward pieces


def _conv(x: Tensor, p: dict, *, stride: int = 1, dilation: int = 1) -> Tensor:
    return nn.conv(x, p["w"], p.get("b"), stride=stride, dilation=dilation)


def _lrelu(x: Tensor) -> Tensor:
    return T.leaky_relu(x, LRELU_SLOPE)


def dgcb_forward(x: Tensor, p: dict, dilations) -> Tensor:
    """Dilated gated convolution block with a residual path."""
    if len(p["branches"]) != len(dilations):
        raise ConfigError(f"{len(p['branches'])} branch kernels for {len(dilations)} dilations")
    g = _conv(x, p["gate3"]) * _conv(x, p["gate1"])
    pyr = T.concat([_conv(g, bp, dilation=r) for bp, r in zip(p["branches"], dilations)], axis=1)
    return x + _lrelu(_conv(pyr, p["merge"]))


def _check_input(x: Tensor, cfg: ModelConfig) -> None:
    if x.ndim != cfg.dims + 2 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected [B, {cfg.in_channels}, {cfg.dims} spatial dims], got {x.shape}")
    if cfg.dims == 3 and any(s % cfg.downsample_3d for s in x.shape[2:]):
        raise ShapeError(f"3D spatial size {x.shape[2:]} must be divisible by "
                         f"downsample_3d={cfg.downsample_3d}")
    if T._state["checked"] and (x.data.min() < 0 or x.data.max() > 1):
        raise ValidationError("input intensities must lie in [0, 1]")


def encode(x: Tensor, modality: int, params: dict, cfg: ModelConfig) -> Tensor:
    x = T.as_tensor(x)
    _check_input(x, cfg)
    p = params["enc"][modality]
    h = _lrelu(_conv(x, p["stem"]))
    for dp in p["down"]:
        h = _lrelu(_conv(h, dp, stride=2))
    h = _lrelu(_conv(h, p["expand"]))
    for bp in p["dgcb"]:
        h = dgcb_forward(h, bp, cfg.dgcb_dilations)
    return h


def _mix(f: Tensor, p, cfg: ModelConfig) -> Tensor:
    if cfg.scan_strategy == "four_dir":
        return mamba.vss_2d(f, p)
    if cfg.scan_strategy == "triplane":
        return mamba.triplane_3d(f, p, cfg.triplane_bidirectional)
    return mamba.planar_3d(f, p)


def latent_fuse(f1: Tensor, f2: Tensor, params: dict, cfg: ModelConfig):
    """K rounds of per-modality directional mixing followed by a cross-modal merge.

    The merge update of every round is added back to both streams, so each
    round's fusion block shapes what the next round sees.  Returns
    ``(fused, f1_out, f2_out)`` with ``fused = (f1 + f2) / 2 + update`` of the
    final round.
    """
    if f1.shape != f2.shape:
        raise ShapeError(f"latent streams differ in shape: {f1.shape} vs {f2.shape}")
    nsp = cfg.dims
    spatial = f1.shape[-nsp:]
    fused = None
    for blk in params["latent"]:
        f1 = _mix(f1, blk["mix"][0], cfg)
        f2 = _mix(f2, blk["mix"][1], cfg)
        t1, t2 = mamba.grid_to_tokens(f1, nsp), mamba.grid_to_tokens(f2, nsp)
        upd = mamba.tokens_to_grid(mamba.fusion_delta(t1, t2, blk["fuse"]), spatial)
        fused = (f1 + f2) * 0.5 + upd
        f1, f2 = f1 + upd, f2 + upd
    return fused, f1, f2


def cmca(ref: Tensor, query: Tensor, p: dict) -> Tensor:
    """Re-weight ``query`` channels by pooled descriptors of ``ref``."""
    if ref.shape != query.shape:
        raise ShapeError(f"cmca: {ref.shape} vs {query.shape}")

    def mlp(v):
        return T.matmul(T.relu(T.matmul(v, p["w1"])), p["w2"])

    w = T.sigmoid(mlp(nn.global_pool(ref, "avg")) + mlp(nn.global_pool(ref, "max")))
    return query * T.reshape(w, w.shape + (1,) * (query.ndim - 2))


def decode(fused: Tensor, f1: Tensor, f2: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    e = fused
    if cfg.cmca_enabled:
        c1 = cmca(f1, f2, params["cmca"][0])
        c2 = cmca(f2, f1, params["cmca"][1])
        e = fused + (c1 + c2)
    p = params["dec"]
    for lp in p["layers"]:
        e = _lrelu(_conv(e, lp))
    for up in p["up"]:
        e = _lrelu(_conv(nn.upsample_nearest(e, 2), up))
    return T.sigmoid(_conv(e, p["out"]))


def forward_fuse(x1, x2, params: dict, cfg: ModelConfig) -> Tensor:
    x1, x2 = T.as_tensor(x1), T.as_tensor(x2)
    if x1.shape != x2.shape:
        raise ShapeError(f"modalities differ in shape: {x1.shape} vs {x2.shape}")
    fused, f1, f2 = latent_fuse(encode(x1, 0, params, cfg), encode(x2, 1, params, cfg),
                                params, cfg)
    return decode(fused, f1, f2, params, cfg)

