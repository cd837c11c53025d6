"""Adam training loop with step logs, NaN abort, checkpoints and exact resume."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_mod
from . import data as data_mod
from . import losses
from . import tensor as T
from .config import TrainConfig
from .errors import NumericalAbort, ValidationError
from .model import ModelConfig, flatten_params, forward_fuse, init_params

log = logging.getLogger(__name__)


@dataclass
class StepRecord:
    step: int
    total: float
    pixel: float
    grad: float
    ssim: float
    ms: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: StepRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise ValidationError(f"step {rec.step} does not follow {self.records[-1].step}")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def totals(self) -> list:
        return [r.total for r in self.records]

    def to_json(self) -> list:
        return [[r.step, r.total, r.pixel, r.grad, r.ssim, r.ms] for r in self.records]

    @classmethod
    def from_json(cls, rows) -> "TrainLog":
        return cls([StepRecord(int(r[0]), *map(float, r[1:])) for r in rows])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "total", "pixel", "grad", "ssim", "ms"])
            for r in self.records:
                w.writerow([r.step, repr(r.total), repr(r.pixel), repr(r.grad), repr(r.ssim),
                            f"{r.ms:.3f}"])


@dataclass
class AdamState:
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        if g.shape != p.shape:
            raise ValidationError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# data


def load_training_pairs(cfg: TrainConfig) -> list:
    if cfg.manifest is None:
        return [data_mod.synth_pair_generator(cfg.seed * 1000 + i, cfg.model.dims, cfg.synth_size)
                for i in range(cfg.synth_count)]
    entries = data_mod.read_manifest(cfg.manifest)
    split = data_mod.split_dataset([e.id for e in entries], (cfg.split_val, cfg.split_test),
                                   cfg.seed)
    keep = set(split.train)
    pairs = [data_mod.load_pair(e) for e in entries if e.id in keep]
    if not pairs:
        raise ValidationError("training split is empty")
    for p in pairs:
        if p.a.ndim - 1 != cfg.model.dims:
            raise ValidationError(f"pair {p.id!r} has shape {p.a.shape}, model expects "
                                  f"{cfg.model.dims} spatial dims")
    return pairs


def batch_arrays(pairs: list, idx, dtype) -> tuple:
    x1 = np.stack([pairs[i].a for i in idx]).astype(dtype)
    x2 = np.stack([pairs[i].b for i in idx]).astype(dtype)
    return x1, x2


def _batch_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))


def sample_indices(rng: np.random.Generator, n: int, batch: int) -> np.ndarray:
    if batch <= n:
        return np.sort(rng.permutation(n)[:batch])
    return rng.integers(0, n, size=batch)


# ---------------------------------------------------------------------------
# one step


def train_step(params: dict, named: dict, state: AdamState, x1, x2, model_cfg: ModelConfig,
               weights: losses.LossWeights, lr: float, betas, eps: float, step: int) -> dict:
    """Forward, loss, backward and Adam update.  Returns the loss components as floats."""
    xhat = forward_fuse(x1, x2, params, model_cfg)
    parts = {}
    total = losses.total_loss(xhat, x1, x2, weights, model_cfg.dims, components=parts)
    comps = {"total": float(total.data)}
    comps.update({k: float(v.data) for k, v in parts.items()})
    if not all(math.isfinite(v) for v in comps.values()):
        raise NumericalAbort(f"non-finite loss at step {step}: {comps}", step=step,
                             components=comps)
    names = list(named)
    grads = T.gradients(total, [named[n] for n in names])
    gmap = {}
    for n, g in zip(names, grads):
        if not np.all(np.isfinite(g.data)):
            raise NumericalAbort(f"non-finite gradient for {n} at step {step}", step=step,
                                 components=comps)
        gmap[n] = g.data
    adam_step(named, gmap, state, lr, betas, eps)
    return comps


# ---------------------------------------------------------------------------
# loop


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Learning rate for 1-based ``step``; depends only on the step, so resume is exact."""
    if cfg.lr_schedule == "constant" or cfg.steps == 1:
        return cfg.lr
    frac = (step - 1) / (cfg.steps - 1)
    lo = cfg.lr * cfg.lr_min_ratio
    return lo + 0.5 * (cfg.lr - lo) * (1.0 + math.cos(math.pi * frac))


@dataclass
class TrainResult:
    params: dict
    state: AdamState
    log: TrainLog
    checkpoint: ckpt_mod.Checkpoint


def make_checkpoint(cfg: TrainConfig, named: dict, state: AdamState,
                    rng: np.random.Generator, train_log: TrainLog, step: int) -> ckpt_mod.Checkpoint:
    tensors = {n: t.data.copy() for n, t in named.items()}
    for n in named:
        if n in state.m:
            tensors[f"adam.m.{n}"] = state.m[n].copy()
            tensors[f"adam.v.{n}"] = state.v[n].copy()
    meta = {"step": step, "adam_t": state.t, "rng": rng.bit_generator.state,
            "log": train_log.to_json()}
    return ckpt_mod.Checkpoint(cfg, tensors, meta)


def params_from_tensors(model_cfg: ModelConfig, tensors: dict, dtype=None) -> dict:
    """Rebuild a parameter tree for ``model_cfg`` holding the stored values."""
    params = init_params(model_cfg, 0)
    for name, t in flatten_params(params).items():
        if name not in tensors:
            raise ValidationError(f"checkpoint lacks parameter {name}")
        arr = np.array(tensors[name], dtype=dtype or tensors[name].dtype)
        if arr.shape != t.shape:
            raise ValidationError(f"{name}: stored shape {arr.shape}, model expects {t.shape}")
        t.data = arr
    return params


def train(cfg: TrainConfig, pairs: list | None = None,
          resume: ckpt_mod.Checkpoint | None = None, progress=None) -> TrainResult:
    """Run ``cfg.steps`` optimiser steps (continuing from ``resume`` if given).

    ``progress`` is called with each :class:`StepRecord`.
    """
    with T.default_dtype(cfg.dtype):
        if pairs is None:
            pairs = load_training_pairs(cfg)
        rng = _batch_rng(cfg.seed)
        state = AdamState()
        train_log = TrainLog()
        start = 0
        if resume is None:
            params = init_params(cfg.model, cfg.seed)
        else:
            if resume.config.model != cfg.model:
                raise ValidationError("checkpoint model configuration differs from the run's")
            params = params_from_tensors(cfg.model, resume.tensors, np.dtype(cfg.dtype))
            start = int(resume.meta["step"])
            rng.bit_generator.state = resume.meta["rng"]
            state.t = int(resume.meta["adam_t"])
            for n in flatten_params(params):
                if f"adam.m.{n}" in resume.tensors:
                    state.m[n] = np.array(resume.tensors[f"adam.m.{n}"])
                    state.v[n] = np.array(resume.tensors[f"adam.v.{n}"])
            train_log = TrainLog.from_json(resume.meta.get("log", []))
        named = flatten_params(params)
        betas = (cfg.beta1, cfg.beta2)
        dtype = np.dtype(cfg.dtype)
        for step in range(start + 1, cfg.steps + 1):
            t0 = time.perf_counter()
            idx = sample_indices(rng, len(pairs), cfg.batch_size)
            x1, x2 = batch_arrays(pairs, idx, dtype)
            comps = train_step(params, named, state, T.Tensor(x1), T.Tensor(x2), cfg.model,
                               cfg.loss, lr_at(cfg, step), betas, cfg.eps, step)
            rec = StepRecord(step, comps["total"], comps["pixel"], comps["grad"], comps["ssim"],
                             (time.perf_counter() - t0) * 1e3)
            train_log.append(rec)
            if progress is not None:
                progress(rec)
            if (cfg.checkpoint_path and cfg.checkpoint_every
                    and step % cfg.checkpoint_every == 0 and step < cfg.steps):
                ckpt_mod.save(cfg.checkpoint_path,
                              make_checkpoint(cfg, named, state, rng, train_log, step))
        final = make_checkpoint(cfg, named, state, rng, train_log, max(start, cfg.steps))
        if cfg.checkpoint_path:
            ckpt_mod.save(cfg.checkpoint_path, final)
    return TrainResult(params, state, train_log, final)


def fuse_arrays(params: dict, model_cfg: ModelConfig, a: np.ndarray, b: np.ndarray,
                dtype=None) -> np.ndarray:
    """Fuse one pair ``[1, *S]`` without recording gradients; returns ``[1, *S]``."""
    dtype = np.dtype(dtype or next(iter(flatten_params(params).values())).dtype)
    with T.no_grad(), T.default_dtype(dtype):
        out = forward_fuse(T.Tensor(a[None].astype(dtype)), T.Tensor(b[None].astype(dtype)),
                           params, model_cfg)
    return np.asarray(out.data[0], dtype=np.float64)
