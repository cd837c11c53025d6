"""Experiment configuration and its flat ``key = value`` text form.

Keys are dotted (``model.latent_channels``, ``optim.lr``, ``train.steps``)
and written in sorted order, so two equal configs always serialise to the
same bytes.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    lr_schedule: str = "constant"  # or "cosine": decay to lr_min_ratio * lr at the last step
    lr_min_ratio: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    checkpoint_path: str | None = None
    manifest: str | None = None  # None trains on synthetic pairs
    synth_count: int = 8
    synth_size: int = 64
    split_val: int = 0
    split_test: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if not 0 <= self.lr_min_ratio <= 1:
            raise ConfigError("lr_min_ratio must lie in [0, 1]")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigError("steps and batch_size must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.synth_count < 1 or self.synth_size < 1:
            raise ConfigError("synth_count and synth_size must be >= 1")


def default_config(dims: int = 2) -> TrainConfig:
    if dims == 2:
        return TrainConfig()
    return TrainConfig(model=ModelConfig(dims=3), batch_size=1, synth_size=32)


# ---------------------------------------------------------------------------
# text form

_SECTIONS = {"model": ModelConfig, "loss": LossWeights}
_ALIAS = {"optim": ("lr", "lr_schedule", "lr_min_ratio", "beta1", "beta2", "eps")}


def _key_for(name: str) -> str:
    for sec, names in _ALIAS.items():
        if name in names:
            return f"{sec}.{name}"
    return f"train.{name}"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return None if text.lower() == "none" else text


def to_items(cfg: TrainConfig) -> dict:
    items = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sf in dataclasses.fields(v):
                items[f"{f.name}.{sf.name}"] = _fmt(getattr(v, sf.name))
        else:
            items[_key_for(f.name)] = _fmt(v)
    return items


def dumps(cfg: TrainConfig) -> str:
    items = to_items(cfg)
    return "".join(f"{k} = {items[k]}\n" for k in sorted(items))


def _defaults():
    out = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in _SECTIONS:
            sub = _SECTIONS[f.name]
            for sf in dataclasses.fields(sub):
                out[f"{f.name}.{sf.name}"] = sf.default
        else:
            out[_key_for(f.name)] = f.default
    return out


def loads(text: str) -> TrainConfig:
    """Parse the text form; unspecified keys keep their defaults, unknown keys are errors."""
    defaults = _defaults()
    given = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in defaults:
            raise ConfigError(f"line {ln}: unknown key {k!r}")
        if k in given:
            raise ConfigError(f"line {ln}: duplicate key {k!r}")
        like = defaults[k]
        if like is None:
            like = ""
        given[k] = _parse(v, like, k)
    model = {k.split(".", 1)[1]: v for k, v in given.items() if k.startswith("model.")}
    loss = {k.split(".", 1)[1]: v for k, v in given.items() if k.startswith("loss.")}
    rest = {k.split(".", 1)[1]: v for k, v in given.items()
            if not k.startswith(("model.", "loss."))}
    try:
        return TrainConfig(model=ModelConfig(**model), loss=LossWeights(**loss), **rest)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def load(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


def save(path, cfg: TrainConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps(cfg))
