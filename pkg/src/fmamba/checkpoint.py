"""FMCK1 checkpoint files.

Layout (all integers little-endian)::

    b"FMCK1"  u16 version
    u32 n + n bytes    config text (canonical ``key = value`` form)
    u32 n + n bytes    JSON metadata (step, RNG state, log, extra)
    u32 count, then per tensor: u16 n + n bytes name, FMT1 blob

Tensor names are the dotted parameter names, plus ``adam.m.<name>`` and
``adam.v.<name>`` for the optimiser moments.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

from . import config as config_mod
from .config import TrainConfig
from .errors import ValidationError
from .tensor import read_fmt1, write_fmt1

MAGIC = b"FMCK1"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict  # name -> numpy array
    meta: dict = field(default_factory=dict)


def _blob(fh, data: bytes) -> None:
    fh.write(struct.pack("<I", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValidationError("truncated checkpoint")
    return buf


def _read_blob(fh) -> bytes:
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    return _read_exact(fh, n)


def dumps(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<H", VERSION))
    _blob(fh, config_mod.dumps(ckpt.config).encode("utf-8"))
    _blob(fh, json.dumps(ckpt.meta, sort_keys=True).encode("utf-8"))
    fh.write(struct.pack("<I", len(ckpt.tensors)))
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        write_fmt1(fh, arr)
    return fh.getvalue()


def loads(data: bytes) -> Checkpoint:
    fh = io.BytesIO(data)
    if _read_exact(fh, len(MAGIC)) != MAGIC:
        raise ValidationError("not an FMCK1 checkpoint")
    (version,) = struct.unpack("<H", _read_exact(fh, 2))
    if version != VERSION:
        raise ValidationError(f"unsupported checkpoint version {version}")
    cfg = config_mod.loads(_read_blob(fh).decode("utf-8"))
    meta = json.loads(_read_blob(fh).decode("utf-8"))
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, n).decode("utf-8")
        try:
            tensors[name] = read_fmt1(fh).data
        except (ValueError, struct.error) as e:
            raise ValidationError(f"tensor {name!r}: {e}") from None
    return Checkpoint(cfg, tensors, meta)


def save(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
