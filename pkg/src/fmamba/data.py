"""Image/volume ingestion, preprocessing, synthetic pairs and dataset splits.

Images are handled as plain float64 numpy arrays with a leading channel
axis: ``[1, H, W]`` for 2D, ``[1, D, H, W]`` for volumes.
"""
from __future__ import annotations

import math
import os
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError

# full-range BT.601, rows give Y, Cb, Cr (before the +0.5 chroma offset)
_YCBCR = np.array([
    [0.299, 0.587, 0.114],
    [-0.299 / 1.772, -0.587 / 1.772, 0.886 / 1.772],
    [0.701 / 1.402, -0.587 / 1.402, -0.114 / 1.402],
])
_YCBCR_INV = np.linalg.inv(_YCBCR)


@dataclass
class ImagePair:
    id: str
    a: np.ndarray
    b: np.ndarray
    chroma: tuple | None = None  # (cb, cr) of the colour modality, if any

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise ShapeError(f"pair {self.id!r}: modalities differ {self.a.shape} vs {self.b.shape}")


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int


@dataclass
class ManifestEntry:
    id: str
    path_a: Path
    path_b: Path
    mask: Path | None = None


# ---------------------------------------------------------------------------
# colour and intensity


def rgb_to_ycbcr(rgb):
    rgb = np.asarray(getattr(rgb, "data", rgb), dtype=np.float64)
    if rgb.ndim < 1 or rgb.shape[0] != 3:
        raise ShapeError(f"rgb_to_ycbcr expects [3, ...], got {rgb.shape}")
    ycc = np.tensordot(_YCBCR, rgb, axes=([1], [0]))
    return ycc[0:1], ycc[1:2] + 0.5, ycc[2:3] + 0.5


def ycbcr_to_rgb(y, cb, cr) -> np.ndarray:
    ycc = np.concatenate([np.asarray(y, dtype=np.float64),
                          np.asarray(cb, dtype=np.float64) - 0.5,
                          np.asarray(cr, dtype=np.float64) - 0.5], axis=0)
    return np.clip(np.tensordot(_YCBCR_INV, ycc, axes=([1], [0])), 0.0, 1.0)


def normalize01(x) -> np.ndarray:
    """Min-max scale to ``[0, 1]``; a constant input maps to zeros."""
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def apply_roi_mask(x, mask) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    mask = np.asarray(getattr(mask, "data", mask), dtype=np.float64)
    if mask.shape[-x.ndim + 1:] != x.shape[-x.ndim + 1:] and mask.shape != x.shape:
        raise ShapeError(f"mask {mask.shape} does not match image {x.shape}")
    if T._state["checked"] and not np.all((mask == 0) | (mask == 1)):
        warnings.warn("ROI mask is not binary", stacklevel=2)
    return x * mask


# ---------------------------------------------------------------------------
# volumes


def _resample_axis(v: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = v.shape[axis]
    if n_in == n_out:
        return v
    if n_out == 1 or n_in == 1:
        idx = np.zeros(n_out, dtype=int)
        return np.take(v, idx, axis=axis)
    pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    shape = [1] * v.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return np.take(v, lo, axis=axis) * (1.0 - frac) + np.take(v, lo + 1, axis=axis) * frac


def resample_trilinear(v, out_shape) -> np.ndarray:
    """Separable linear interpolation of the trailing axes (corner-aligned grid)."""
    v = np.asarray(getattr(v, "data", v), dtype=np.float64)
    k = len(out_shape)
    for i, n in enumerate(out_shape):
        v = _resample_axis(v, v.ndim - k + i, int(n))
    return v


def crop_resample_volume(v, crop=(192, 192), out_shape=(128, 128, 128)) -> np.ndarray:
    """Centre-crop the first two spatial axes of ``v[1, X, Y, Z]`` to ``crop``, then resample.

    The default geometry maps a 240x240x155 scan to 128^3.
    """
    v = np.asarray(getattr(v, "data", v), dtype=np.float64)
    if v.ndim != 4:
        raise ShapeError(f"expected [C, X, Y, Z], got {v.shape}")
    sl = [slice(None)] * 4
    for i, c in enumerate(crop):
        n = v.shape[1 + i]
        if n < c:
            raise ShapeError(f"axis {1 + i} has {n} voxels, smaller than crop {c}")
        start = (n - c) // 2
        sl[1 + i] = slice(start, start + c)
    return resample_trilinear(v[tuple(sl)], out_shape)


def axial_slices(v, min_nonzero: float = 0.10) -> list:
    """Slices of ``v[1, D, H, W]`` along D whose non-zero fraction is at least ``min_nonzero``."""
    v = np.asarray(getattr(v, "data", v))
    if v.ndim != 4:
        raise ShapeError(f"expected [1, D, H, W], got {v.shape}")
    H, W = v.shape[2:]
    out = []
    for d in range(v.shape[1]):
        s = v[:, d]
        if np.count_nonzero(s > 0) / (H * W) >= min_nonzero:
            out.append(np.array(s))
    return out


# ---------------------------------------------------------------------------
# synthetic pairs


def _smooth_noise(rng, shape, scale: float) -> np.ndarray:
    """Gaussian-filtered white noise (via FFT), rescaled to unit std."""
    noise = rng.standard_normal(shape)
    f = np.fft.rfftn(noise)
    freqs = np.meshgrid(*[np.fft.fftfreq(n) for n in shape[:-1]],
                        np.fft.rfftfreq(shape[-1]), indexing="ij")
    r2 = sum(q * q for q in freqs)
    out = np.fft.irfftn(f * np.exp(-r2 * (2 * math.pi * scale) ** 2 / 2), s=shape,
                        axes=tuple(range(len(shape))))
    sd = out.std()
    return out / sd if sd > 0 else out


def _soft_inside(coords, center, radii, rot, sharp: float) -> np.ndarray:
    rel = np.stack([c - m for c, m in zip(coords, center)], axis=-1) @ rot
    q = np.sqrt(np.sum((rel / radii) ** 2, axis=-1))
    return 0.5 * np.tanh((1.0 - q) * sharp) + 0.5


def _random_rotation(rng, dims: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dims, dims)))
    return q * np.sign(np.diag(r))


def synth_pair_generator(seed: int, dims: int = 2, size: int = 64, pair_id: str | None = None,
                         n_structures: tuple = (4, 8)) -> ImagePair:
    """Deterministic co-registered pair sharing geometry but not contrast.

    Modality ``a`` is "anatomical": a bright head outline, structures with
    graded intensities and fine texture.  Modality ``b`` is "functional":
    weak background, some structures inverted or silenced, plus smooth
    hot spots that ``a`` does not show.
    """
    if dims not in (2, 3):
        raise ValidationError(f"dims must be 2 or 3, got {dims}")
    rng = np.random.Generator(np.random.PCG64(seed))
    shape = (size,) * dims
    axis = np.linspace(-1.0, 1.0, size)
    coords = np.meshgrid(*([axis] * dims), indexing="ij")
    sharp = size / 6.0

    head = _soft_inside(coords, rng.uniform(-0.05, 0.05, dims), rng.uniform(0.8, 0.95, dims),
                        _random_rotation(rng, dims), sharp)
    a = 0.35 * head
    b = 0.08 * head
    for _ in range(int(rng.integers(n_structures[0], n_structures[1] + 1))):
        m = _soft_inside(coords, rng.uniform(-0.5, 0.5, dims), rng.uniform(0.1, 0.35, dims),
                         _random_rotation(rng, dims), sharp) * head
        va = rng.uniform(0.2, 0.65)
        vb = rng.choice([va, 0.9 - va, 0.0])
        a += va * m
        b += vb * m
    for _ in range(int(rng.integers(1, 4))):
        hot = _soft_inside(coords, rng.uniform(-0.5, 0.5, dims), rng.uniform(0.05, 0.15, dims),
                           np.eye(dims), sharp / 2) * head
        b += rng.uniform(0.3, 0.6) * hot
    a += 0.04 * _smooth_noise(rng, shape, 0.6) * head
    b += 0.05 * _smooth_noise(rng, shape, 3.0) * head
    a = normalize01(np.clip(a, 0.0, None))[None]
    b = normalize01(np.clip(b, 0.0, None))[None]
    return ImagePair(pair_id or f"synth{seed:05d}", a, b)


def split_dataset(ids, counts, seed: int) -> DatasetSplit:
    """Shuffle ``ids`` by ``seed``; ``counts = (n_val, n_test)``, the rest is training."""
    ids = list(ids)
    n_val, n_test = (int(c) for c in counts)
    if n_val < 0 or n_test < 0:
        raise ValidationError("split counts must be non-negative")
    if n_val + n_test > len(ids):
        raise ValidationError(f"cannot hold out {n_val}+{n_test} of {len(ids)} ids")
    order = np.random.Generator(np.random.PCG64(seed)).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(train=shuffled[n_val + n_test:], val=shuffled[:n_val],
                        test=shuffled[n_val:n_val + n_test], seed=seed)


# ---------------------------------------------------------------------------
# file formats


def _pnm_tokens(fh, n: int) -> list:
    toks = []
    while len(toks) < n:
        line = fh.readline()
        if not line:
            raise ValidationError("truncated PNM header")
        line = line.split(b"#", 1)[0]
        toks += line.split()
    return toks


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6), 8- or 16-bit, as floats in ``[0, 1]``.

    Returns ``[1, H, W]`` for PGM and ``[3, H, W]`` for PPM.
    """
    with open(path, "rb") as fh:
        magic, w, h, maxval = _pnm_tokens(fh, 4)[:4]
        if magic not in (b"P5", b"P6"):
            raise ValidationError(f"{path}: unsupported PNM type {magic!r}")
        w, h, maxval = int(w), int(h), int(maxval)
        if not 0 < maxval < 65536:
            raise ValidationError(f"{path}: bad maxval {maxval}")
        ch = 1 if magic == b"P5" else 3
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = np.frombuffer(fh.read(w * h * ch * dt.itemsize), dtype=dt)
    if raw.size != w * h * ch:
        raise ValidationError(f"{path}: truncated pixel data")
    img = raw.reshape(h, w, ch).transpose(2, 0, 1).astype(np.float64)
    return img / maxval


def write_pnm(path, img, bits: int = 8) -> None:
    """Write ``[1, H, W]`` as PGM or ``[3, H, W]`` as PPM with values clipped to ``[0, 1]``."""
    img = np.asarray(getattr(img, "data", img), dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise ShapeError(f"write_pnm expects [1|3, H, W], got {img.shape}")
    if bits not in (8, 16):
        raise ValidationError("bits must be 8 or 16")
    maxval = 255 if bits == 8 else 65535
    q = np.round(np.clip(img, 0.0, 1.0) * maxval)
    q = q.astype(">u2" if bits == 16 else "u1").transpose(1, 2, 0)
    magic = b"P5" if img.shape[0] == 1 else b"P6"
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n%d\n" % (img.shape[2], img.shape[1], maxval))
        fh.write(q.tobytes())


def read_manifest(path) -> list:
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for ln, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise ValidationError(f"{path}:{ln}: expected 3 or 4 tab-separated fields")
            mask = root / parts[3] if len(parts) == 4 and parts[3] else None
            entries.append(ManifestEntry(parts[0], root / parts[1], root / parts[2], mask))
    return entries


def write_manifest(path, entries) -> None:
    root = Path(path).parent
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fields = [e.id, os.path.relpath(e.path_a, root), os.path.relpath(e.path_b, root)]
            if e.mask is not None:
                fields.append(os.path.relpath(e.mask, root))
            fh.write("\t".join(fields) + "\n")


def load_image(path):
    """Returns ``(luma, chroma or None)``; FMT1 volumes are min-max normalised."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".ppm", ".pnm"):
        img = read_pnm(path)
        if img.shape[0] == 3:
            y, cb, cr = rgb_to_ycbcr(img)
            return y, (cb, cr)
        return img, None
    arr = normalize01(T.load_tensor(path).data)
    if arr.ndim in (2, 3) and arr.shape[0] != 1:
        arr = arr[None]  # stored without the channel axis
    return arr, None


def load_pair(entry: ManifestEntry) -> ImagePair:
    a, ca = load_image(entry.path_a)
    b, cb = load_image(entry.path_b)
    if a.shape != b.shape:
        raise ShapeError(f"pair {entry.id!r}: {a.shape} vs {b.shape}")
    if entry.mask is not None:
        mask, _ = load_image(entry.mask)
        mask = (mask > 0).astype(np.float64)
        a, b = apply_roi_mask(a, mask), apply_roi_mask(b, mask)
    return ImagePair(entry.id, a, b, ca or cb)


def pair_dims(pair: ImagePair) -> int:
    return pair.a.ndim - 1


def iter_pairs(entries) -> list:
    return [load_pair(e) for e in entries]

