"""Fusion-quality metrics on plain numpy arrays, plus the CSV report format.

All functions accept arrays (or tensors) whose trailing ``dims`` axes are
spatial; leading axes are treated as extra batch/channel positions.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, ValidationError
from .losses import SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW, gaussian_window

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
METRICS_2D = ("psnr", "ssim", "fmi", "fsim", "en")
METRICS_3D = ("psnr", "ms_ssim", "en")


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _same(x, y):
    x, y = _arr(x), _arr(y)
    if x.shape != y.shape:
        raise ShapeError(f"metric inputs differ in shape: {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the inputs are identical."""
    x, y = _same(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _blur(a: np.ndarray, k: np.ndarray, dims: int) -> np.ndarray:
    for ax in range(a.ndim - dims, a.ndim):
        a = sliding_window_view(a, k.size, axis=ax) @ k
    return a


def _ssim_maps(x, y, dims, window=SSIM_WINDOW, sigma=SSIM_SIGMA):
    if x.ndim < dims or min(x.shape[-dims:]) < window:
        raise ShapeError(f"ssim needs every spatial side >= {window}, got {x.shape[-dims:]}")
    k = gaussian_window(window, sigma)
    mx, my = _blur(x, k, dims), _blur(y, k, dims)
    sxx = _blur(x * x, k, dims) - mx * mx
    syy = _blur(y * y, k, dims) - my * my
    sxy = _blur(x * y, k, dims) - mx * my
    lum = (mx * my * 2.0 + SSIM_C1) / (mx * mx + my * my + SSIM_C1)
    cs = (sxy * 2.0 + SSIM_C2) / (sxx + syy + SSIM_C2)
    return lum, cs


def ssim(x, y, dims: int = 2) -> float:
    x, y = _same(x, y)
    lum, cs = _ssim_maps(x, y, dims)
    return float(np.mean(lum * cs))


def _pool2(a: np.ndarray, dims: int) -> np.ndarray:
    lead = a.shape[:-dims]
    sp = [s // 2 for s in a.shape[-dims:]]
    a = a[(...,) + tuple(slice(0, 2 * s) for s in sp)]
    shape = list(lead)
    for s in sp:
        shape += [s, 2]
    first = len(lead)
    return a.reshape(shape).mean(axis=tuple(first + 1 + 2 * i for i in range(dims)))


def ms_ssim(x, y, dims: int = 2, scales: int = 5, weights=MS_SSIM_WEIGHTS,
            auto_reduce: bool = False) -> float:
    """Multi-scale SSIM: contrast-structure at every scale, luminance at the coarsest.

    Negative contrast-structure means are clipped to zero before the weighted
    product.  With fewer than five scales the leading weights are renormalised.
    """
    x, y = _same(x, y)
    need = lambda s: 2 ** (s - 1) * SSIM_WINDOW  # noqa: E731
    smallest = min(x.shape[-dims:])
    if smallest < need(scales):
        if not auto_reduce:
            raise ShapeError(f"ms_ssim with {scales} scales needs spatial sides >= "
                             f"{need(scales)}, got {smallest}; pass auto_reduce=True")
        while scales > 1 and smallest < need(scales):
            scales -= 1
        if smallest < need(scales):
            raise ShapeError(f"image smaller than one {SSIM_WINDOW}-sample window")
    w = np.asarray(weights[:scales], dtype=np.float64)
    w = w / w.sum()
    vals = []
    for s in range(scales):
        lum, cs = _ssim_maps(x, y, dims)
        if s == scales - 1:
            vals.append(float(np.mean(lum * cs)))
        else:
            vals.append(float(np.mean(cs)))
            x, y = _pool2(x, dims), _pool2(y, dims)
    vals = np.maximum(np.asarray(vals), 0.0)
    return float(np.prod(vals ** w))


def entropy(x, bins: int = 256) -> float:
    """Shannon entropy (bits) of the intensity histogram over ``[0, 1]``."""
    counts, _ = np.histogram(_arr(x), bins=bins, range=(0.0, 1.0))
    return _entropy_of_counts(counts)


def _entropy_of_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    p = counts[counts > 0].astype(np.float64) / total
    return float(-np.sum(p * np.log2(p))) + 0.0


def _gradient_feature(a: np.ndarray, dims: int) -> np.ndarray:
    """Gradient magnitude without the loss's epsilon: Sobel (2D) or forward differences (3D)."""
    if dims == 2:
        p = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
        H, W = a.shape[-2:]
        cols = p[..., 0:H, :] + 2.0 * p[..., 1:H + 1, :] + p[..., 2:H + 2, :]
        gx = cols[..., 2:] - cols[..., :W]
        rows = p[..., 0:W] + 2.0 * p[..., 1:W + 1] + p[..., 2:W + 2]
        gy = rows[..., 2:, :] - rows[..., :H, :]
        return np.sqrt(gx * gx + gy * gy)
    total = np.zeros_like(a)
    for axis in range(a.ndim - 3, a.ndim):
        d = np.diff(a, axis=axis, append=np.take(a, [-1], axis=axis))
        total += d * d
    return np.sqrt(total)


def _range(a: np.ndarray):
    lo, hi = float(a.min()), float(a.max())
    return (lo, hi) if hi > lo else (lo, lo + 1.0)


def nmi(a: np.ndarray, b: np.ndarray, bins: int = 256) -> float:
    """``2 I(A;B) / (H(A) + H(B))`` from a joint histogram, each axis over its own range."""
    joint, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[_range(a), _range(b)])
    ha = _entropy_of_counts(joint.sum(axis=1))
    hb = _entropy_of_counts(joint.sum(axis=0))
    if ha == 0.0 or hb == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    hab = _entropy_of_counts(joint.ravel())
    return 2.0 * (ha + hb - hab) / (ha + hb)


def fmi(x, y, fused, dims: int = 2) -> float:
    """Mean NMI between gradient-magnitude features of ``fused`` and each source."""
    x, y = _same(x, y)
    f = _arr(fused)
    if f.shape != x.shape:
        raise ShapeError(f"fused shape {f.shape} differs from sources {x.shape}")
    gx, gy, gf = (_gradient_feature(a, dims) for a in (x, y, f))
    return 0.5 * (nmi(gf, gx) + nmi(gf, gy))


# ---------------------------------------------------------------------------
# FSIM: phase congruency (log-Gabor bank) + gradient magnitude similarity

FSIM_T1 = 0.85
FSIM_T2 = 160.0


def _freq_grid(rows: int, cols: int):
    def rng(n):
        if n % 2:
            return np.arange(-(n - 1) / 2, (n - 1) / 2 + 1) / (n - 1)
        return np.arange(-n / 2, n / 2) / n
    return np.meshgrid(rng(cols), rng(rows))


def _lowpass(rows: int, cols: int, cutoff: float, n: int) -> np.ndarray:
    x, y = _freq_grid(rows, cols)
    radius = np.sqrt(x * x + y * y)
    return np.fft.ifftshift(1.0 / (1.0 + (radius / cutoff) ** (2 * n)))


def phase_congruency(im: np.ndarray, nscale: int = 4, norient: int = 4,
                     min_wavelength: float = 6.0, mult: float = 2.0, sigma_onf: float = 0.55,
                     d_theta_on_sigma: float = 1.2, k: float = 2.0,
                     epsilon: float = 1e-4) -> np.ndarray:
    """Kovesi-style phase congruency map with a per-orientation noise threshold."""
    rows, cols = im.shape
    theta_sigma = math.pi / norient / d_theta_on_sigma
    imfft = np.fft.fft2(im)
    x, y = _freq_grid(rows, cols)
    radius = np.fft.ifftshift(np.sqrt(x * x + y * y))
    theta = np.fft.ifftshift(np.arctan2(-y, x))
    radius[0, 0] = 1.0
    sin_t, cos_t = np.sin(theta), np.cos(theta)
    lp = _lowpass(rows, cols, 0.45, 15)
    log_gabor = []
    for s in range(nscale):
        fo = 1.0 / (min_wavelength * mult ** s)
        g = np.exp(-(np.log(radius / fo)) ** 2 / (2 * math.log(sigma_onf) ** 2)) * lp
        g[0, 0] = 0.0
        log_gabor.append(g)

    energy_all = np.zeros((rows, cols))
    an_all = np.zeros((rows, cols))
    for o in range(norient):
        angl = o * math.pi / norient
        ds = sin_t * math.cos(angl) - cos_t * math.sin(angl)
        dc = cos_t * math.cos(angl) + sin_t * math.sin(angl)
        spread = np.exp(-np.abs(np.arctan2(ds, dc)) ** 2 / (2 * theta_sigma ** 2))
        sum_e = np.zeros((rows, cols))
        sum_o = np.zeros((rows, cols))
        sum_an = np.zeros((rows, cols))
        eo, ifft_filters = [], []
        em_n = 0.0
        for s in range(nscale):
            filt = log_gabor[s] * spread
            ifft_filters.append(np.real(np.fft.ifft2(filt)) * math.sqrt(rows * cols))
            resp = np.fft.ifft2(imfft * filt)
            eo.append(resp)
            sum_an += np.abs(resp)
            sum_e += resp.real
            sum_o += resp.imag
            if s == 0:
                em_n = float(np.sum(filt * filt))
        x_energy = np.sqrt(sum_e ** 2 + sum_o ** 2) + epsilon
        mean_e, mean_o = sum_e / x_energy, sum_o / x_energy
        energy = np.zeros((rows, cols))
        for resp in eo:
            e, od = resp.real, resp.imag
            energy += e * mean_e + od * mean_o - np.abs(e * mean_o - od * mean_e)

        median_e2n = float(np.median(np.abs(eo[0]) ** 2))
        noise_power = (-median_e2n / math.log(0.5)) / em_n
        est_an2 = sum(f * f for f in ifft_filters)
        est_aiaj = np.zeros((rows, cols))
        for i in range(nscale - 1):
            for j in range(i + 1, nscale):
                est_aiaj += ifft_filters[i] * ifft_filters[j]
        noise_e2 = 2 * noise_power * est_an2.sum() + 4 * noise_power * est_aiaj.sum()
        tau = math.sqrt(max(noise_e2, 0.0) / 2)
        thresh = (tau * math.sqrt(math.pi / 2) + k * math.sqrt((2 - math.pi / 2) * tau * tau)) / 1.7
        energy_all += np.maximum(energy - thresh, 0.0)
        an_all += sum_an
    with np.errstate(invalid="ignore", divide="ignore"):
        pc = np.where(an_all > 0, energy_all / an_all, 0.0)
    return pc


def _conv2_same(im: np.ndarray, kern: np.ndarray) -> np.ndarray:
    kh, kw = kern.shape
    p = np.pad(im, ((kh // 2, kh // 2), (kw // 2, kw // 2)))
    return sliding_window_view(p, kern.shape).reshape(im.shape + (-1,)) @ kern[::-1, ::-1].ravel()


def fsim(x, y) -> float:
    """Feature similarity of two 2-D images with intensities in ``[0, 1]``."""
    x, y = _same(x, y)
    x, y = np.squeeze(x), np.squeeze(y)
    if x.ndim != 2:
        raise ValidationError("fsim is defined for 2-D images only")
    if min(x.shape) < 32:
        raise ShapeError(f"fsim needs both sides >= 32, got {x.shape}")
    x, y = x * 255.0, y * 255.0
    rows, cols = x.shape
    f = max(1, round(min(rows, cols) / 256))
    if f > 1:
        avg = np.full((f, f), 1.0 / (f * f))
        x = _conv2_same(x, avg)[::f, ::f]
        y = _conv2_same(y, avg)[::f, ::f]
    pc1, pc2 = phase_congruency(x), phase_congruency(y)
    dx = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16.0
    dy = dx.T.copy()
    g1 = np.sqrt(_conv2_same(x, dx) ** 2 + _conv2_same(x, dy) ** 2)
    g2 = np.sqrt(_conv2_same(y, dx) ** 2 + _conv2_same(y, dy) ** 2)
    s_pc = (2 * pc1 * pc2 + FSIM_T1) / (pc1 * pc1 + pc2 * pc2 + FSIM_T1)
    s_g = (2 * g1 * g2 + FSIM_T2) / (g1 * g1 + g2 * g2 + FSIM_T2)
    pcm = np.maximum(pc1, pc2)
    denom = float(pcm.sum())
    if denom == 0.0:
        # featureless pair: fall back to plain gradient similarity
        return float(np.mean(s_g))
    return float(np.sum(s_g * s_pc * pcm) / denom)


# ---------------------------------------------------------------------------
# per-pair evaluation and reports


def evaluate_pair(x1, x2, fused, dims: int = 2) -> dict:
    """Metric row for one fused result; reference metrics average over both sources."""
    x1, x2 = _same(x1, x2)
    f = _arr(fused)
    if f.shape != x1.shape:
        raise ShapeError(f"fused shape {f.shape} differs from sources {x1.shape}")
    row = {"psnr": 0.5 * (psnr(f, x1) + psnr(f, x2))}
    if dims == 2:
        row["ssim"] = 0.5 * (ssim(f, x1, 2) + ssim(f, x2, 2))
        row["fmi"] = fmi(x1, x2, f, 2)
        row["fsim"] = 0.5 * (fsim(f, x1) + fsim(f, x2))
    elif dims == 3:
        row["ms_ssim"] = 0.5 * (ms_ssim(f, x1, 3, auto_reduce=True)
                                + ms_ssim(f, x2, 3, auto_reduce=True))
    else:
        raise ValidationError(f"dims must be 2 or 3, got {dims}")
    row["en"] = entropy(f)
    return row


@dataclass
class MetricReport:
    metrics: tuple
    rows: list = field(default_factory=list)  # (pair_id, {metric: value})

    def add(self, pair_id: str, row: dict) -> None:
        missing = set(self.metrics) - set(row)
        if missing:
            raise ValidationError(f"row {pair_id!r} lacks metrics {sorted(missing)}")
        self.rows.append((pair_id, {m: float(row[m]) for m in self.metrics}))

    def aggregate(self) -> dict:
        """``{metric: (mean, std)}``; infinite PSNR rows are left out with a warning."""
        if not self.rows:
            raise ValidationError("cannot aggregate an empty report")
        out = {}
        for m in self.metrics:
            vals = [r[m] for _, r in self.rows]
            finite = [v for v in vals if math.isfinite(v)]
            if len(finite) < len(vals):
                warnings.warn(f"{len(vals) - len(finite)} non-finite {m} value(s) left out "
                              "of the aggregate", stacklevel=2)
            if not finite:
                out[m] = (math.nan, math.nan)
                continue
            mean = math.fsum(finite) / len(finite)
            var = math.fsum((v - mean) ** 2 for v in finite) / len(finite)
            out[m] = (mean, math.sqrt(var))
        return out


FOOTER_MEAN = "__mean__"
FOOTER_STD = "__std__"


def write_report_csv(path, report: MetricReport, footer: bool = True) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("pair_id",) + tuple(report.metrics))
        for pid, row in report.rows:
            w.writerow([pid] + [repr(row[m]) for m in report.metrics])
        if footer and report.rows:
            agg = report.aggregate()
            w.writerow([FOOTER_MEAN] + [repr(agg[m][0]) for m in report.metrics])
            w.writerow([FOOTER_STD] + [repr(agg[m][1]) for m in report.metrics])


def read_report_csv(path) -> MetricReport:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "pair_id":
        raise ValidationError(f"{path}: missing pair_id header")
    report = MetricReport(tuple(rows[0][1:]))
    for r in rows[1:]:
        if r[0] in (FOOTER_MEAN, FOOTER_STD):
            continue
        report.add(r[0], dict(zip(report.metrics, map(float, r[1:]))))
    return report
