import math
import warnings

import numpy as np
import pytest

from fmamba import metrics as Mx
from fmamba.data import synth_pair_generator
from fmamba.errors import ShapeError, ValidationError
from oracles import naive_entropy, naive_ssim


def smooth_image(seed, size=64):
    return synth_pair_generator(seed, 2, size).a[0]


def box_blur(img, r=2):
    p = np.pad(img, r, mode="edge")
    out = np.zeros_like(img)
    for i in range(2 * r + 1):
        for j in range(2 * r + 1):
            out += p[i:i + img.shape[0], j:j + img.shape[1]]
    return out / (2 * r + 1) ** 2


def naive_nmi(a, b, bins=256):
    def q(v):
        lo, hi = v.min(), v.max()
        hi = hi if hi > lo else lo + 1.0
        return np.minimum(((v - lo) / (hi - lo) * bins).astype(int), bins - 1).ravel()
    qa, qb = q(a), q(b)
    n = qa.size
    def H(keys):
        counts = {}
        for k in keys:
            counts[k] = counts.get(k, 0) + 1
        return -sum(c / n * math.log2(c / n) for c in counts.values())
    ha, hb, hab = H(qa.tolist()), H(qb.tolist()), H(list(zip(qa.tolist(), qb.tolist())))
    return 2 * (ha + hb - hab) / (ha + hb)


# ---- PSNR -----------------------------------------------------------------

def test_psnr_closed_forms(rng):
    x = np.zeros((8, 8))
    assert Mx.psnr(x, np.ones((8, 8))) == 0.0
    assert Mx.psnr(x, x) == math.inf
    sigma = 0.05
    pattern = np.where(np.indices((16, 16)).sum(0) % 2, sigma, -sigma)  # MSE exactly sigma^2
    base = rng.random((16, 16)) * 0.5 + 0.25
    assert abs(Mx.psnr(base, base + pattern) - 20 * math.log10(1 / sigma)) < 0.01
    noise = rng.uniform(-0.1, 0.1, (64, 64))
    mse = sum(v * v for v in noise.ravel()) / noise.size
    assert abs(Mx.psnr(base.repeat(4, 0).repeat(4, 1), base.repeat(4, 0).repeat(4, 1) + noise)
               - 10 * math.log10(1 / mse)) < 0.01


def test_psnr_non_negative_when_mse_at_most_one(rng):
    for _ in range(10):
        x, y = rng.random((8, 8)), rng.random((8, 8))
        assert np.mean((x - y) ** 2) <= 1 and Mx.psnr(x, y) >= 0


# ---- SSIM / MS-SSIM -------------------------------------------------------

def test_ssim_matches_naive_window_oracle(rng):
    for _ in range(3):
        x = rng.random((32, 32))
        y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
        assert abs(Mx.ssim(x, y) - naive_ssim(x, y)) < 1e-6


def test_ssim_identity_and_transpose(rng):
    x, y = rng.random((40, 33)), rng.random((40, 33))
    assert Mx.ssim(x, x) == 1.0
    assert abs(Mx.ssim(x, y) - Mx.ssim(x.T, y.T)) < 1e-9
    big_x, big_y = smooth_image(1, 180), smooth_image(2, 180)
    assert abs(Mx.ms_ssim(big_x, big_y) - Mx.ms_ssim(big_x.T, big_y.T)) < 1e-9


def test_ms_ssim_cases():
    x = smooth_image(3, 176)
    assert Mx.ms_ssim(x, x) == 1.0
    assert abs(Mx.ms_ssim(x, x * 0.9 + 0.05, scales=1) - Mx.ssim(x, x * 0.9 + 0.05)) < 1e-9
    rng = np.random.default_rng(0)
    n = rng.standard_normal(x.shape)
    vals = [Mx.ms_ssim(x, np.clip(x + s * n, 0, 1)) for s in (0.01, 0.05, 0.1)]
    assert vals[0] > vals[1] > vals[2]


def test_ms_ssim_size_errors_and_auto_reduce():
    x = smooth_image(4, 64)
    with pytest.raises(ShapeError, match="176"):
        Mx.ms_ssim(x, x)
    assert Mx.ms_ssim(x, x, auto_reduce=True) == 1.0
    v = synth_pair_generator(0, 3, 32)
    val = Mx.ms_ssim(v.a, v.b, dims=3, auto_reduce=True)
    assert 0 <= val <= 1


# ---- entropy / FMI --------------------------------------------------------

def test_entropy_constructed_histograms(rng):
    assert Mx.entropy(np.full((10, 10), 0.3)) == 0.0
    uniform = (np.arange(256 * 4) % 256 + 0.5) / 256
    assert Mx.entropy(uniform) == 8.0
    two = np.array([0.1, 0.9] * 50)
    assert Mx.entropy(two) == 1.0
    img = rng.random((40, 40))
    assert abs(Mx.entropy(img) - naive_entropy(img)) < 1e-12
    assert 0 <= Mx.entropy(img) <= 8


def test_nmi_oracle_and_fmi(rng):
    a = rng.random((30, 30))
    b = rng.random((30, 30)) * 0.5 + a * 0.5
    assert abs(Mx.nmi(a, b) - naive_nmi(a, b)) < 1e-12
    x = smooth_image(5, 48)
    assert abs(Mx.fmi(x, x, x) - 1.0) < 1e-9
    y, f = smooth_image(6, 48), smooth_image(7, 48)
    assert Mx.fmi(x, y, f) == Mx.fmi(y, x, f)


def test_fmi_near_zero_for_unrelated_fused(rng):
    ramp = np.tile(np.linspace(0, 1, 64), (64, 1))
    fused = rng.random((64, 64))
    assert Mx.fmi(ramp, ramp.T, fused) < 0.05


def test_nmi_degenerate_maps():
    c = np.zeros((8, 8))
    assert Mx.nmi(c, c) == 1.0
    assert Mx.nmi(c, np.arange(64.0).reshape(8, 8)) == 0.0


# ---- FSIM -----------------------------------------------------------------

def test_fsim_identity_symmetry_and_blur():
    x = smooth_image(8, 64)
    assert Mx.fsim(x, x) == 1.0
    y = smooth_image(9, 64)
    assert Mx.fsim(x, y) == Mx.fsim(y, x)
    blurred = box_blur(x)
    assert Mx.fsim(x, blurred) < Mx.fsim(x, x)
    assert Mx.fsim(x, box_blur(x, 1)) > Mx.fsim(x, box_blur(x, 3))
    flat = np.full((40, 40), 0.5)
    assert Mx.fsim(flat, flat) == 1.0


def test_fsim_rejects_3d_and_small():
    v = np.zeros((1, 32, 32, 32))
    with pytest.raises(ValidationError):
        Mx.fsim(v, v)
    with pytest.raises(ShapeError):
        Mx.fsim(np.zeros((16, 16)), np.zeros((16, 16)))


def test_phase_congruency_range():
    pc = Mx.phase_congruency(smooth_image(10, 64) * 255)
    assert pc.shape == (64, 64) and pc.min() >= 0 and pc.max() <= 1 + 1e-9


# ---- evaluate_pair and reports --------------------------------------------

def test_evaluate_pair_identical():
    x = smooth_image(11, 48)[None]
    row = Mx.evaluate_pair(x, x, x, 2)
    assert tuple(row) == Mx.METRICS_2D
    assert row["psnr"] == math.inf and row["ssim"] == 1.0 and row["fsim"] == 1.0
    assert abs(row["fmi"] - 1.0) < 1e-9
    assert row["en"] == Mx.entropy(x)
    v = synth_pair_generator(2, 3, 32)
    assert tuple(Mx.evaluate_pair(v.a, v.b, v.a, 3)) == Mx.METRICS_3D


def test_metric_determinism():
    p = synth_pair_generator(12, 2, 48)
    f = np.maximum(p.a, p.b)
    a, b = Mx.evaluate_pair(p.a, p.b, f), Mx.evaluate_pair(p.a, p.b, f)
    assert repr(a) == repr(b)


def test_report_aggregate_and_csv(tmp_path, rng):
    rep = Mx.MetricReport(("psnr", "en"))
    rows = [{"psnr": float(rng.uniform(20, 40)), "en": float(rng.uniform(3, 7))} for _ in range(5)]
    for i, r in enumerate(rows):
        rep.add(f"p{i}", r)
    agg = rep.aggregate()
    for m in ("psnr", "en"):
        vals = [r[m] for r in rows]
        assert abs(agg[m][0] - np.mean(vals)) < 1e-12
        assert abs(agg[m][1] - np.std(vals)) < 1e-12
    path = tmp_path / "r.csv"
    Mx.write_report_csv(path, rep)
    lines = path.read_text().splitlines()
    assert lines[0] == "pair_id,psnr,en" and lines[-2].startswith("__mean__")
    back = Mx.read_report_csv(path)
    assert back.rows == rep.rows


@pytest.mark.filterwarnings("ignore:1 non-finite")
def test_report_single_row_and_inf(tmp_path):
    rep = Mx.MetricReport(("psnr", "en"))
    rep.add("only", {"psnr": 31.5, "en": 5.0})
    assert rep.aggregate() == {"psnr": (31.5, 0.0), "en": (5.0, 0.0)}
    rep.add("same", {"psnr": math.inf, "en": 5.0})
    with pytest.warns(UserWarning, match="non-finite"):
        agg = rep.aggregate()
    assert agg["psnr"] == (31.5, 0.0)
    Mx.write_report_csv(tmp_path / "r.csv", rep)
    assert ",inf," in (tmp_path / "r.csv").read_text()
    assert Mx.read_report_csv(tmp_path / "r.csv").rows[1][1]["psnr"] == math.inf


def test_report_errors():
    rep = Mx.MetricReport(("psnr",))
    with pytest.raises(ValidationError):
        rep.aggregate()
    with pytest.raises(ValidationError):
        rep.add("x", {"en": 1.0})
