import warnings

import numpy as np
import pytest

from fmamba import data as D
from fmamba import tensor as T
from fmamba.errors import ShapeError, ValidationError


def test_ycbcr_fixed_points():
    y, cb, cr = D.rgb_to_ycbcr(np.zeros((3, 1, 1)))
    assert (y[0, 0, 0], cb[0, 0, 0], cr[0, 0, 0]) == (0.0, 0.5, 0.5)
    y, cb, cr = D.rgb_to_ycbcr(np.ones((3, 1, 1)))
    assert abs(y[0, 0, 0] - 1) < 1e-15 and abs(cb[0, 0, 0] - 0.5) < 1e-15
    assert abs(cr[0, 0, 0] - 0.5) < 1e-15
    gray = D.ycbcr_to_rgb(np.full((1, 1, 1), 0.5), np.full((1, 1, 1), 0.5), np.full((1, 1, 1), 0.5))
    assert np.allclose(gray, 0.5, atol=1e-15)


def test_ycbcr_luma_weights(rng):
    rgb = rng.random((3, 5, 5))
    y, _, _ = D.rgb_to_ycbcr(rgb)
    assert np.allclose(y[0], 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2], atol=1e-15)


def test_ycbcr_round_trip(rng):
    rgb = rng.random((3, 100, 100))
    back = D.ycbcr_to_rgb(*D.rgb_to_ycbcr(rgb))
    assert np.max(np.abs(back - rgb)) < 1e-6
    ramp = np.tile(np.linspace(0, 1, 50), (3, 1))[:, None, :]
    assert np.max(np.abs(D.ycbcr_to_rgb(*D.rgb_to_ycbcr(ramp)) - ramp)) < 1e-6


def test_ycbcr_clamps_and_rejects():
    out = D.ycbcr_to_rgb(np.ones((1, 1, 1)), np.ones((1, 1, 1)), np.zeros((1, 1, 1)))
    assert out.min() >= 0 and out.max() <= 1
    with pytest.raises(ShapeError):
        D.rgb_to_ycbcr(np.zeros((2, 4, 4)))


def test_normalize01(rng):
    assert D.normalize01(np.array([2.0, 4.0])).tolist() == [0.0, 1.0]
    assert D.normalize01(np.full(5, 7.0)).tolist() == [0.0] * 5
    for _ in range(5):
        x = rng.normal(3, 10, (6, 7))
        n = D.normalize01(x)
        assert n.min() == 0.0 and n.max() == 1.0
        assert np.array_equal(D.normalize01(n), n)


def test_roi_mask(rng):
    x = rng.random((1, 6, 6))
    assert np.array_equal(D.apply_roi_mask(x, np.ones((1, 6, 6))), x)
    assert not D.apply_roi_mask(x, np.zeros((1, 6, 6))).any()
    half = np.zeros((1, 6, 6))
    half[:, :, 3:] = 1
    out = D.apply_roi_mask(x, half)
    assert not out[:, :, :3].any() and np.array_equal(out[:, :, 3:], x[:, :, 3:])
    with T.checked_mode(), pytest.warns(UserWarning, match="binary"):
        D.apply_roi_mask(x, half * 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        D.apply_roi_mask(x, half * 0.5)  # unchecked: silent
    with pytest.raises(ShapeError):
        D.apply_roi_mask(x, np.ones((1, 5, 6)))


def test_crop_resample_default_geometry():
    v = np.full((1, 240, 240, 155), 0.3)
    out = D.crop_resample_volume(v)
    assert out.shape == (1, 128, 128, 128)
    assert np.allclose(out, 0.3, atol=1e-15)


def test_crop_resample_affine_exact():
    # ramp along the last axis and along a cropped axis
    x = np.arange(40.0)[:, None, None]
    z = np.arange(31.0)[None, None, :]
    v = (0.01 * x + 0.02 * z + 0.1 * np.ones((40, 40, 31)))[None]
    out = D.crop_resample_volume(v, crop=(24, 24), out_shape=(16, 16, 12))
    xs = 8 + np.arange(16) * (23 / 15)
    zs = np.arange(12) * (30 / 11)
    expect = 0.01 * xs[:, None, None] + 0.02 * zs[None, None, :] + 0.1
    assert np.max(np.abs(out[0] - expect)) < 1e-6


def test_crop_too_small():
    with pytest.raises(ShapeError, match="crop"):
        D.crop_resample_volume(np.zeros((1, 100, 240, 155)))


def test_axial_slices():
    assert D.axial_slices(np.zeros((1, 5, 10, 10))) == []
    assert len(D.axial_slices(np.ones((1, 5, 10, 10)))) == 5
    v = np.zeros((1, 3, 10, 10))
    v[0, 0].flat[:10] = 1  # exactly 10%
    v[0, 1].flat[:9] = 1
    v[0, 2].flat[:50] = 1
    kept = D.axial_slices(v)
    assert len(kept) == 2 and kept[0].shape == (1, 10, 10)


def test_axial_slice_filter_monotone(rng):
    v = (rng.random((1, 20, 8, 8)) < rng.random((20, 1, 1))).astype(float)
    counts = [len(D.axial_slices(v, t)) for t in np.linspace(0, 1, 21)]
    assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_synth_pairs():
    for dims, size in ((2, 64), (3, 16)):
        p, q = D.synth_pair_generator(5, dims, size), D.synth_pair_generator(5, dims, size)
        assert np.array_equal(p.a, q.a) and np.array_equal(p.b, q.b)
        assert p.a.shape == (1,) + (size,) * dims == p.b.shape
        for arr in (p.a, p.b):
            assert arr.min() >= 0 and arr.max() <= 1
    assert not np.array_equal(D.synth_pair_generator(1).a, D.synth_pair_generator(2).a)
    with pytest.raises(ValidationError):
        D.synth_pair_generator(0, 4)


def test_synth_modality_correlation():
    for seed in range(20):
        p = D.synth_pair_generator(seed)
        r = np.corrcoef(p.a.ravel(), p.b.ravel())[0, 1]
        assert 0.2 < r < 0.95, (seed, r)


def test_split_dataset():
    ids = [f"id{i}" for i in range(12)]
    s = D.split_dataset(ids, (2, 3), 7)
    assert s == D.split_dataset(ids, (2, 3), 7)
    assert (len(s.val), len(s.test), len(s.train)) == (2, 3, 7)
    parts = [set(s.train), set(s.val), set(s.test)]
    assert sorted(s.train + s.val + s.test) == sorted(ids)
    assert not (parts[0] & parts[1] or parts[0] & parts[2] or parts[1] & parts[2])
    tests = [frozenset(D.split_dataset(ids, (0, 3), seed).test) for seed in (1, 2, 3)]
    assert len(set(tests)) == 3
    with pytest.raises(ValidationError):
        D.split_dataset(ids, (10, 3), 0)
    with pytest.raises(ValidationError):
        D.split_dataset(ids, (-1, 0), 0)


def test_pnm_round_trip(tmp_path, rng):
    for bits in (8, 16):
        maxval = 2 ** bits - 1
        img = np.round(rng.random((1, 7, 9)) * maxval) / maxval
        D.write_pnm(tmp_path / "g.pgm", img, bits)
        assert np.array_equal(D.read_pnm(tmp_path / "g.pgm"), img)
        rgb = np.round(rng.random((3, 5, 4)) * maxval) / maxval
        D.write_pnm(tmp_path / "c.ppm", rgb, bits)
        assert np.array_equal(D.read_pnm(tmp_path / "c.ppm"), rgb)


def test_pnm_header_comments_and_errors(tmp_path):
    path = tmp_path / "x.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert D.read_pnm(path).tolist() == [[[0.0, 1.0]]]
    path.write_bytes(b"P5\n2 2\n255\n\x00")
    with pytest.raises(ValidationError, match="truncated"):
        D.read_pnm(path)
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValidationError):
        D.read_pnm(path)


def test_manifest_round_trip_and_load(tmp_path):
    (tmp_path / "img").mkdir()
    p = D.synth_pair_generator(3, 2, 16)
    D.write_pnm(tmp_path / "img/a.pgm", p.a, 16)
    D.write_pnm(tmp_path / "img/b.pgm", p.b, 16)
    mask = np.zeros((1, 16, 16))
    mask[:, 4:12, 4:12] = 1
    D.write_pnm(tmp_path / "img/m.pgm", mask)
    entries = [D.ManifestEntry("p0", tmp_path / "img/a.pgm", tmp_path / "img/b.pgm"),
               D.ManifestEntry("p1", tmp_path / "img/a.pgm", tmp_path / "img/b.pgm",
                               tmp_path / "img/m.pgm")]
    D.write_manifest(tmp_path / "m.tsv", entries)
    assert "img/a.pgm" in (tmp_path / "m.tsv").read_text()
    back = D.read_manifest(tmp_path / "m.tsv")
    assert back == entries
    pairs = D.iter_pairs(back)
    assert np.max(np.abs(pairs[0].a - p.a)) <= 0.5 / 65535
    assert not pairs[1].a[:, :4].any() and np.array_equal(pairs[1].a[:, 4:12, 4:12],
                                                         pairs[0].a[:, 4:12, 4:12])
    (tmp_path / "bad.tsv").write_text("only\ttwo\n")
    with pytest.raises(ValidationError):
        D.read_manifest(tmp_path / "bad.tsv")


def test_load_color_and_volume(tmp_path, rng):
    rgb = np.round(rng.random((3, 6, 6)) * 255) / 255
    D.write_pnm(tmp_path / "c.ppm", rgb)
    y, chroma = D.load_image(tmp_path / "c.ppm")
    assert y.shape == (1, 6, 6) and len(chroma) == 2
    assert np.max(np.abs(D.ycbcr_to_rgb(y, *chroma) - rgb)) < 1e-6
    vol = rng.random((4, 5, 6)) * 10
    T.save_tensor(tmp_path / "v.fmt1", T.Tensor(vol))
    arr, none = D.load_image(tmp_path / "v.fmt1")
    assert none is None and arr.shape == (1, 4, 5, 6)
    assert arr.min() == 0 and arr.max() == 1


def test_pair_shape_mismatch():
    with pytest.raises(ShapeError):
        D.ImagePair("x", np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))
