import dataclasses
import math

import numpy as np
import pytest

from fmamba import checkpoint as ck
from fmamba import config as C
from fmamba import tensor as T
from fmamba import train as tr
from fmamba.data import ImagePair, synth_pair_generator
from fmamba.errors import ConfigError, NumericalAbort, ValidationError
from fmamba.losses import LossWeights
from fmamba.model import ModelConfig, flatten_params, forward_fuse, init_params

TINY = ModelConfig(stem_channels=4, latent_channels=8, dgcb_blocks=1, k_mamba=1,
                   mamba_expand=1, mamba_d_state=2, decoder_layers=2)


def tiny_cfg(**kw):
    base = dict(model=TINY, steps=4, batch_size=2, synth_count=3, synth_size=16, lr=1e-3)
    base.update(kw)
    return C.TrainConfig(**base)


# ---- config ---------------------------------------------------------------

def test_default_loss_weights():
    cfg = C.default_config()
    assert (cfg.loss.pixel, cfg.loss.grad, cfg.loss.ssim) == (2.0, 10.0, 5.0)
    assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.eps) == (1e-4, 0.9, 0.999, 1e-8)
    assert cfg.batch_size == 4 and C.default_config(3).batch_size == 1
    assert C.default_config(3).model.dims == 3


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(lr=-1.0), dict(steps=0), dict(batch_size=0),
                                dict(beta1=1.0), dict(eps=0.0), dict(dtype="float16"),
                                dict(checkpoint_every=-1)])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        C.TrainConfig(**kw)


def test_config_text_round_trip(tmp_path):
    cfg = tiny_cfg(seed=9, manifest="data/m.tsv", loss=LossWeights(1.0, 2.5, 0.1))
    text = C.dumps(cfg)
    keys = [ln.split(" = ")[0] for ln in text.splitlines()]
    assert keys == sorted(keys) and "optim.lr = 0.001" in text
    assert C.loads(text) == cfg
    C.save(tmp_path / "c.cfg", cfg)
    assert C.load(tmp_path / "c.cfg") == cfg
    assert C.dumps(C.loads(text)) == text


def test_config_partial_and_errors():
    cfg = C.loads("# comment\nmodel.dims = 3\ntrain.steps = 7  # inline\n")
    assert cfg.model.dims == 3 and cfg.steps == 7 and cfg.lr == 1e-4
    for bad in ("nokey", "train.bogus = 1", "train.steps = x", "train.steps = 1\ntrain.steps = 2",
                "optim.lr = 0"):
        with pytest.raises(ConfigError):
            C.loads(bad)


# ---- adam -----------------------------------------------------------------

def test_adam_zero_gradient():
    p = {"w": T.Tensor(np.array([1.0, -2.0, 3.0]))}
    before = p["w"].data.copy()
    tr.adam_step(p, {"w": np.zeros(3)}, tr.AdamState(), 0.1)
    assert np.array_equal(p["w"].data, before)


def test_adam_first_step_is_sign_times_lr():
    g = np.array([3.0, -0.5, 1e-3])
    p = {"w": T.Tensor(np.zeros(3))}
    tr.adam_step(p, {"w": g}, tr.AdamState(), 0.01)
    assert np.allclose(p["w"].data, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_reference_trace():
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = {"w": T.Tensor(np.array([0.0]))}
    state = tr.AdamState()
    x, m, v = 0.0, 0.0, 0.0
    for t in range(1, 11):
        g = 2.0 * (x - 3.0)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        tr.adam_step(p, {"w": np.array([2.0 * (p["w"].data[0] - 3.0)])}, state, lr, (b1, b2), eps)
        assert abs(p["w"].data[0] - x) < 1e-10
    assert state.t == 10


def test_adam_shape_mismatch():
    with pytest.raises(ValidationError):
        tr.adam_step({"w": T.Tensor(np.zeros(3))}, {"w": np.zeros(2)}, tr.AdamState(), 0.1)


# ---- training -------------------------------------------------------------

def test_zero_lr_step_is_identity():
    params = init_params(TINY, 0)
    named = flatten_params(params)
    before = {n: t.data.copy() for n, t in named.items()}
    x = T.Tensor(np.full((2, 1, 16, 16), 0.4))
    tr.train_step(params, named, tr.AdamState(), x, x, TINY, LossWeights(), 0.0,
                  (0.9, 0.999), 1e-8, 1)
    for n, t in named.items():
        assert np.array_equal(t.data, before[n]), n


def test_sample_indices():
    rng = np.random.default_rng(0)
    idx = tr.sample_indices(rng, 5, 3)
    assert len(set(idx.tolist())) == 3 and list(idx) == sorted(idx)
    assert len(tr.sample_indices(rng, 2, 4)) == 4


def test_training_is_deterministic():
    a, b = tr.train(tiny_cfg()), tr.train(tiny_cfg())
    assert a.log.to_json()[0][:5] == b.log.to_json()[0][:5]
    assert [r.total for r in a.log.records] == [r.total for r in b.log.records]
    assert a.log == b.log  # wall-clock column is excluded from equality
    for n, t in flatten_params(a.params).items():
        assert np.array_equal(t.data, flatten_params(b.params)[n].data)


def test_log_components_sum_to_total():
    res = tr.train(tiny_cfg(steps=3))
    assert [r.step for r in res.log.records] == [1, 2, 3]
    for r in res.log.records:
        assert abs(2 * r.pixel + 10 * r.grad + 5 * r.ssim - r.total) < 1e-10
        assert all(math.isfinite(v) for v in (r.total, r.pixel, r.grad, r.ssim))


def test_resume_equals_straight_run(tmp_path):
    straight = tr.train(tiny_cfg(steps=6))
    half = tr.train(tiny_cfg(steps=3))
    ck.save(tmp_path / "h.fmck", half.checkpoint)
    resumed = tr.train(tiny_cfg(steps=6), resume=ck.load(tmp_path / "h.fmck"))
    assert resumed.log == straight.log
    assert [r.total for r in resumed.log.records] == [r.total for r in straight.log.records]
    for n, t in flatten_params(straight.params).items():
        assert np.array_equal(t.data, flatten_params(resumed.params)[n].data), n


def test_periodic_checkpoints(tmp_path):
    path = tmp_path / "run.fmck"
    seen = []
    cfg = tiny_cfg(steps=4, checkpoint_every=2, checkpoint_path=str(path))
    tr.train(cfg, progress=lambda rec: seen.append((rec.step, ck.load(path).meta["step"]
                                                   if path.exists() else None)))
    assert seen[2] == (3, 2)
    assert ck.load(path).meta["step"] == 4


def test_resume_rejects_other_model():
    res = tr.train(tiny_cfg(steps=1))
    other = tiny_cfg(model=dataclasses.replace(TINY, k_mamba=2))
    with pytest.raises(ValidationError):
        tr.train(other, resume=res.checkpoint)


def test_checkpoint_round_trip_forward(tmp_path):
    res = tr.train(tiny_cfg(steps=2))
    ck.save(tmp_path / "c.fmck", res.checkpoint)
    back = ck.load(tmp_path / "c.fmck")
    assert back.config == res.checkpoint.config and back.meta == res.checkpoint.meta
    assert ck.dumps(back) == ck.dumps(res.checkpoint)
    params = tr.params_from_tensors(TINY, back.tensors)
    pair = synth_pair_generator(0, 2, 16)
    assert np.array_equal(tr.fuse_arrays(params, TINY, pair.a, pair.b),
                          tr.fuse_arrays(res.params, TINY, pair.a, pair.b))


def test_checkpoint_rejects_garbage():
    with pytest.raises(ValidationError):
        ck.loads(b"NOPE")
    good = ck.dumps(tr.train(tiny_cfg(steps=1)).checkpoint)
    with pytest.raises(ValidationError):
        ck.loads(good[:-10])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_diagnostics():
    bad = synth_pair_generator(0, 2, 16)
    bad.a[0, 3, 3] = np.nan
    with pytest.raises(NumericalAbort) as exc:
        tr.train(tiny_cfg(steps=2, batch_size=1), pairs=[bad])
    assert exc.value.step == 1
    assert set(exc.value.components) == {"total", "pixel", "grad", "ssim"}


def test_training_reduces_loss():
    res = tr.train(tiny_cfg(steps=30, lr=5e-3, synth_count=2))
    tot = res.log.totals()
    assert np.mean(tot[-5:]) < tot[0]


def test_log_csv(tmp_path):
    res = tr.train(tiny_cfg(steps=2))
    res.log.write_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,total,pixel,grad,ssim,ms" and len(lines) == 3
    assert float(lines[1].split(",")[1]) == res.log.records[0].total
    with pytest.raises(ValidationError):
        res.log.append(tr.StepRecord(1, 0.0, 0.0, 0.0, 0.0))


def test_manifest_training_split(tmp_path):
    from fmamba import data as D
    entries = []
    for i in range(4):
        p = synth_pair_generator(i, 2, 16)
        D.write_pnm(tmp_path / f"a{i}.pgm", p.a, 16)
        D.write_pnm(tmp_path / f"b{i}.pgm", p.b, 16)
        entries.append(D.ManifestEntry(f"p{i}", tmp_path / f"a{i}.pgm", tmp_path / f"b{i}.pgm"))
    D.write_manifest(tmp_path / "m.tsv", entries)
    cfg = tiny_cfg(manifest=str(tmp_path / "m.tsv"), split_test=1)
    assert len(tr.load_training_pairs(cfg)) == 3
    cfg3 = tiny_cfg(manifest=str(tmp_path / "m.tsv"), model=dataclasses.replace(TINY, dims=3,
                                                    scan_strategy="triplane"))
    with pytest.raises(ValidationError, match="spatial dims"):
        tr.load_training_pairs(cfg3)


def test_lr_schedule():
    const = tiny_cfg(steps=5)
    assert [tr.lr_at(const, s) for s in range(1, 6)] == [1e-3] * 5
    cos = tiny_cfg(steps=5, lr_schedule="cosine", lr_min_ratio=0.1)
    lrs = [tr.lr_at(cos, s) for s in range(1, 6)]
    assert lrs[0] == 1e-3 and abs(lrs[-1] - 1e-4) < 1e-18
    assert abs(lrs[2] - 0.5 * (1e-3 + 1e-4)) < 1e-18
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ConfigError):
        tiny_cfg(lr_schedule="step")
    assert C.loads(C.dumps(cos)) == cos


def test_cosine_resume_from_periodic_checkpoint(tmp_path):
    path = tmp_path / "p.fmck"
    kw = dict(steps=4, lr_schedule="cosine", checkpoint_every=2, checkpoint_path=str(path))
    seen = {}
    straight = tr.train(tiny_cfg(**kw), progress=lambda rec: seen.setdefault(
        rec.step, ck.dumps(ck.load(path)) if rec.step == 3 else None))
    resumed = tr.train(tiny_cfg(steps=4, lr_schedule="cosine"), resume=ck.loads(seen[3]))
    assert [r.total for r in resumed.log.records] == [r.total for r in straight.log.records]
