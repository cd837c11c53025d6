"""Command-line entry point: ``fmamba train|fuse|eval|ablate|bench|synth``.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_mod
from . import config as config_mod
from . import data as data_mod
from . import metrics
from . import tensor as T
from . import train as train_mod
from .errors import ConfigError, FmambaError, NumericalAbort, ValidationError
from .model import ModelConfig, init_params, param_count

log = logging.getLogger("fmamba")

# Published reference figures, printed next to local measurements only.
REFERENCE_2D = (0.1, 4.05e6)
REFERENCE_3D = (7.3, 6.01e6)
TOGGLES = ("no_cmca", "planar2d")
MIN_BENCH_REPS = 10


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are validation errors; exit code 2 is reserved for numerical aborts
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# helpers shared by commands and tests


def fuse_files(ckpt: ckpt_mod.Checkpoint, path_a, path_b):
    """Load one pair from disk and fuse it.  Returns ``(fused, chroma, seconds)``."""
    model_cfg = ckpt.config.model
    a, ca = data_mod.load_image(path_a)
    b, cb = data_mod.load_image(path_b)
    if a.shape != b.shape:
        raise ValidationError(f"input shapes differ: a {a.shape} vs b {b.shape}")
    if a.ndim - 1 != model_cfg.dims:
        raise ValidationError(f"input shape {a.shape} has {a.ndim - 1} spatial dims but the "
                              f"checkpoint model expects dims={model_cfg.dims}")
    params = train_mod.params_from_tensors(model_cfg, ckpt.tensors, np.dtype(ckpt.config.dtype))
    t0 = time.perf_counter()
    fused = train_mod.fuse_arrays(params, model_cfg, a, b)
    return fused, ca or cb, time.perf_counter() - t0


def write_fused(path, fused: np.ndarray, chroma=None) -> None:
    if fused.ndim == 4:
        T.save_tensor(path, fused)
    elif chroma is not None:
        data_mod.write_pnm(path, data_mod.ycbcr_to_rgb(fused, *chroma))
    else:
        data_mod.write_pnm(path, fused)


def evaluate_pairs(params: dict, model_cfg: ModelConfig, pairs: list) -> metrics.MetricReport:
    report = None
    for p in pairs:
        fused = train_mod.fuse_arrays(params, model_cfg, p.a, p.b)
        row = metrics.evaluate_pair(p.a, p.b, fused, model_cfg.dims)
        if report is None:
            report = metrics.MetricReport(tuple(row))
        report.add(p.id, row)
    if report is None:
        raise ValidationError("nothing to evaluate")
    return report


def ablation_config(cfg: config_mod.TrainConfig, toggle: str) -> config_mod.TrainConfig:
    """Copy of ``cfg`` with one ablation applied."""
    if toggle not in TOGGLES:
        raise ConfigError(f"unknown toggle {toggle!r}; choose from {', '.join(TOGGLES)}")
    if toggle == "planar2d":
        if cfg.model.dims != 3:
            raise ConfigError("the planar2d ablation needs a 3D model (dims=3)")
        model = dataclasses.replace(cfg.model, scan_strategy="planar2d")
    else:
        model = dataclasses.replace(cfg.model, cmca_enabled=False)
    return dataclasses.replace(cfg, model=model, checkpoint_path=None)


def _eval_pairs(cfg: config_mod.TrainConfig, train_pairs: list) -> list:
    if cfg.manifest is None or not cfg.split_test:
        return train_pairs
    entries = data_mod.read_manifest(cfg.manifest)
    split = data_mod.split_dataset([e.id for e in entries], (cfg.split_val, cfg.split_test),
                                   cfg.seed)
    keep = set(split.test)
    return [data_mod.load_pair(e) for e in entries if e.id in keep]


def run_ablation(cfg: config_mod.TrainConfig, toggle: str, progress=None,
                 base: train_mod.TrainResult | None = None) -> dict:
    """Train base and toggled variants on the same data and seed, then compare.

    ``base`` may pass an already finished run of ``cfg`` to skip retraining it.
    Deltas follow the toggled minus base convention.
    """
    variant = ablation_config(cfg, toggle)
    pairs = train_mod.load_training_pairs(cfg)
    eval_pairs = _eval_pairs(cfg, pairs)
    base_cfg = dataclasses.replace(cfg, checkpoint_path=None)
    runs = {}
    for name, c, done in (("base", base_cfg, base), (toggle, variant, None)):
        res = done or train_mod.train(c, pairs=pairs, progress=progress)
        report = evaluate_pairs(res.params, c.model, eval_pairs)
        summary = {m: mv for m, (mv, _) in report.aggregate().items()}
        summary["final_loss"] = res.log.records[-1].total
        runs[name] = {"result": res, "summary": summary, "params": param_count(res.params)}
    b, t = runs["base"]["summary"], runs[toggle]["summary"]
    table = [(m, b[m], t[m], t[m] - b[m]) for m in b]
    return {"toggle": toggle, "table": table, "runs": runs}


def format_delta_table(ablation: dict) -> str:
    toggle = ablation["toggle"]
    lines = [f"{'metric':<12}{'base':>14}{toggle:>14}{'delta':>14}"]
    for m, b, t, d in ablation["table"]:
        lines.append(f"{m:<12}{b:>14.6f}{t:>14.6f}{d:>+14.6f}")
    runs = ablation["runs"]
    lines.append(f"{'params':<12}{runs['base']['params']:>14d}{runs[toggle]['params']:>14d}"
                 f"{runs[toggle]['params'] - runs['base']['params']:>+14d}")
    return "\n".join(lines)


def bench(model_cfg: ModelConfig, sizes, reps: int = MIN_BENCH_REPS, warmup: int = 1,
          seed: int = 0, dtype="float64", params: dict | None = None) -> list:
    """Fusion latency per input size; returns ``[{size, mean_s, std_s, reps}]``."""
    if reps < MIN_BENCH_REPS:
        raise ConfigError(f"bench needs at least {MIN_BENCH_REPS} repetitions, got {reps}")
    with T.default_dtype(dtype):
        if params is None:
            params = init_params(model_cfg, seed)
    rows = []
    for size in sizes:
        pair = data_mod.synth_pair_generator(seed, model_cfg.dims, size)
        for _ in range(warmup):
            train_mod.fuse_arrays(params, model_cfg, pair.a, pair.b, dtype)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            train_mod.fuse_arrays(params, model_cfg, pair.a, pair.b, dtype)
            times.append(time.perf_counter() - t0)
        rows.append({"size": size, "mean_s": statistics.fmean(times),
                     "std_s": statistics.pstdev(times), "reps": reps})
    return rows


def _parse_sizes(text: str) -> list:
    try:
        sizes = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes expects comma-separated integers, got {text!r}") from None
    if not sizes or min(sizes) < 1:
        raise ConfigError("--sizes needs at least one positive size")
    return sizes


def _print_progress(every: int):
    def cb(rec):
        if rec.step == 1 or rec.step % every == 0:
            log.info("step %d total %.6f pixel %.6f grad %.6f ssim %.6f (%.0f ms)",
                     rec.step, rec.total, rec.pixel, rec.grad, rec.ssim, rec.ms)
    return cb


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = config_mod.load(args.config)
    if args.steps is not None:
        cfg = dataclasses.replace(cfg, steps=args.steps)
    out = args.out or cfg.checkpoint_path or "fmamba.ckpt"
    cfg = dataclasses.replace(cfg, checkpoint_path=out)
    resume = ckpt_mod.load(args.resume) if args.resume else None
    res = train_mod.train(cfg, resume=resume, progress=_print_progress(args.log_every))
    if args.log:
        res.log.write_csv(args.log)
    last = res.log.records[-1]
    print(f"trained {last.step} steps, final loss {last.total:.6f}, "
          f"{param_count(res.params)} parameters -> {out}")
    return 0


def cmd_fuse(args) -> int:
    ckpt = ckpt_mod.load(args.ckpt)
    fused, chroma, secs = fuse_files(ckpt, args.a, args.b)
    if args.keep_chroma:
        if chroma is None:
            raise ValidationError("--keep-chroma needs a colour (PPM) input; both inputs are "
                                  "grayscale so there is no Cb/Cr to reattach")
        write_fused(args.out, fused, chroma)
    else:
        write_fused(args.out, fused)
    n = sum(v.size for k, v in ckpt.tensors.items() if not k.startswith("adam."))
    print(f"fused {args.a} + {args.b} -> {args.out} in {secs * 1e3:.1f} ms ({n} parameters)")
    return 0


def cmd_eval(args) -> int:
    ckpt = ckpt_mod.load(args.ckpt)
    model_cfg = ckpt.config.model
    params = train_mod.params_from_tensors(model_cfg, ckpt.tensors, np.dtype(ckpt.config.dtype))
    pairs = data_mod.iter_pairs(data_mod.read_manifest(args.manifest))
    for p in pairs:
        if data_mod.pair_dims(p) != model_cfg.dims:
            raise ValidationError(f"pair {p.id!r} has shape {p.a.shape}; the checkpoint model "
                                  f"expects dims={model_cfg.dims}")
    report = evaluate_pairs(params, model_cfg, pairs)
    metrics.write_report_csv(args.out, report)
    for m, (mean, std) in report.aggregate().items():
        print(f"{m:<10}{mean:.4f} ± {std:.4f}")
    print(f"{len(report.rows)} pairs -> {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = config_mod.load(args.config)
    ablation_config(cfg, args.toggle)  # validate before spending time on training
    result = run_ablation(cfg, args.toggle, progress=_print_progress(args.log_every))
    print(format_delta_table(result))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("metric,base,toggled,delta\n")
            for m, b, t, d in result["table"]:
                fh.write(f"{m},{b!r},{t!r},{d!r}\n")
    return 0


def cmd_bench(args) -> int:
    cfg = config_mod.load(args.config)
    sizes = _parse_sizes(args.sizes)
    params = None
    if args.ckpt:
        ckpt = ckpt_mod.load(args.ckpt)
        cfg = ckpt.config
        params = train_mod.params_from_tensors(cfg.model, ckpt.tensors, np.dtype(cfg.dtype))
    with T.default_dtype(cfg.dtype):
        n = param_count(params if params is not None else init_params(cfg.model, cfg.seed))
    rows = bench(cfg.model, sizes, args.reps, args.warmup, cfg.seed, cfg.dtype, params)
    print(f"dims={cfg.model.dims} params={n} dtype={cfg.dtype}")
    for r in rows:
        shape = "x".join([str(r["size"])] * cfg.model.dims)
        print(f"{shape:>12}  {r['mean_s'] * 1e3:10.2f} ± {r['std_s'] * 1e3:.2f} ms "
              f"({r['reps']} reps)")
    for dims, (secs, count) in ((2, REFERENCE_2D), (3, REFERENCE_3D)):
        print(f"reference (published, {dims}D, other hardware): {secs} s per pair, "
              f"{count / 1e6:.2f}M parameters")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        pair = data_mod.synth_pair_generator(args.seed * 1000 + i, args.dims, args.size)
        paths = []
        for tag, img in (("a", pair.a), ("b", pair.b)):
            if args.dims == 2:
                p = out / f"{pair.id}_{tag}.pgm"
                data_mod.write_pnm(p, img, bits=16)
            else:
                p = out / f"{pair.id}_{tag}.fmt1"
                T.save_tensor(p, img)
            paths.append(p)
        entries.append(data_mod.ManifestEntry(pair.id, paths[0], paths[1]))
    data_mod.write_manifest(out / "manifest.tsv", entries)
    print(f"wrote {args.count} pairs and {out / 'manifest.tsv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="fmamba", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="checkpoint path (default: train.checkpoint_path)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--steps", type=int, help="override train.steps")
    p.add_argument("--log", help="write the per-step log as CSV")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse one pair with a trained checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-chroma", action="store_true",
                   help="reattach Cb/Cr of the colour input and write PPM")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="fuse and score every pair of a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="compare a config against one ablated variant")
    p.add_argument("--config", required=True)
    p.add_argument("--toggle", required=True, choices=TOGGLES)
    p.add_argument("--out", help="write the delta table as CSV")
    p.add_argument("--log-every", type=int, default=50)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="fusion latency and parameter count")
    p.add_argument("--config", required=True)
    p.add_argument("--sizes", default="64,128")
    p.add_argument("--ckpt", help="benchmark trained weights instead of a fresh init")
    p.add_argument("--reps", type=int, default=MIN_BENCH_REPS)
    p.add_argument("--warmup", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write synthetic pairs and a manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, choices=(2, 3), default=2)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        if e.components:
            comps = ", ".join(f"{k}={v!r}" for k, v in e.components.items())
            print(f"  components at step {e.step}: {comps}", file=sys.stderr)
        return 2
    except (FmambaError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
