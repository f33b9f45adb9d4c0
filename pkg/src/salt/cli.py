"""Command-line entry point: ``salt <subcommand> ...``.

Every subcommand prints JSON lines on stdout.  Failures print one JSON line
``{"error": ..., "type": ..., "code": ...}`` on stderr and exit 1 (runtime) or
2 (usage or configuration).  Commands that write an output location refuse to
overwrite it unless ``--force`` is given.

Set ``SALT_NUM_THREADS`` to cap the BLAS thread pools (read on import of
the package, before numpy loads).
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, SaltError

log = logging.getLogger("salt")


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit(record: dict, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(json.dumps(record, default=_json_default, sort_keys=False) + "\n")
    stream.flush()


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _claim_out(path: str | os.PathLike, force: bool, is_dir: bool = True) -> Path:
    """Refuse to reuse an existing output unless forced; clear it when forced."""
    path = Path(path)
    if path.exists():
        if not force:
            raise UsageError(f"output {path} exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    if is_dir:
        path.mkdir(parents=True)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _parse_grid(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"grid must look like 8x8x8, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 1:
        raise UsageError(f"grid must have three positive extents, got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .config import RunConfig
    from .data import DatasetSpec, generate_dataset, generate_pairs

    raw = json.loads(Path(args.spec).read_text()) if args.spec else {}
    if "dataset" in raw:
        spec = RunConfig.from_dict({k: raw[k] for k in ("seed", "dataset") if k in raw}).dataset_spec()
    else:
        spec = DatasetSpec.from_dict(raw)
    if args.seed is not None:
        spec = DatasetSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    out = _claim_out(args.out, args.force)
    if args.pairs:
        path = generate_pairs(spec, args.pairs, out, force=True)
        _emit({"kind": "pairs", "pairs": args.pairs, "manifest": path})
    else:
        path = generate_dataset(spec, out, force=True)
        _emit({"kind": "clips", "clips": spec.clip_count, "grid": list(spec.grid), "manifest": path})
    return 0


def _train(args, stage: str) -> int:
    from .config import RunConfig
    from .data import Dataset
    from .trainers import Trainer

    rc = RunConfig.load(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    dataset = Dataset(args.dataset)
    cfg = rc.model_config(dataset.spec)
    overrides = {"stage": stage, "steps": args.steps, "seed": rc.seed}
    if stage == "stage2":
        teacher = getattr(args, "teacher", None) or rc.train.get("teacher")
        if not teacher:
            raise UsageError("train-student requires --teacher (missing field 'teacher')")
        overrides["teacher"] = teacher
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    plan = rc.train_plan(**overrides)
    optim = rc.optim_config(plan.steps)
    out = _claim_out(args.out, args.force)
    resolved = {"seed": rc.seed, "dataset": dataset.spec.to_dict(), "model": cfg.to_dict(),
                "optim": optim.to_dict(), "train": plan.to_dict(), "dataset_dir": str(args.dataset)}
    (out / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    trainer = Trainer(plan, cfg, optim, dataset, out)
    result = trainer.run(log_every=args.log_every)
    if not args.no_plot:
        from .plotting import loss_curves

        loss_curves({stage: result.records}, out / "loss.png", window=min(50, max(1, plan.steps // 10)))
    last = result.records[-1]
    _emit({"stage": stage, "steps": plan.steps, "final_loss": last["loss"], "flops_cum": last["flops_cum"],
           "checkpoints": [p.name for p in result.checkpoints], "out": out})
    return 0


def cmd_train_teacher(args) -> int:
    return _train(args, "stage1")


def cmd_train_student(args) -> int:
    return _train(args, "stage2")


def cmd_train_ema(args) -> int:
    return _train(args, "ema_baseline")


def _encoder_from(ckpt):
    from .models import ModelConfig
    from .trainers import load_params

    echo, groups = load_params(ckpt, None, ("encoder",))
    return echo, ModelConfig.from_dict(echo["model"]), groups["encoder"]


def cmd_probe(args) -> int:
    from .config import RunConfig
    from .data import Dataset
    from .evaluation import train_probe

    rc = RunConfig.load(args.config)
    echo, cfg, enc = _encoder_from(args.ckpt)
    probe = rc.probe_config(task=args.task, epochs=args.epochs, blocks=args.blocks,
                            lrs=tuple(args.lr) if args.lr else None, seed=args.seed)
    result = train_probe(enc, cfg, Dataset(args.dataset), probe)
    record = {"ckpt": args.ckpt, "stage": echo.get("stage"), "step": echo.get("step"), "task": probe.task,
              **result.to_dict()}
    if args.out:
        out = _claim_out(args.out, args.force, is_dir=False)
        out.write_text(json.dumps(record, default=_json_default) + "\n")
    _emit(record)
    return 0


def load_surprise_model(ckpt, teacher: str | None = None):
    """Student, predictor and target encoder for a Stage-2 or EMA checkpoint."""
    from .checkpoint import load_checkpoint
    from .evaluation import SurpriseModel
    from .models import ModelConfig
    from .trainers import load_params

    echo, _ = load_checkpoint(ckpt)
    cfg = ModelConfig.from_dict(echo["model"])
    stage = echo.get("stage")
    if stage == "stage1":
        raise ConfigError("surprise needs a predictor: use a Stage-2 or EMA-baseline checkpoint")
    groups = ("encoder", "predictor", "teacher") if stage == "ema_baseline" else ("encoder", "predictor")
    _, sets = load_params(ckpt, cfg, groups)
    if stage == "ema_baseline":
        target, target_cfg = sets["teacher"], cfg
    else:
        path = teacher or echo.get("plan", {}).get("teacher")
        if not path or not Path(path).is_file():
            raise ConfigError(f"target encoder checkpoint {path!r} not found; pass --teacher")
        _, target_cfg, target = _encoder_from(path)
    return SurpriseModel(sets["encoder"], sets["predictor"], target, cfg, target_cfg)


def cmd_surprise(args) -> int:
    from .data import Dataset
    from .evaluation import SurpriseConfig, score_pairs

    model = load_surprise_model(args.ckpt, args.teacher)
    cfg = SurpriseConfig(args.context, args.future, args.stride, args.agg)
    res = score_pairs(model, Dataset(args.pairs), cfg)
    overall = res["overall"]
    _emit({"ckpt": args.ckpt, "context": cfg.context, "future": cfg.future, "stride": cfg.stride,
           "aggregation": cfg.aggregation, **overall.to_dict(), "per_kind": res["per_kind"]})
    if args.out:
        from .plotting import surprise_histogram

        out = _claim_out(args.out, args.force)
        surprise_histogram(res["possible"], res["impossible"], out / "surprise.png")
        with open(out / "scores.jsonl", "w") as fh:
            for i, (p, q) in enumerate(zip(res["possible"], res["impossible"])):
                fh.write(json.dumps({"pair": i, "possible": float(p), "impossible": float(q)}) + "\n")
    return 0


def cmd_rankme(args) -> int:
    from .data import Dataset, patchify_frames
    from .evaluation import extract_latents, rankme

    echo, cfg, enc = _encoder_from(args.ckpt)
    ds = Dataset(args.dataset)
    idx = ds.indices(args.split)[: args.max_clips]
    tokens = patchify_frames(ds.frames(idx), cfg.tubelet).astype(np.float32)
    lat = extract_latents(enc, cfg, tokens)
    pooled = lat.mean(axis=1)
    _emit({"ckpt": args.ckpt, "clips": int(idx.size), "rankme_pooled": rankme(pooled),
           "rankme_tokens": rankme(lat.reshape(-1, lat.shape[-1])), "max_rank": int(min(pooled.shape))})
    return 0


def cmd_flops(args) -> int:
    from .budget import get_preset, model_flops
    from .models import get_config, parameter_breakdown

    if args.preset:
        preset = get_preset(args.preset)
        comps = preset.spec.components()
        for name, value in comps.items():
            _emit({"component": name, "flops": value})
        _emit({"preset": preset.name, "total": preset.spec.total(), "table_total": preset.table_total,
               "residual": preset.residual(), **({"note": preset.note} if preset.note else {})})
        return 0
    if not args.model:
        raise UsageError("flops needs --preset or --model")
    if args.steps is None or args.batch is None:
        raise UsageError("flops --model needs --steps and --batch")
    cfg = get_config(args.model)
    if args.grid:
        cfg = cfg.replace(grid=_parse_grid(args.grid))
    spec = model_flops(cfg, args.steps, args.batch, args.mask_ratio, args.stage, args.masks)
    for name, value in spec.components().items():
        _emit({"component": name, "flops": value})
    _emit({"model": cfg.name, "params": parameter_breakdown(cfg), "tokens_per_clip": cfg.num_tokens,
           "steps": args.steps, "batch": args.batch, "mask_ratio": args.mask_ratio, "total": spec.total()})
    return 0


def _parse_splits(text: str) -> list[tuple[int, int]]:
    out = []
    for part in text.split(","):
        try:
            t, s = (int(v) for v in part.split(":"))
        except ValueError:
            raise UsageError(f"split must be teacher:student, got {part!r}") from None
        out.append((t, s))
    return out


def cmd_sweep(args) -> int:
    from .budget import AllocationPlan, allocation_sweep
    from .config import RunConfig
    from .data import Dataset

    rc = RunConfig.load(args.config)
    if args.seed is not None:
        rc.seed = args.seed
    plan = (AllocationPlan(args.total_steps, _parse_splits(args.splits)) if args.splits
            else AllocationPlan.from_fractions(args.total_steps))
    plan.validate()
    dataset = Dataset(args.dataset)
    cfg = rc.model_config(dataset.spec)
    out = _claim_out(args.out, args.force)
    report = allocation_sweep(plan, cfg, rc.optim_config, rc.train_plan(seed=rc.seed), dataset,
                              rc.probe_config(), out, baseline=not args.no_baseline)
    for row in report["rows"]:
        _emit(row)
    if "baseline" in report:
        _emit({"baseline": report["baseline"]})
    (out / "sweep.json").write_text(json.dumps(report, indent=2) + "\n")
    from .plotting import sweep as plot_sweep

    plot_sweep(report["rows"], out / "sweep.png", report.get("baseline"))
    return 0


def correlate_runs(run_dirs, dataset, probe_cfg, window: int = 50, cache: bool = True) -> dict:
    """Probe every checkpoint of the given runs and fit accuracy against smoothed loss."""
    from .evaluation import r2_fit, smoothed_loss, train_probe
    from .models import ModelConfig
    from .trainers import load_params, read_records

    points = []
    for run in run_dirs:
        run = Path(run)
        records = read_records(run / "records.jsonl")
        for ckpt in sorted(run.glob("step_*.ckpt")):
            echo, groups = load_params(ckpt, None, ("encoder",))
            step = int(echo["step"])
            cached = ckpt.with_suffix(f".probe-{probe_cfg.task}.json")
            if cache and cached.exists():
                acc = json.loads(cached.read_text())["accuracy"]
            else:
                cfg = ModelConfig.from_dict(echo["model"])
                acc = train_probe(groups["encoder"], cfg, dataset, probe_cfg).accuracy
                if cache:
                    cached.write_text(json.dumps({"accuracy": acc, "probe": probe_cfg.to_dict()}) + "\n")
            points.append({"run": str(run), "step": step, "loss": smoothed_loss(records, step, window),
                           "accuracy": acc})
    if len(points) < 3:
        raise ConfigError(f"need at least 3 checkpoints to correlate, found {len(points)}")
    fit = r2_fit([p["loss"] for p in points], [p["accuracy"] for p in points])
    return {"points": points, "fit": fit}


def cmd_correlate(args) -> int:
    from .config import RunConfig
    from .data import Dataset

    rc = RunConfig.load(args.config)
    runs = sorted(set(glob.glob(args.runs)))
    runs = [r for r in runs if (Path(r) / "records.jsonl").exists()]
    if not runs:
        raise UsageError(f"no run directories match {args.runs!r}")
    probe = rc.probe_config(task=args.task, epochs=args.epochs, blocks=args.blocks)
    res = correlate_runs(runs, Dataset(args.dataset), probe, args.window)
    for p in res["points"]:
        _emit(p)
    fit = res["fit"]
    _emit({"fit": fit.to_dict(), "points": len(res["points"])})
    if args.out:
        from .plotting import correlation

        out = _claim_out(args.out, args.force)
        correlation([p["loss"] for p in res["points"]], [p["accuracy"] for p in res["points"]], fit,
                    out / "correlation.png", labels=[p["step"] for p in res["points"]])
        with open(out / "points.tsv", "w") as fh:
            fh.write("run\tstep\tloss\taccuracy\n")
            for p in res["points"]:
                fh.write(f"{p['run']}\t{p['step']}\t{p['loss']:.6g}\t{p['accuracy']:.6g}\n")
    return 0


def cmd_mask_stats(args) -> int:
    from .masking import MultiBlockParams, mask_stats

    grid = _parse_grid(args.grid)
    mb = MultiBlockParams(short_scale=args.short_scale, long_scale=args.long_scale)
    stats = mask_stats(args.strategy, grid, args.samples, args.seed, multiblock=mb,
                       ratios=(args.ratio, args.ratio))
    freq = stats.pop("frequency")
    _emit(stats)
    for t in range(grid[0]):
        _emit({"t": t, "frequency": np.round(freq[t], 4)})
    if args.out:
        from .plotting import mask_frequency

        out = _claim_out(args.out, args.force)
        mask_frequency(freq, out / "mask_frequency.png", f"{args.strategy} on {args.grid}")
        np.savetxt(out / "frequency.tsv", freq.reshape(-1, grid[2]), delimiter="\t", fmt="%.5f")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="salt", description="Static-teacher latent training on synthetic video.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a synthetic clip corpus or possible/impossible pairs")
    g.add_argument("--spec", help="JSON dataset spec (or run config with a dataset section)")
    g.add_argument("--out", required=True)
    g.add_argument("--pairs", type=int, default=0, help="write this many pairs instead of a corpus")
    g.add_argument("--seed", type=int)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (("train-teacher", cmd_train_teacher, "Stage 1: pixel-reconstruction teacher"),
                                 ("train-student", cmd_train_student, "Stage 2: frozen-teacher student"),
                                 ("train-ema", cmd_train_ema, "EMA self-distillation baseline")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config")
        t.add_argument("--dataset", required=True)
        t.add_argument("--steps", type=int, required=True)
        t.add_argument("--seed", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--out", required=True)
        t.add_argument("--force", action="store_true")
        t.add_argument("--log-every", type=int, default=0)
        t.add_argument("--no-plot", action="store_true")
        if name == "train-student":
            t.add_argument("--teacher", help="Stage-1 checkpoint")
        t.set_defaults(func=func)

    pr = sub.add_parser("probe", help="attentive probe on a frozen encoder")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--task", choices=("motion", "shape"))
    pr.add_argument("--config")
    pr.add_argument("--epochs", type=int)
    pr.add_argument("--blocks", type=int)
    pr.add_argument("--lr", type=float, action="append")
    pr.add_argument("--seed", type=int)
    pr.add_argument("--out")
    pr.add_argument("--force", action="store_true")
    pr.set_defaults(func=cmd_probe)

    s = sub.add_parser("surprise", help="relative accuracy on possible/impossible pairs")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--teacher", help="override the target encoder checkpoint")
    s.add_argument("--context", type=int, default=4)
    s.add_argument("--future", type=int, default=4)
    s.add_argument("--stride", type=int, default=2)
    s.add_argument("--agg", choices=("avg", "max"), default="avg")
    s.add_argument("--out")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_surprise)

    r = sub.add_parser("rankme", help="effective rank of encoder embeddings")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--split", default="eval", choices=("train", "eval"))
    r.add_argument("--max-clips", type=int, default=512)
    r.set_defaults(func=cmd_rankme)

    f = sub.add_parser("flops", help="6ND / 2ND compute estimate")
    f.add_argument("--preset")
    f.add_argument("--model")
    f.add_argument("--grid", help="token grid override, e.g. 8x14x14")
    f.add_argument("--steps", type=int)
    f.add_argument("--batch", type=int)
    f.add_argument("--mask-ratio", type=float, default=0.9)
    f.add_argument("--masks", type=int, default=1)
    f.add_argument("--stage", choices=("stage1", "stage2"), default="stage2")
    f.set_defaults(func=cmd_flops)

    w = sub.add_parser("sweep", help="teacher/student compute allocation sweep")
    w.add_argument("--config")
    w.add_argument("--dataset", required=True)
    w.add_argument("--total-steps", type=int, required=True)
    w.add_argument("--splits", help="comma list of teacher:student step pairs")
    w.add_argument("--seed", type=int)
    w.add_argument("--no-baseline", action="store_true")
    w.add_argument("--out", required=True)
    w.add_argument("--force", action="store_true")
    w.set_defaults(func=cmd_sweep)

    c = sub.add_parser("correlate", help="probe accuracy vs training loss over checkpoints")
    c.add_argument("--runs", required=True, help="glob of run directories")
    c.add_argument("--dataset", required=True)
    c.add_argument("--config")
    c.add_argument("--task", choices=("motion", "shape"))
    c.add_argument("--epochs", type=int)
    c.add_argument("--blocks", type=int)
    c.add_argument("--window", type=int, default=50)
    c.add_argument("--out")
    c.add_argument("--force", action="store_true")
    c.set_defaults(func=cmd_correlate)

    m = sub.add_parser("mask-stats", help="achieved mask ratios and per-position frequency")
    m.add_argument("--strategy", default="multiblock",
                   choices=("multiblock", "random_tube", "multi_random_tube", "causal"))
    m.add_argument("--grid", default="8x8x8")
    m.add_argument("--samples", type=int, default=10_000)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--ratio", type=float, default=0.9)
    m.add_argument("--short-scale", type=float, default=0.15)
    m.add_argument("--long-scale", type=float, default=0.7)
    m.add_argument("--out")
    m.add_argument("--force", action="store_true")
    m.set_defaults(func=cmd_mask_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 2
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
        return args.func(args)
    except SaltError as exc:
        _emit({"error": str(exc), "type": type(exc).__name__, "code": getattr(exc, "code", None)}, sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        _emit({"error": str(exc), "type": type(exc).__name__, "code": None}, sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
