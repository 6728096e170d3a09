"""Command-line entry point: ``fscn train|eval|ablate|gradcheck|predict|synth``.

Exit codes: 0 success, 1 failed gradient check or diverged training,
2 bad configuration or missing/corrupt input files.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig, load_run_config
from .data import (
    DataError,
    DepthSample,
    generate_synthetic,
    load_split,
    materialize,
    read_depth_png,
    read_rgb_png,
    write_depth_png,
)
from .losses import TABLE_COLUMNS, EmptyMaskError, MetricsReport, eval_metrics, format_table, valid_mask
from .model import ConfigError, ModelConfig, build_model, param_count
from .plotting import plot_ablation, plot_depth_panel, plot_loss_curve
from .tensor import ShapeError
from .train import CheckpointError, TrainingError, TrainResult, load_checkpoint, predict, train

log = logging.getLogger("fscn")

# (label, model overrides); row order is the table order
GRIDS = {
    "skip": [
        ("full-skip", {"skip_mode": "full"}),
        ("same-skip", {"skip_mode": "same"}),
        ("no-skip", {"skip_mode": "none"}),
    ],
    "acm": [
        ("full", {"skip_mode": "full"}),
        ("w/o CW", {"skip_mode": "full", "use_concat_weights": False}),
        ("w/o SE", {"skip_mode": "full", "use_se": False}),
        ("w/o CW&SE", {"skip_mode": "full", "use_concat_weights": False, "use_se": False}),
    ],
}

EVAL_NOTE = "valid-mask evaluation, no crop"


# --------------------------------------------------------------------------
# helpers


def _config(args) -> RunConfig:
    try:
        cfg = load_run_config(args.config)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(f"{args.config}: {e}") from None
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    cfg.check()
    return cfg


def _fit(sample: DepthSample, h: int, w: int) -> DepthSample:
    """Centre-crop a sample to the model input size."""
    sh, sw = sample.hw
    if (sh, sw) == (h, w):
        return sample
    if sh < h or sw < w:
        raise DataError(f"sample {sample.id} is {sh}x{sw}, smaller than the model input {h}x{w}")
    top, left = (sh - h) // 2, (sw - w) // 2
    return DepthSample(
        sample.rgb[:, :, top : top + h, left : left + w].copy(),
        sample.depth_m[top : top + h, left : left + w].copy(),
        id=sample.id,
    )


def load_data(cfg: RunConfig, split: str) -> list:
    m, d = cfg.model, cfg.data
    if d.root is not None:
        samples = load_split(d.root, split)
        if not samples:
            raise DataError(f"split {split!r} under {d.root} is empty")
        return samples
    syn = d.synthetic
    if split == "train":
        n, offset = syn.n_train, 0
    elif split == "test":
        n, offset = syn.n_test, syn.n_train
    else:
        raise DataError(f"unknown split {split!r}")
    return generate_synthetic(syn.seed, n, m.input_h, m.input_w, m.max_depth_m, syn.invalid_frac, offset=offset)


def evaluate(model, samples: Sequence[DepthSample], cap_m: float):
    """Metrics over every valid pixel of ``samples`` plus the stacked predictions."""
    h, w = model.config.input_h, model.config.input_w
    samples = [_fit(s, h, w) for s in samples]
    rgb = np.concatenate([s.rgb for s in samples])
    pred = predict(model, rgb)
    gt = np.stack([s.depth_m for s in samples])
    return eval_metrics(pred, gt, valid_mask(gt, cap_m), cap_m), pred, samples


def write_loss_log(path, loss_log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in loss_log:
            writer.writerow([step, repr(float(lr)), repr(float(loss))])


def run_training(cfg: RunConfig, out: Path, resume=None) -> TrainResult:
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.model_config.to_dict() != cfg.model.to_dict():
            raise ConfigError(f"model: checkpoint {resume} was trained with a different model section")
        model = ckpt.to_model()
    else:
        ckpt = None
        model = build_model(cfg.model, seed=cfg.train.seed)
    samples = load_data(cfg, "train")
    if cfg.data.augment is None:
        samples = [_fit(s, cfg.model.input_h, cfg.model.input_w) for s in samples]
    result = train(model, samples, cfg.train, cfg.data.augment, cfg.data.depth_cap_m, checkpoint_dir=out, resume=ckpt)
    write_loss_log(out / "loss_log.csv", result.loss_log)
    plot_loss_curve(result.loss_log, out / "loss_curve.png")
    return result


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.output_dir)
    result = run_training(cfg, out, args.resume)
    last = result.loss_log[-1][2] if result.loss_log else float("nan")
    print(f"trained {len(result.loss_log)} steps, final loss {last:.4f}; checkpoint {out / 'final.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    cap = cfg.data.depth_cap_m
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    samples = load_data(cfg, "test")
    if args.predictions:
        # score depth pngs named after the sample ids instead of running the model
        h, w = model.config.input_h, model.config.input_w
        samples = [_fit(s, h, w) for s in samples]
        pred_dir = Path(args.predictions)
        pred = []
        for s in samples:
            p = pred_dir / f"{s.id}.png"
            if not p.exists():
                raise DataError(f"missing prediction {p}")
            pred.append(read_depth_png(p))
        pred = np.stack(pred)
        gt = np.stack([s.depth_m for s in samples])
        report = eval_metrics(pred, gt, valid_mask(gt, cap), cap)
    else:
        report, pred, samples = evaluate(model, samples, cap)
    (out / "metrics.json").write_text(report.to_json(checkpoint=str(args.checkpoint), note=EVAL_NOTE) + "\n")
    table = format_table([(model.config.skip_mode.value + "-skip", report, {})])
    (out / "metrics.txt").write_text(table + "\n")
    rgb = np.concatenate([s.rgb for s in samples[:4]])
    gt = np.stack([s.depth_m for s in samples[:4]])
    plot_depth_panel(rgb, gt, pred[:4], out / "depth_panel.png", cap)
    print(table)
    return 0


def _ablation_cell(payload: dict) -> dict:
    cfg = RunConfig.from_dict(payload["config"])
    out = Path(payload["out"])
    result = run_training(cfg, out)
    report, _, _ = evaluate(result.model, load_data(cfg, "test"), cfg.data.depth_cap_m)
    (out / "metrics.json").write_text(report.to_json(note=EVAL_NOTE) + "\n")
    return {"label": payload["label"], "seed": cfg.train.seed, "params": param_count(result.model),
            "metrics": report.to_dict()}


def run_ablation(cfg: RunConfig, grid: str, seeds: Sequence[int], jobs: int = 1) -> dict:
    root = Path(cfg.output_dir) / f"ablate_{grid}"
    cells = []
    for label, overrides in GRIDS[grid]:
        for seed in seeds:
            c = copy.deepcopy(cfg)
            c.model = ModelConfig.from_dict({**cfg.model.to_dict(), **overrides})
            c.train.seed = seed
            slug = label.replace("/", "").replace("&", "_").replace(" ", "_")
            c.output_dir = str(root / slug / f"seed{seed}")
            cells.append({"label": label, "config": c.to_dict(), "out": c.output_dir})
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_ablation_cell, cells))
    else:
        results = [_ablation_cell(c) for c in cells]

    rows, summary = [], []
    for label, _ in GRIDS[grid]:
        runs = [r for r in results if r["label"] == label]
        med = {k: statistics.median(r["metrics"][k] for r in runs) for k in TABLE_COLUMNS}
        n_pix = runs[0]["metrics"]["n_pixels"]
        rows.append((label, MetricsReport(n_pixels=n_pix, **med), {"#params": runs[0]["params"]}))
        summary.append({"label": label, "params": runs[0]["params"], "median": med,
                        "per_seed": {str(r["seed"]): r["metrics"] for r in runs}})
    table = format_table(rows, extra=("#params",))
    (root / "table.txt").write_text(f"median over seeds {list(seeds)}; {EVAL_NOTE}\n{table}\n")
    with open(root / "table.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "params", *TABLE_COLUMNS])
        for s in summary:
            writer.writerow([s["label"], s["params"], *(repr(s["median"][k]) for k in TABLE_COLUMNS)])
    (root / "results.json").write_text(json.dumps({"grid": grid, "seeds": list(seeds), "rows": summary}, indent=2) + "\n")
    plot_ablation([s["label"] for s in summary], [s["median"]["rms"] for s in summary],
                  [s["params"] for s in summary], root / "ablation.png")
    return {"table": table, "rows": summary, "dir": root}


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = args.seeds if args.seeds else [cfg.train.seed]
    result = run_ablation(cfg, args.grid, seeds, args.jobs)
    print(result["table"])
    print(f"written to {result['dir']}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    reports = run_suite(args.seed or 0)
    for r in reports:
        print(r.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed")
    return 1 if failed else 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint).to_model()
    h, w = model.config.input_h, model.config.input_w
    paths = [Path(p) for p in args.rgb]
    out = Path(args.out)
    many = len(paths) > 1 or out.is_dir() or args.out.endswith("/")
    if many:
        out.mkdir(parents=True, exist_ok=True)
    for p in paths:
        rgb = read_rgb_png(p)
        sample = _fit(DepthSample(rgb, np.zeros(rgb.shape[2:], np.float32), p.stem), h, w)
        depth = predict(model, sample.rgb)[0]
        target = out / f"{p.stem}.png" if many else out
        target.parent.mkdir(parents=True, exist_ok=True)
        write_depth_png(target, depth)
        print(f"{p} -> {target}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    train_set = generate_synthetic(args.seed, args.n, args.height, args.width, args.max_depth, args.invalid_frac)
    materialize(train_set, out, "train")
    test_set = generate_synthetic(args.seed, args.n_test, args.height, args.width, args.max_depth, args.invalid_frac, offset=args.n)
    materialize(test_set, out, "test")
    print(f"wrote {args.n} train and {args.n_test} test samples to {out}")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fscn", description="Full-skip-connection depth network: train, evaluate, ablate.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--predictions", help="directory of <id>.png depth maps to score instead of running the model")
    p.add_argument("--out", help="output directory (default <output_dir>/eval)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate an ablation grid")
    p.add_argument("--config", required=True)
    p.add_argument("--grid", choices=sorted(GRIDS), required=True)
    p.add_argument("--seeds", type=int, nargs="+", help="default: the config's train seed")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_ablate, seed=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and the model loss")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("predict", help="write 16-bit depth pngs (metres x 256)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True, nargs="+")
    p.add_argument("--out", required=True, help="output png, or a directory when several images are given")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="materialise a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True, help="training samples")
    p.add_argument("--n-test", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--max-depth", type=float, default=10.0)
    p.add_argument("--invalid-frac", type=float, default=0.02)
    p.set_defaults(func=cmd_synth)
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, CheckpointError, EmptyMaskError, ShapeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
