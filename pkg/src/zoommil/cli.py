"""Command-line entry point: ``zoommil <command> [flags]``.

Every command writes its outputs (plus ``config.json`` echoing the parsed flags)
under ``--out-dir``. Outputs are staged in a temporary directory and moved into
place only on success. Failures print one line ``error: <Kind>: <message>`` to
stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench, heatmap
from .core import ArgumentError, ZoomError
from .model import export_attention, infer, infer_full_grid, load_checkpoint, save_checkpoint
from .synth import SynthConfig, generate_dataset, load_dataset, load_patches, save_dataset
from .train import (
    ARMS,
    TrainConfig,
    ablate,
    build_model,
    evaluate,
    fit,
    format_table,
    k_sweep,
    summarize,
)

CHECKPOINT_NAME = "checkpoint.zmc"


def _schedule(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(k) for k in text.split(",") if k.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"schedule must be comma-separated integers, got {text!r}")


def _int_list(text: str) -> list[int]:
    return list(_schedule(text))


class _Parser(argparse.ArgumentParser):
    """Reports usage errors on one line, in the same shape as runtime errors."""

    def error(self, message):
        self.exit(2, f"error: ArgumentError: {self.prog}: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--seed", type=int, default=0, help="master seed")
    g.add_argument("--threads", type=int, default=1, help="worker threads for evaluation/benchmarks")
    g.add_argument("--out-dir", type=Path, default=Path("out"), help="output directory")
    g.add_argument("--verbose", action="store_true", help="log progress to stderr")

    model_opts = _Parser(add_help=False)
    mg = model_opts.add_argument_group("model")
    mg.add_argument("--schedule", type=_schedule, default=None,
                    help="K per zoom step, comma-separated; None means 4 at every step")
    mg.add_argument("--sigma", type=float, default=0.05, help="perturbed Top-K noise scale")
    mg.add_argument("--samples", type=int, default=100, help="perturbed Top-K Monte-Carlo samples")
    mg.add_argument("--agg", choices=("sum", "concat", "highest"), default="sum",
                    help="multi-level aggregation")
    mg.add_argument("--hidden-att", type=int, default=None, help="attention hidden width L; None means D/2")

    train_opts = _Parser(add_help=False)
    tg = train_opts.add_argument_group("training")
    tg.add_argument("--epochs", type=int, default=100, help="training epochs")
    tg.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    tg.add_argument("--patience", type=int, default=5, help="plateau scheduler patience")
    tg.add_argument("--decay", type=float, default=0.8, help="plateau scheduler decay")
    tg.add_argument("--select-metric", choices=("val_loss", "val_f1"), default="val_loss",
                    help="model selection metric")

    data_opt = _Parser(add_help=False)
    data_opt.add_argument("--dataset", type=Path, required=True, default=argparse.SUPPRESS, help="dataset directory written by 'generate'")

    ckpt_opt = _Parser(add_help=False)
    ckpt_opt.add_argument("--checkpoint", type=Path, required=True, default=argparse.SUPPRESS, help="checkpoint file written by 'train'")

    parser = _Parser(prog="zoommil", description="Multi-level differentiable zooming MIL.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    d = SynthConfig()
    p.add_argument("--n1", type=int, default=d.n1, help="level-1 patches per sample")
    p.add_argument("--levels", type=int, default=d.levels, help="magnification levels M")
    p.add_argument("--patch-size", type=int, default=d.patch_shape[0], help="square patch side in pixels")
    p.add_argument("--channels", type=int, default=d.patch_shape[2], help="patch channels")
    p.add_argument("--dim", type=int, default=d.D, help="feature dimension D")
    p.add_argument("--classes", type=int, default=d.C, help="number of classes C")
    p.add_argument("--informative-fraction", type=float, default=d.informative_fraction,
                   help="fraction of level-1 parents carrying signal")
    p.add_argument("--cue", type=float, default=d.cue_strength, help="localisation cue amplitude")
    p.add_argument("--motif", type=float, default=d.motif_strength, help="class motif amplitude")
    p.add_argument("--noise", type=float, default=d.noise_std, help="texture noise std")
    p.add_argument("--n-train", type=int, default=d.n_train, help="training samples")
    p.add_argument("--n-val", type=int, default=d.n_val, help="validation samples")
    p.add_argument("--n-test", type=int, default=d.n_test, help="test samples")
    p.add_argument("--no-patches", action="store_true", help="store features only")

    p = sub.add_parser("train", parents=[common, data_opt, model_opts, train_opts], help="train a model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--arm", choices=sorted(ARMS), default="diff_topk", help="model variant")

    p = sub.add_parser("infer", parents=[common, data_opt, ckpt_opt], help="deterministic inference",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--split", default="test", help="dataset split")
    p.add_argument("--mode", choices=("zoom", "full-grid"), default="zoom", help="zooming or full-grid encoding")

    p = sub.add_parser("bench", parents=[common, data_opt, ckpt_opt], help="FLOPs and throughput report",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--mode", choices=("zoom", "full-grid", "both"), default="both", help="modes to measure")
    p.add_argument("--split", default="test", help="dataset split")
    p.add_argument("--limit", type=int, default=50, help="number of samples to time")
    p.add_argument("--runs", type=int, default=3, help="timed runs after one warm-up")
    p.add_argument("--batch-size", type=int, default=16, help="images per inference batch")

    p = sub.add_parser("ablate", parents=[common, data_opt, model_opts, train_opts], help="ablation table",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--arm", action="append", choices=sorted(ARMS), default=None,
                   help="arm to run, repeatable; None means diff_topk, random_k, nondiff_topk")
    p.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated training seeds")

    p = sub.add_parser("sweep", parents=[common, data_opt, model_opts, train_opts], help="accuracy versus K",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--ks", type=_int_list, default=[1, 2, 4, 8, 12, 16], help="comma-separated K values")
    p.add_argument("--seeds", type=_int_list, default=[0], help="comma-separated training seeds")

    p = sub.add_parser("attnmap", parents=[common, data_opt, ckpt_opt], help="attention CSV and PGM heatmap",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--level", type=int, default=1, help="magnification level (1-based)")
    p.add_argument("--sample", default=None, help="sample id; None means every sample of --split")
    p.add_argument("--split", default="test", help="dataset split used when --sample is absent")
    p.add_argument("--kind", choices=("auto", "select", "pool"), default="auto", help="which attention to export")
    p.add_argument("--scale", type=int, default=8, help="heatmap pixels per patch")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _echo_config(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k == "func":
            continue
        out[k] = str(v) if isinstance(v, Path) else (list(v) if isinstance(v, tuple) else v)
    return out


def _model_kwargs(args) -> dict:
    kw = {"sigma": args.sigma, "num_samples": args.samples, "aggregation": args.agg}
    if args.schedule is not None:
        kw["schedule"] = args.schedule
    if args.hidden_att is not None:
        kw["L"] = args.hidden_att
    return kw


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, patience=args.patience, decay=args.decay, epochs=args.epochs,
                       select_metric=args.select_metric, seed=args.seed if seed is None else seed,
                       threads=args.threads)


def _pyramid_for(ds, index: int):
    """Patch pyramid from disk when the dataset stored patches, otherwise the features."""
    s = ds.samples[index]
    if ds.root is not None and (ds.root / s.id / "patches").exists():
        return load_patches(ds.root, s.id), ds.encoder
    return s.features, None


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


# ---------------------------------------------------------------------------
# commands (each writes into the staging directory ``stage``)
# ---------------------------------------------------------------------------

def cmd_generate(args, stage: Path) -> None:
    cfg = SynthConfig(
        n1=args.n1, levels=args.levels, patch_shape=(args.patch_size, args.patch_size, args.channels),
        D=args.dim, C=args.classes, informative_fraction=args.informative_fraction,
        cue_strength=args.cue, motif_strength=args.motif, noise_std=args.noise, seed=args.seed,
        n_train=args.n_train, n_val=args.n_val, n_test=args.n_test,
    )
    ds = generate_dataset(cfg)
    save_dataset(ds, stage / "dataset", with_patches=not args.no_patches)


def cmd_train(args, stage: Path) -> None:
    ds = load_dataset(args.dataset)
    model = build_model(ds, args.arm, seed=args.seed, **_model_kwargs(args))
    res = fit(ds, model, _train_config(args))
    save_checkpoint(res.model, stage / CHECKPOINT_NAME)
    res.write_log(stage / "epoch_log.jsonl")
    metrics = {}
    for split in ("val", "test"):
        if ds.splits.get(split):
            ev = evaluate(res.model, ds.split(split), args.threads)
            metrics[split] = {"accuracy": ev.accuracy, "f1": ev.f1, "loss": ev.loss}
    metrics["best_epoch"] = res.best_epoch
    (stage / "metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def cmd_infer(args, stage: Path) -> None:
    ds = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    fn = infer if args.mode == "zoom" else infer_full_grid
    lines, totals = [], {"encoder_calls": 0, "encoder_flops": 0, "head_flops": 0}
    correct = 0
    for i in ds.splits.get(args.split, []) or _missing_split(args.split):
        pyr, enc = _pyramid_for(ds, i)
        res = fn(pyr, model, enc)
        led = res.ledger.as_dict()
        led.pop("wall_time")  # keeps the file reproducible byte-for-byte
        s = ds.samples[i]
        correct += res.prediction == s.label
        lines.append({"id": s.id, "label": s.label, "prediction": res.prediction,
                      "logits": [float(x) for x in res.logits], "ledger": led})
        totals["encoder_calls"] += led["total_encoder_calls"]
        totals["encoder_flops"] += led["encoder_flops"]
        totals["head_flops"] += led["head_flops"]
    (stage / "predictions.jsonl").write_text(bench.format_jsonl(lines), encoding="utf-8")
    summary = {"mode": args.mode, "n": len(lines), "accuracy": correct / max(1, len(lines)), **totals}
    (stage / "ledger.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _missing_split(name):
    raise ArgumentError(f"dataset has no split {name!r}")


def cmd_bench(args, stage: Path) -> None:
    ds = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    idx = (ds.splits.get(args.split) or _missing_split(args.split))[: args.limit]
    loaded = [_pyramid_for(ds, i) for i in idx]
    pyramids = [p for p, _ in loaded]
    encoder = loaded[0][1]
    labels = [ds.samples[i].label for i in idx]
    modes = ("zoom", "full_grid") if args.mode == "both" else (args.mode.replace("-", "_"),)
    rows, points = [], []
    for mode in modes:
        rep = bench.measure_throughput(model, pyramids, mode, args.threads, encoder, args.runs, args.batch_size)
        led = bench.count_flops(model, ds.cfg.sizes, mode, encoder.flops_per_patch if encoder else 0)
        acc = float(np.mean(np.equal(rep.predictions, labels)))
        rows.append({"mode": mode, "accuracy": acc, "images_per_hour": round(rep.images_per_hour, 1),
                     "median_time_s": round(rep.median_time, 6), "threads": args.threads,
                     "batch_size": args.batch_size,
                     "encoder_calls": led.total_encoder_calls, "encoder_flops": led.encoder_flops,
                     "head_flops": led.head_flops, "total_flops": led.total})
        points.append((mode, acc, rep.images_per_hour))
    frontier = bench.frontier_report(points)
    (stage / "report.tsv").write_text(bench.format_delimited(rows), encoding="utf-8")
    (stage / "report.jsonl").write_text(bench.format_jsonl(rows), encoding="utf-8")
    (stage / "frontier.tsv").write_text(bench.format_delimited(frontier), encoding="utf-8")


def cmd_ablate(args, stage: Path) -> None:
    ds = load_dataset(args.dataset)
    arms = args.arm or ["diff_topk", "random_k", "nondiff_topk"]
    results = ablate(ds, arms, _train_config(args), seeds=args.seeds, **_model_kwargs(args))
    rows = summarize(results)
    (stage / "ablation.jsonl").write_text(bench.format_jsonl([asdict(r) for r in results]), encoding="utf-8")
    (stage / "ablation.tsv").write_text(bench.format_delimited(rows), encoding="utf-8")
    (stage / "table.txt").write_text(format_table(rows) + "\n", encoding="utf-8")


def cmd_sweep(args, stage: Path) -> None:
    ds = load_dataset(args.dataset)
    kw = _model_kwargs(args)
    kw.pop("schedule", None)
    rows = k_sweep(ds, args.ks, _train_config(args), seeds=args.seeds, **kw)
    (stage / "k_sweep.tsv").write_text(bench.format_delimited(rows), encoding="utf-8")
    (stage / "table.txt").write_text(format_table(rows) + "\n", encoding="utf-8")


def cmd_attnmap(args, stage: Path) -> None:
    ds = load_dataset(args.dataset)
    model = load_checkpoint(args.checkpoint)
    if args.sample is not None:
        ids = {s.id: i for i, s in enumerate(ds.samples)}
        if args.sample not in ids:
            raise ArgumentError(f"unknown sample {args.sample!r}")
        idx = [ids[args.sample]]
    else:
        idx = ds.splits.get(args.split) or _missing_split(args.split)
    summary = []
    for i in idx:
        s = ds.samples[i]
        pyr, enc = _pyramid_for(ds, i)
        res = infer(pyr, model, enc)
        scores = export_attention(res, args.level, args.kind)
        _write_csv(stage / f"{s.id}_level{args.level}.csv", ["patch_index", "weight"],
                   [(p, repr(w)) for p, w in scores])
        img = heatmap.render(scores, args.level, ds.cfg.n1, args.scale)
        heatmap.write_pgm(img, stage / f"{s.id}_level{args.level}.pgm")
        top = max(scores, key=lambda x: x[1])[0]
        summary.append({"id": s.id, "label": s.label, "prediction": res.prediction, "argmax_patch": top,
                        "informative": [int(x) for x in s.informative],
                        "hit": bool(args.level == 1 and top in set(s.informative.tolist()))})
    (stage / "attnmap_summary.jsonl").write_text(bench.format_jsonl(summary), encoding="utf-8")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "bench": cmd_bench,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "attnmap": cmd_attnmap,
}


def _commit(stage: Path, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for entry in sorted(stage.iterdir()):
        dst = out_dir / entry.name
        if dst.is_dir() and not dst.is_symlink():
            old = out_dir / (entry.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(dst, old)
            os.replace(entry, dst)
            shutil.rmtree(old)
        else:
            os.replace(entry, dst)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=f".{args.command}-", dir=args.out_dir))
        try:
            COMMANDS[args.command](args, stage)
            (stage / "config.json").write_text(json.dumps(_echo_config(args), indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")
            _commit(stage, args.out_dir)
        finally:
            shutil.rmtree(stage, ignore_errors=True)
    except (ZoomError, OSError, ValueError, KeyError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
