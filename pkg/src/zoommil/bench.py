"""FLOP accounting, wall-clock throughput and efficiency-frontier reports.

Convention: a multiply-accumulate is 2 FLOPs and every elementwise
nonlinearity 1 FLOP. Hard Top-K and gathers are comparisons / copies and count
as zero. Only ratios between modes are meant to be compared across systems.
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

from .attention import ga_flops
from .core import ArgumentError
from .model import (
    FlopLedger,
    ZoomModel,
    aggregate_flops,
    classifier_flops,
    infer_batch,
    infer_full_grid_batch,
)

MODES = ("zoom", "full_grid")


def count_flops(model: ZoomModel, sizes: Sequence[int], mode: str = "zoom", encoder_flops_per_patch: int = 0) -> FlopLedger:
    """Analytic ledger for one sample with per-level patch counts ``sizes``."""
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")
    model.check_schedule(sizes)
    M, D, L = model.M, model.D, model.L
    if mode == "zoom":
        calls = [sizes[0]] + [4 * k for k in model.schedule]
        head = sum(ga_flops(n, D, L) for n in calls)
        if model.dual and model.selection != "random":
            head += sum(ga_flops(n, D, L) for n in calls[:-1])
    else:
        calls = [0] * (M - 1) + [sizes[-1]]
        head = ga_flops(sizes[-1], D, L)
    head += aggregate_flops(model) + classifier_flops(model.classifier_in, model.hidden, model.C)
    return FlopLedger(calls, sum(calls) * encoder_flops_per_patch, head)


@dataclass
class ThroughputReport:
    mode: str
    threads: int
    n_images: int
    run_times: list[float]        # seconds per full pass, warm-up excluded
    latencies: list[float]        # per-image seconds (batch time / batch size) from the median run
    predictions: list[int]
    batch_size: int = 1

    @property
    def median_time(self) -> float:
        return statistics.median(self.run_times)

    @property
    def images_per_hour(self) -> float:
        return 3600.0 * self.n_images / self.median_time

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "threads": self.threads,
            "n_images": self.n_images,
            "batch_size": self.batch_size,
            "median_time": self.median_time,
            "images_per_hour": self.images_per_hour,
            "run_times": self.run_times,
            "latency_median": statistics.median(self.latencies) if self.latencies else 0.0,
        }


def measure_throughput(model: ZoomModel, pyramids: Sequence, mode: str = "zoom", threads: int = 1,
                       encoder=None, runs: int = 3, batch_size: int = 16) -> ThroughputReport:
    """Median wall-clock over ``runs`` passes after one discarded warm-up pass.

    Images are processed in batches of ``batch_size``; with ``threads > 1``
    batches are spread over a thread pool.
    """
    if mode not in MODES:
        raise ArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")
    if len(pyramids) == 0:
        raise ArgumentError("empty dataset")
    if runs < 3:
        raise ArgumentError("need at least 3 timed runs")
    if batch_size < 1 or threads < 1:
        raise ArgumentError("batch_size and threads must be >= 1")
    fn = infer_batch if mode == "zoom" else infer_full_grid_batch
    batches = [pyramids[i:i + batch_size] for i in range(0, len(pyramids), batch_size)]

    def one(batch):
        t0 = time.perf_counter()
        res = fn(batch, model, encoder)
        dt = (time.perf_counter() - t0) / len(batch)
        return [(r.prediction, dt) for r in res]

    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        passes = []
        for _ in range(runs + 1):
            t0 = time.perf_counter()
            out = list(pool.map(one, batches)) if pool else [one(b) for b in batches]
            passes.append((time.perf_counter() - t0, [x for b in out for x in b]))
    finally:
        if pool:
            pool.shutdown()
    timed = passes[1:]
    times = [t for t, _ in timed]
    median_pass = sorted(timed, key=lambda x: x[0])[len(timed) // 2][1]
    return ThroughputReport(
        mode, threads, len(pyramids), times,
        [lat for _, lat in median_pass], [p for p, _ in median_pass], batch_size,
    )


def frontier_report(points: Sequence[tuple[str, float, float]]) -> list[dict]:
    """Mark Pareto-optimal ``(name, accuracy, throughput)`` points; sorted by throughput, descending."""
    if len(points) == 0:
        raise ArgumentError("no points")
    rows = []
    for name, acc, thr in points:
        dominated = any(
            a >= acc and t >= thr and (a > acc or t > thr)
            for n, a, t in points if n != name
        )
        rows.append({"name": name, "accuracy": acc, "throughput": thr, "on_frontier": not dominated})
    rows.sort(key=lambda r: (-r["throughput"], -r["accuracy"]))
    return rows


def format_delimited(rows: Sequence[dict], sep: str = "\t") -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    lines = [sep.join(keys)]
    for r in rows:
        lines.append(sep.join(str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"


def format_jsonl(rows: Sequence[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
