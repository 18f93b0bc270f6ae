import json
import os
from fractions import Fraction

import numpy as np
import pytest

from zoommil.bench import (
    count_flops,
    format_delimited,
    format_jsonl,
    frontier_report,
    measure_throughput,
)
from zoommil.core import ArgumentError, ScheduleError
from zoommil.model import ZoomModel, infer, infer_full_grid
from zoommil.synth import SynthConfig, generate_dataset

from conftest import random_pyramid

E = 32832  # default synthetic encoder: 2 * 256 * 64 + 64


@pytest.fixture(scope="module")
def small():
    ds = generate_dataset(SynthConfig(n_train=1, n_val=1, n_test=6, seed=5))
    return ds, [ds.patches(i) for i in ds.splits["test"]]


class TestCountFlops:
    def test_default_numbers(self):
        m = ZoomModel.create(64, 3, (12, 12))
        z = count_flops(m, [16, 64, 256], "zoom", E)
        f = count_flops(m, [16, 64, 256], "full_grid", E)
        assert z.encoder_calls == [16, 48, 48] and f.encoder_calls == [0, 0, 256]
        assert z.encoder_flops == 3677184
        assert Fraction(z.encoder_flops, f.encoder_flops) == Fraction(112, 256) == Fraction(7, 16)
        assert z.total == z.encoder_flops + z.head_flops

    def test_single_level_zoom_is_full_grid(self):
        m = ZoomModel.create(8, 2, ())
        assert count_flops(m, [16], "zoom", 10).as_dict() == count_flops(m, [16], "full_grid", 10).as_dict()

    def test_matches_measured_ledger(self, small):
        ds, pps = small
        for sched, sel in [((12, 12), "diff"), ((3, 7), "random"), ((4, 4), "hard")]:
            m = ZoomModel.create(64, 3, sched, seed=1, selection=sel)
            for mode, fn in (("zoom", infer), ("full_grid", infer_full_grid)):
                want = count_flops(m, ds.cfg.sizes, mode, E)
                for pp in pps:
                    got = fn(pp, m, ds.encoder).ledger
                    assert (got.encoder_calls, got.encoder_flops, got.head_flops) == \
                        (want.encoder_calls, want.encoder_flops, want.head_flops)

    def test_pure_function_of_shapes(self):
        a = count_flops(ZoomModel.create(16, 4, (2, 3), seed=0), [8, 32, 128], "zoom", 7)
        b = count_flops(ZoomModel.create(16, 4, (2, 3), seed=9), [8, 32, 128], "zoom", 7)
        assert a == b

    def test_errors(self):
        m = ZoomModel.create(8, 2, (4,))
        with pytest.raises(ArgumentError):
            count_flops(m, [4, 16], "dense")
        with pytest.raises(ScheduleError):
            count_flops(m, [2, 8], "zoom")


class TestThroughput:
    def test_report_fields(self, small):
        ds, pps = small
        m = ZoomModel.create(64, 3, (4, 4), seed=0)
        rep = measure_throughput(m, pps, "zoom", encoder=ds.encoder, runs=3, batch_size=4)
        assert len(rep.run_times) == 3 and len(rep.latencies) == 6 and rep.n_images == 6
        assert rep.predictions == [infer(pp, m, ds.encoder).prediction for pp in pps]
        d = rep.as_dict()
        assert d["mode"] == "zoom" and d["threads"] == 1 and d["batch_size"] == 4
        assert d["images_per_hour"] == pytest.approx(3600 * 6 / rep.median_time)

    def test_threads_give_identical_results(self, small):
        ds, pps = small
        m = ZoomModel.create(64, 3, (4, 4), seed=0)
        one = measure_throughput(m, pps, "full_grid", 1, ds.encoder, batch_size=2)
        two = measure_throughput(m, pps, "full_grid", 2, ds.encoder, batch_size=2)
        assert one.predictions == two.predictions and two.threads == 2

    @pytest.mark.skipif((os.cpu_count() or 1) < 2, reason="needs more than one CPU")
    def test_threads_do_not_slow_down(self):
        rng = np.random.default_rng(1)
        pyrs = [random_pyramid(rng, n1=16, M=3, D=64, dtype=np.float32, sid=str(i)) for i in range(64)]
        m = ZoomModel.create(64, 3, (4, 4), seed=0)
        t1 = measure_throughput(m, pyrs, "full_grid", 1, runs=5, batch_size=8).median_time
        t2 = measure_throughput(m, pyrs, "full_grid", 2, runs=5, batch_size=8).median_time
        assert t2 <= t1

    def test_time_scales_linearly(self):
        rng = np.random.default_rng(0)
        pyrs = [random_pyramid(rng, n1=16, M=3, D=64, dtype=np.float32, sid=str(i)) for i in range(64)]
        m = ZoomModel.create(64, 3, (4, 4), seed=0)
        t1 = measure_throughput(m, pyrs[:32], "full_grid", runs=5, batch_size=8).median_time
        t2 = measure_throughput(m, pyrs, "full_grid", runs=5, batch_size=8).median_time
        assert 0.8 * 2 <= t2 / t1 <= 1.2 * 2

    def test_errors(self, small):
        ds, pps = small
        m = ZoomModel.create(64, 3, (4, 4))
        with pytest.raises(ArgumentError):
            measure_throughput(m, [], "zoom")
        with pytest.raises(ArgumentError):
            measure_throughput(m, pps, "zoom", runs=2)
        with pytest.raises(ArgumentError):
            measure_throughput(m, pps, "sparse")
        with pytest.raises(ArgumentError):
            measure_throughput(m, pps, "zoom", batch_size=0)


class TestFrontier:
    def test_single_point(self):
        assert frontier_report([("a", 0.5, 10.0)])[0]["on_frontier"]

    def test_dominated_excluded(self):
        rows = frontier_report([("slow", 0.8, 10.0), ("fast", 0.9, 20.0)])
        assert [(r["name"], r["on_frontier"]) for r in rows] == [("fast", True), ("slow", False)]

    def test_incomparable(self):
        rows = frontier_report([("acc", 0.9, 10.0), ("thr", 0.7, 50.0), ("bad", 0.6, 5.0)])
        assert {r["name"]: r["on_frontier"] for r in rows} == {"acc": True, "thr": True, "bad": False}
        assert [r["name"] for r in rows] == ["thr", "acc", "bad"]

    def test_ties_are_not_dominated(self):
        rows = frontier_report([("a", 0.9, 10.0), ("b", 0.9, 10.0)])
        assert all(r["on_frontier"] for r in rows)

    def test_empty(self):
        with pytest.raises(ArgumentError):
            frontier_report([])


def test_formatters():
    rows = [{"mode": "zoom", "x": 1}, {"mode": "full_grid", "x": 2.5}]
    assert format_delimited(rows) == "mode\tx\nzoom\t1\nfull_grid\t2.5\n"
    assert format_delimited(rows, ",").splitlines()[1] == "zoom,1"
    assert format_delimited([]) == ""
    assert [json.loads(l) for l in format_jsonl(rows).splitlines()] == rows
