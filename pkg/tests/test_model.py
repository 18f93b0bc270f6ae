import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zoommil.attention import ga_backward, ga_forward
from zoommil.core import (
    ArgumentError,
    AvailabilityError,
    CacheError,
    FeaturePyramid,
    FormatError,
    ScheduleError,
    ZoomError,
    make_rng,
    stable_hash,
)
from zoommil.model import (
    ZoomModel,
    export_attention,
    infer,
    infer_batch,
    infer_full_grid,
    load_checkpoint,
    save_checkpoint,
    train_backward,
    train_forward,
)
from zoommil.synth import SynthConfig, SynthEncoder, generate_dataset
from zoommil.train import cross_entropy

from conftest import random_pyramid
from oracles import max_rel_err, scalar_two_level_logits, surrogate_gradients, surrogate_loss


class CountingEncoder:
    def __init__(self, inner, fail_on=None):
        self.inner, self.fail_on, self.batches = inner, fail_on, []
        self.flops_per_patch = inner.flops_per_patch

    def encode(self, patches):
        self.batches.append(np.array(patches))
        if self.fail_on is not None and len(self.batches) == self.fail_on:
            raise RuntimeError("boom")
        return self.inner.encode(patches)


@pytest.fixture(scope="module")
def default_sample():
    ds = generate_dataset(SynthConfig(n_train=2, n_val=1, n_test=1))
    return ds, ds.patches(0)


def micro(selection="diff", dual=True, aggregation="sum", schedule=(2, 2), seed=1):
    return ZoomModel.create(4, 3, schedule, L=3, hidden=5, seed=seed, dtype=np.float64, selection=selection,
                            dual=dual, aggregation=aggregation, num_samples=40, sigma=0.3)


class TestModelStructure:
    def test_parameter_layout(self):
        m = ZoomModel.create(8, 3, (4, 4))
        assert m.M == 3 and m.L == 4 and m.hidden == 4
        assert sorted(k for k in m.params if k.startswith("sel")) == [f"sel{i}.{p}" for i in (0, 1) for p in "UVw"]
        assert m.params["ga2.V"].shape == (4, 8) and m.params["fc1.W"].shape == (4, 8)
        assert m.params["fc2.W"].shape == (3, 4)
        assert ZoomModel.create(8, 3, (4, 4), aggregation="concat").params["fc1.W"].shape == (4, 24)
        assert not any(k.startswith("sel") for k in ZoomModel.create(8, 3, (4,), dual=False).params)

    def test_seeded_init_is_reproducible(self):
        a, b = ZoomModel.create(8, 3, (4,), seed=5), ZoomModel.create(8, 3, (4,), seed=5)
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])

    def test_bad_switches(self):
        with pytest.raises(ArgumentError):
            ZoomModel.create(8, 3, (4,), selection="greedy")
        with pytest.raises(ArgumentError):
            ZoomModel.create(8, 3, (4,), aggregation="max")
        with pytest.raises(ScheduleError):
            ZoomModel.create(8, 3, (0,))

    def test_schedule_check_names_level(self):
        m = ZoomModel.create(8, 3, (4, 20))
        with pytest.raises(ScheduleError, match="level 2"):
            m.check_schedule([16, 64, 256])
        with pytest.raises(ScheduleError, match="levels"):
            m.check_schedule([16, 64])


class TestTraining:
    @pytest.mark.parametrize("selection,dual,aggregation", [
        ("diff", True, "sum"), ("diff", False, "sum"), ("diff", True, "concat"),
        ("hard", True, "highest"), ("random", True, "sum"),
    ])
    def test_gradients_match_surrogate(self, selection, dual, aggregation):
        rng = np.random.default_rng(stable_hash(f"{selection}-{dual}-{aggregation}"))
        pyr = random_pyramid(rng, n1=4, M=3, D=4)
        m = micro(selection, dual, aggregation)
        trace = train_forward(pyr, m, make_rng(0, 1))
        loss, gl = cross_entropy(trace.logits, 2)
        assert abs(loss - surrogate_loss(pyr.levels, m.params, m, trace, 2)) < 1e-12
        grads = train_backward(trace, m, gl)
        assert max_rel_err(grads, surrogate_gradients(pyr.levels, m, trace, 2)) < 1e-4

    @pytest.mark.parametrize("selection", ["hard", "random"])
    def test_no_selection_gradient_without_perturbation(self, selection):
        pyr = random_pyramid(np.random.default_rng(0), n1=4, M=3, D=4)
        m = micro(selection)
        trace = train_forward(pyr, m, make_rng(0))
        grads = train_backward(trace, m, cross_entropy(trace.logits, 0)[1])
        for k, g in grads.items():
            if k.startswith("sel"):
                assert not g.any(), k
        assert any(grads[k].any() for k in grads if k.startswith("ga"))

    def test_replay_reproduces_trace(self):
        pyr = random_pyramid(np.random.default_rng(1), n1=4, M=3, D=4)
        m = micro()
        t1 = train_forward(pyr, m, make_rng(3))
        t2 = train_forward(pyr, m, replay=t1)
        np.testing.assert_array_equal(t1.logits, t2.logits)

    def test_stale_trace(self):
        pyr = random_pyramid(np.random.default_rng(1), n1=4, M=3, D=4)
        m = micro()
        t = train_forward(pyr, m, make_rng(3))
        m.version += 1
        with pytest.raises(CacheError):
            train_backward(t, m, np.zeros(3))
        with pytest.raises(CacheError):
            train_backward(t, micro(), np.zeros(3))

    def test_soft_candidates_are_convex_mixtures(self):
        pyr = random_pyramid(np.random.default_rng(2), n1=4, M=2, D=4)
        m = micro(schedule=(2,))
        t = train_forward(pyr, m, make_rng(0))
        T = t.levels[0].T
        np.testing.assert_allclose(T.sum(axis=0), 1)
        expected = np.kron(T, np.eye(4)).T @ pyr.levels[1]
        np.testing.assert_allclose(t.levels[1].H, expected, atol=1e-12)

    def test_needs_rng(self):
        pyr = random_pyramid(np.random.default_rng(2), n1=4, M=2, D=4)
        with pytest.raises(ArgumentError):
            train_forward(pyr, micro(schedule=(2,)), None)

    def test_hard_eval_matches_inference(self):
        pyr = random_pyramid(np.random.default_rng(3), n1=4, M=3, D=4)
        m = micro("hard")
        t = train_forward(pyr, m, None, train_flag=False)
        r = infer(pyr, m)
        np.testing.assert_allclose(r.logits, t.logits, atol=1e-12)
        for a, lvl in zip(r.attention, t.levels):
            np.testing.assert_array_equal(a.rows, lvl.rows)


class TestInference:
    def test_encoder_calls_112(self, default_sample):
        ds, pp = default_sample
        m = ZoomModel.create(64, 3, (12, 12))
        enc = CountingEncoder(ds.encoder)
        r = infer(pp, m, enc)
        assert r.ledger.encoder_calls == [16, 48, 48]
        assert r.ledger.total_encoder_calls == 112 == sum(len(b) for b in enc.batches)
        assert r.ledger.encoder_flops == 112 * 32832 == 3677184
        full = infer_full_grid(pp, m, CountingEncoder(ds.encoder))
        assert full.ledger.total_encoder_calls == 256

    def test_only_children_of_selected_are_encoded(self, default_sample):
        ds, pp = default_sample
        m = ZoomModel.create(64, 3, (3, 5))
        enc = CountingEncoder(ds.encoder)
        r = infer(pp, m, enc)
        parents1 = np.array([p for p, _ in sorted(export_attention(r, 1), key=lambda x: (-x[1], x[0]))[:3]])
        rows2 = np.sort(np.concatenate([np.arange(4 * p, 4 * p + 4) for p in parents1]))
        np.testing.assert_array_equal(r.attention[1].rows, rows2)
        np.testing.assert_array_equal(enc.batches[1], pp.levels[1][rows2])
        assert len(enc.batches[2]) == 20

    def test_features_and_patches_agree(self, default_sample):
        ds, pp = default_sample
        m = ZoomModel.create(64, 3, (4, 4), seed=3)
        a = infer(pp, m, ds.encoder)
        b = infer(ds.samples[0].features, m)
        np.testing.assert_array_equal(a.logits, b.logits)

    def test_deterministic_and_rng_free(self, default_sample):
        ds, pp = default_sample
        m = ZoomModel.create(64, 3, (4, 4), seed=3)
        state = np.random.get_state()[1].copy()
        a, b = infer(pp, m, ds.encoder), infer(pp, m, ds.encoder)
        np.testing.assert_array_equal(a.logits, b.logits)
        np.testing.assert_array_equal(np.random.get_state()[1], state)

    def test_batch_equals_single(self):
        rng = np.random.default_rng(4)
        pyrs = [random_pyramid(rng, n1=4, M=3, D=8, dtype=np.float32, sid=f"p{i}") for i in range(5)]
        for sel in ("diff", "random"):
            m = ZoomModel.create(8, 3, (2, 3), seed=2, selection=sel)
            batch = infer_batch(pyrs, m)
            for p, rb in zip(pyrs, batch):
                rs = infer(p, m)
                assert rs.prediction == rb.prediction
                np.testing.assert_allclose(rs.logits, rb.logits, rtol=1e-5, atol=1e-6)
                for x, y in zip(rs.attention, rb.attention):
                    np.testing.assert_array_equal(x.rows, y.rows)

    def test_batch_rejects_mixed_shapes(self):
        rng = np.random.default_rng(4)
        with pytest.raises(ZoomError):
            infer_batch([random_pyramid(rng, n1=4), random_pyramid(rng, n1=2)], micro())

    def test_sibling_permutation_invariance(self):
        rng = np.random.default_rng(5)
        pyr = random_pyramid(rng, n1=4, M=3, D=4)
        m = micro("hard")
        # relabel: shuffle siblings inside every block of 4, carrying whole subtrees along
        maps = [np.arange(4)]
        for n in (16, 64):
            prev = maps[-1]
            new = np.empty(n, dtype=int)
            for r in range(n // 4):
                perm = rng.permutation(4)
                new[4 * r + np.arange(4)] = 4 * prev[r] + perm
            maps.append(new)
        levels = []
        for lvl, mp in zip(pyr.levels, maps):
            out = np.empty_like(lvl)
            out[mp] = lvl
            levels.append(out)
        q = FeaturePyramid(tuple(levels))
        a, b = infer(pyr, m), infer(q, m)
        assert a.prediction == b.prediction
        np.testing.assert_allclose(a.logits, b.logits, atol=1e-12)

    def test_encoder_failure_reports_patches(self, default_sample):
        ds, pp = default_sample
        m = ZoomModel.create(64, 3, (2, 2))
        with pytest.raises(ZoomError, match=r"level 2.*patches \[\["):
            infer(pp, m, CountingEncoder(ds.encoder, fail_on=2))

    def test_patches_need_encoder(self, default_sample):
        _, pp = default_sample
        with pytest.raises(ArgumentError):
            infer(pp, ZoomModel.create(64, 3, (2, 2)))

    def test_schedule_too_large(self, default_sample):
        ds, _ = default_sample
        with pytest.raises(ScheduleError, match="level 1"):
            infer(ds.samples[0].features, ZoomModel.create(64, 3, (17, 2)))


class TestExportAttention:
    def test_levels(self, default_sample):
        ds, pp = default_sample
        m = ZoomModel.create(64, 3, (4, 4))
        r = infer(pp, m, ds.encoder)
        l1 = export_attention(r, 1)
        assert [i for i, _ in l1] == list(range(16))
        np.testing.assert_allclose(sum(w for _, w in l1), 1, rtol=1e-5)
        assert len(export_attention(r, 3)) == 16
        assert len(export_attention(r, 1, "pool")) == 16
        with pytest.raises(AvailabilityError):
            export_attention(r, 0)
        with pytest.raises(AvailabilityError):
            export_attention(r, 4)
        with pytest.raises(AvailabilityError):
            export_attention(r, 3, "select")
        with pytest.raises(ArgumentError):
            export_attention(r, 1, "other")

    def test_full_grid_has_no_low_levels(self, default_sample):
        ds, pp = default_sample
        r = infer_full_grid(pp, ZoomModel.create(64, 3, (4, 4)), ds.encoder)
        with pytest.raises(AvailabilityError):
            export_attention(r, 1)
        assert len(export_attention(r, 3)) == 256

    def test_training_trace(self):
        pyr = random_pyramid(np.random.default_rng(6), n1=4, M=3, D=4)
        t = train_forward(pyr, micro(), make_rng(0))
        assert len(export_attention(t, 2)) == 8


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        m = ZoomModel.create(8, 3, (4, 2), seed=4, aggregation="concat", sigma=0.1, num_samples=7)
        save_checkpoint(m, tmp_path / "c")
        q = load_checkpoint(tmp_path / "c")
        assert q.hyperparameters() == m.hyperparameters()
        for k in m.params:
            np.testing.assert_array_equal(q.params[k], m.params[k])
        assert (tmp_path / "c").read_bytes().startswith(b"ZOOMMIL-CKPT 1\n")

    def test_bytes_are_deterministic(self, tmp_path):
        save_checkpoint(ZoomModel.create(8, 3, (4,), seed=4), tmp_path / "a")
        save_checkpoint(ZoomModel.create(8, 3, (4,), seed=4), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_corruption(self, tmp_path):
        save_checkpoint(ZoomModel.create(8, 3, (4,)), tmp_path / "c")
        raw = (tmp_path / "c").read_bytes()
        for bad, msg in ((raw[:-4], "short read"), (raw + b"x", "trailing"), (b"JUNK 1\n{}\n", "not a checkpoint"),
                         (raw[:10], "truncated")):
            (tmp_path / "d").write_bytes(bad)
            with pytest.raises(FormatError, match=msg):
                load_checkpoint(tmp_path / "d")

    def test_non_finite_rejected(self, tmp_path):
        m = ZoomModel.create(8, 3, (4,))
        m.params["fc2.b"][0] = np.inf
        save_checkpoint(m, tmp_path / "c")
        with pytest.raises(FormatError, match="non-finite"):
            load_checkpoint(tmp_path / "c")


# Scalar recomputation of the seed-0 two-level micro-model (N_1=4, D=8, L=4, C=2), frozen.
MICRO_LOGITS = [-0.34859488367025604, 0.4363490363591268]


def micro_case():
    rng = np.random.default_rng(0)
    pyr = FeaturePyramid((rng.standard_normal((4, 8)), rng.standard_normal((16, 8))))
    m = ZoomModel.create(8, 2, (2,), L=4, seed=0, dtype=np.float64)
    return pyr, m, train_forward(pyr, m, make_rng(0, 1))


class TestPipelineOracles:
    def test_micro_model_scalar_oracle(self):
        pyr, m, t = micro_case()
        o = scalar_two_level_logits(pyr.levels[0].tolist(), pyr.levels[1].tolist(), t.levels[0].T.tolist(),
                                    m.params, t.dropout_mask.tolist())
        np.testing.assert_allclose(o, MICRO_LOGITS, rtol=1e-12)
        np.testing.assert_allclose(t.logits, MICRO_LOGITS, rtol=1e-12)

    def test_zero_upstream(self):
        _, m, t = micro_case()
        for g in train_backward(t, m, np.zeros(2)).values():
            assert not g.any()

    def test_single_level_is_plain_attention_mil(self):
        rng = np.random.default_rng(1)
        H = rng.standard_normal((6, 4))
        m = ZoomModel.create(4, 3, (), seed=2, dtype=np.float64)
        t = train_forward(FeaturePyramid((H,)), m, make_rng(0), train_flag=False)
        g = ga_forward(H, m.ga(0)).pooled
        logits = m.params["fc2.W"] @ np.maximum(m.params["fc1.W"] @ g + m.params["fc1.b"], 0) + m.params["fc2.b"]
        np.testing.assert_allclose(t.logits, logits, rtol=1e-12)
        grads = train_backward(t, m, np.array([1.0, -2.0, 0.5]))
        dz = m.params["fc1.W"].T @ ((m.params["fc2.W"].T @ np.array([1.0, -2.0, 0.5])) * (m.params["fc1.W"] @ g + m.params["fc1.b"] > 0))
        _, gp = ga_backward(ga_forward(H, m.ga(0)).cache, dz)
        np.testing.assert_allclose(grads["ga0.V"], gp.V, rtol=1e-12, atol=1e-15)

    def test_unique_max_parent(self):
        rng = np.random.default_rng(2)
        H1 = rng.standard_normal((5, 4)) * 0.1
        H1[3] = 3.0
        m = ZoomModel.create(4, 2, (1,), seed=0, dtype=np.float64)
        m.params["sel0.V"][:] = 1.0
        m.params["sel0.U"][:] = 1.0
        m.params["sel0.w"][:] = 5.0
        r = infer(FeaturePyramid((H1, rng.standard_normal((20, 4)))), m)
        np.testing.assert_array_equal(r.attention[1].rows, [12, 13, 14, 15])

    def test_uniform_input_uniform_scores(self):
        pyr = FeaturePyramid((np.ones((4, 8)), np.ones((16, 8)), np.ones((64, 8))))
        r = infer(pyr, ZoomModel.create(8, 2, (2, 2), seed=3))
        for lvl in (1, 2, 3):
            w = [x for _, x in export_attention(r, lvl)]
            np.testing.assert_allclose(w, 1 / len(w), rtol=1e-6)

    def test_hard_limit_consistency(self):
        rng = np.random.default_rng(4)
        pyr = random_pyramid(rng, n1=4, M=3, D=4)
        m = ZoomModel.create(4, 3, (2, 2), seed=5, dtype=np.float64, dropout_p=0.0, sigma=1e-9, num_samples=5)
        a = infer(pyr, m)
        gaps = [np.diff(np.sort(l.select))[-2:].min() for l in a.attention[:-1]]
        assert min(gaps) > 1e-6
        t = train_forward(pyr, m, make_rng(1))
        np.testing.assert_allclose(t.logits, a.logits, atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(M=st.integers(1, 4), n1=st.integers(1, 16), D=st.integers(1, 5), data=st.data(), seed=st.integers(0, 2**31))
def test_shape_audit(M, n1, D, data, seed):
    sched, n = [], n1
    for _ in range(M - 1):
        k = data.draw(st.integers(1, min(n, 3)))
        sched.append(k)
        n = 4 * k
    rng = np.random.default_rng(seed)
    pyr = FeaturePyramid(tuple(rng.standard_normal((n1 * 4 ** m, D)) for m in range(M)))
    model = ZoomModel.create(D, 2, tuple(sched), seed=seed % 1000, dtype=np.float64, num_samples=3)
    t = train_forward(pyr, model, make_rng(seed))
    r = infer(pyr, model)
    for m in range(1, M):
        assert t.levels[m].H.shape == (4 * sched[m - 1], D)
        assert len(r.attention[m].rows) == 4 * sched[m - 1]
    assert t.z.shape == (D,) and t.logits.shape == (2,)
