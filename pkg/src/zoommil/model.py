"""The multi-level zooming MIL network.

Training (mode I) consumes precomputed features at every level and routes the
selection through the perturbed Top-K so the selection attention receives
gradients. Inference (mode II) replaces it with hard Top-K and only encodes the
children of selected patches.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from . import attention as att
from .attention import GatedAttentionParams, ga_backward, ga_flops, ga_forward
from .core import (
    STREAM_INIT,
    STREAM_RANDOM_SELECT,
    ArgumentError,
    AvailabilityError,
    CacheError,
    DimensionError,
    FeaturePyramid,
    FormatError,
    PatchPyramid,
    ScheduleError,
    ZoomError,
    descendant_rows,
    make_rng,
    stable_hash,
)
from .topk import (
    PerturbedTopKCache,
    PerturbedTopKConfig,
    perturbed_topk_backward,
    perturbed_topk_forward,
    topk_indices,
    zoom_select,
    zoom_select_backward,
)

SELECTIONS = ("diff", "hard", "random")
AGGREGATIONS = ("sum", "concat", "highest")
CHECKPOINT_MAGIC = b"ZOOMMIL-CKPT"
CHECKPOINT_VERSION = 1


class Encoder(Protocol):
    flops_per_patch: int

    def encode(self, patches: np.ndarray) -> np.ndarray: ...


@dataclass
class ZoomModel:
    """Parameters and switches of the network.

    ``params`` is a flat name -> array dict: ``ga{m}.{V,U,w}`` pools level ``m``
    (0-based), ``sel{m}.{V,U,w}`` scores patches for selection at level ``m < M-1``
    (only when ``dual``), ``fc1``/``fc2`` form the classifier.
    """

    D: int
    C: int
    schedule: tuple[int, ...]
    L: int
    hidden: int
    params: dict[str, np.ndarray]
    selection: str = "diff"
    dual: bool = True
    aggregation: str = "sum"
    sigma: float = 0.05
    num_samples: int = 100
    dropout_p: float = 0.25
    seed: int = 0
    version: int = field(default=0, compare=False)  # bump after any in-place parameter edit
    _heads: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.schedule = tuple(int(k) for k in self.schedule)
        if self.selection not in SELECTIONS:
            raise ArgumentError(f"unknown selection {self.selection!r}; expected one of {SELECTIONS}")
        if self.aggregation not in AGGREGATIONS:
            raise ArgumentError(f"unknown aggregation {self.aggregation!r}; expected one of {AGGREGATIONS}")
        if any(k < 1 for k in self.schedule):
            raise ScheduleError(f"schedule entries must be >= 1: {self.schedule}")

    @classmethod
    def create(
        cls,
        D: int,
        C: int,
        schedule: Sequence[int] = (),
        L: int | None = None,
        hidden: int | None = None,
        seed: int = 0,
        dtype=np.float32,
        **switches,
    ) -> "ZoomModel":
        L = L if L is not None else max(1, D // 2)
        hidden = hidden if hidden is not None else max(1, D // 2)
        M = len(schedule) + 1
        rng = make_rng(seed, STREAM_INIT)
        params: dict[str, np.ndarray] = {}
        dual = switches.get("dual", True)
        for m in range(M):
            _put_ga(params, f"ga{m}", GatedAttentionParams.init(D, L, rng, dtype))
            if m < M - 1 and dual:
                _put_ga(params, f"sel{m}", GatedAttentionParams.init(D, L, rng, dtype))
        d_in = D * M if switches.get("aggregation", "sum") == "concat" else D
        for name, fan_in, fan_out in (("fc1", d_in, hidden), ("fc2", hidden, C)):
            bound = 1.0 / np.sqrt(fan_in)
            params[f"{name}.W"] = rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype)
            params[f"{name}.b"] = rng.uniform(-bound, bound, size=fan_out).astype(dtype)
        return cls(D=D, C=C, schedule=tuple(schedule), L=L, hidden=hidden, params=params, seed=seed, **switches)

    @property
    def M(self) -> int:
        return len(self.schedule) + 1

    @property
    def dtype(self):
        return self.params["fc1.W"].dtype

    @property
    def classifier_in(self) -> int:
        return self.D * self.M if self.aggregation == "concat" else self.D

    def ga(self, m: int) -> GatedAttentionParams:
        return _get_ga(self.params, f"ga{m}")

    def sel(self, m: int) -> GatedAttentionParams:
        return _get_ga(self.params, f"sel{m}" if self.dual else f"ga{m}")

    def topk_config(self, m: int) -> PerturbedTopKConfig:
        return PerturbedTopKConfig(K=self.schedule[m], sigma=self.sigma, num_samples=self.num_samples, rng_stream=m)

    def hyperparameters(self) -> dict:
        return {
            "D": self.D, "C": self.C, "schedule": list(self.schedule), "L": self.L, "hidden": self.hidden,
            "selection": self.selection, "dual": self.dual, "aggregation": self.aggregation,
            "sigma": self.sigma, "num_samples": self.num_samples, "dropout_p": self.dropout_p, "seed": self.seed,
        }

    def replace(self, params: dict[str, np.ndarray] | None = None, **changes) -> "ZoomModel":
        hp = self.hyperparameters()
        hp.update(changes)
        hp["schedule"] = tuple(hp["schedule"])
        new_params = {k: v.copy() for k, v in (params if params is not None else self.params).items()}
        return ZoomModel(params=new_params, **hp)

    def astype(self, dtype) -> "ZoomModel":
        return self.replace({k: v.astype(dtype) for k, v in self.params.items()})

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def check_schedule(self, sizes: Sequence[int]) -> None:
        if len(sizes) != self.M:
            raise ScheduleError(f"pyramid has {len(sizes)} levels but model expects {self.M}")
        n = sizes[0]
        for m, K in enumerate(self.schedule):
            if K > n:
                raise ScheduleError(f"level {m + 1}: K={K} exceeds the {n} available rows")
            n = 4 * K


def _put_ga(params: dict, prefix: str, ga: GatedAttentionParams) -> None:
    params[f"{prefix}.V"], params[f"{prefix}.U"], params[f"{prefix}.w"] = ga.V, ga.U, ga.w


def _get_ga(params: dict, prefix: str) -> GatedAttentionParams:
    return GatedAttentionParams(params[f"{prefix}.V"], params[f"{prefix}.U"], params[f"{prefix}.w"])


# ---------------------------------------------------------------------------
# Classifier
# ---------------------------------------------------------------------------

def classifier_forward(model: ZoomModel, z: np.ndarray, mask: np.ndarray | None):
    p = model.params
    h1 = p["fc1.W"] @ z + p["fc1.b"]
    r = np.maximum(h1, 0)
    d = r if mask is None else r * mask
    logits = p["fc2.W"] @ d + p["fc2.b"]
    return logits, (z, h1, d, mask)


def classifier_backward(model: ZoomModel, cache, grad_logits: np.ndarray, grads: dict) -> np.ndarray:
    z, h1, d, mask = cache
    p = model.params
    grads["fc2.W"] += np.outer(grad_logits, d)
    grads["fc2.b"] += grad_logits
    dd = p["fc2.W"].T @ grad_logits
    if mask is not None:
        dd = dd * mask
    dh1 = dd * (h1 > 0)
    grads["fc1.W"] += np.outer(dh1, z)
    grads["fc1.b"] += dh1
    return p["fc1.W"].T @ dh1


def classifier_flops(d_in: int, hidden: int, C: int) -> int:
    return 2 * d_in * hidden + hidden + hidden + 2 * hidden * C + C


def aggregate(model: ZoomModel, pooled: Sequence[np.ndarray]) -> np.ndarray:
    if model.aggregation == "sum":
        return np.sum(pooled, axis=0)
    if model.aggregation == "concat":
        return np.concatenate(pooled)
    return pooled[-1]


def aggregate_flops(model: ZoomModel) -> int:
    return (model.M - 1) * model.D if model.aggregation == "sum" else 0


def _split_aggregate_grad(model: ZoomModel, grad_z: np.ndarray) -> list[np.ndarray]:
    M, D = model.M, model.D
    if model.aggregation == "sum":
        return [grad_z] * M
    if model.aggregation == "concat":
        return [grad_z[m * D:(m + 1) * D] for m in range(M)]
    return [np.zeros_like(grad_z)] * (M - 1) + [grad_z]


# ---------------------------------------------------------------------------
# Mode I: training forward / backward
# ---------------------------------------------------------------------------

@dataclass
class LevelTrace:
    H: np.ndarray                         # rows seen at this level (soft mixtures below level 1)
    rows: np.ndarray                      # dominant source patch index per row
    pool: att.AttentionOutput
    select: att.AttentionOutput | None = None
    T: np.ndarray | None = None           # indicator used to zoom out of this level
    topk_cache: PerturbedTopKCache | None = None
    random_indices: np.ndarray | None = None
    cands_before: list = field(default_factory=list)  # deeper-level candidates before this selection


@dataclass
class ForwardTrace:
    levels: list[LevelTrace]
    z: np.ndarray
    logits: np.ndarray
    classifier_cache: tuple
    dropout_mask: np.ndarray | None
    model_id: int
    model_version: int

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.logits))

    @property
    def selected(self) -> list[np.ndarray]:
        return [lvl.H for lvl in self.levels]


def train_forward(
    pyramid: FeaturePyramid,
    model: ZoomModel,
    rng: np.random.Generator | None = None,
    train_flag: bool = True,
    replay: ForwardTrace | None = None,
) -> ForwardTrace:
    """Mode-I forward pass over precomputed features.

    ``replay`` reuses the Top-K noise, random selections and dropout mask of an
    earlier trace (used for finite-difference checks with frozen randomness).
    """
    if pyramid.M != model.M:
        raise ScheduleError(f"pyramid has {pyramid.M} levels but model expects {model.M}")
    model.check_schedule(pyramid.sizes)
    if pyramid.D != model.D:
        raise DimensionError(f"pyramid D={pyramid.D} but model D={model.D}")
    if rng is None and replay is None and (train_flag or model.selection != "hard"):
        raise ArgumentError("train_forward needs an rng unless replaying a trace")

    dtype = model.dtype
    M = model.M
    cands = [np.asarray(l, dtype=dtype) for l in pyramid.levels]
    rows = np.arange(pyramid.sizes[0])
    levels: list[LevelTrace] = []
    for m in range(M):
        H = cands[m]
        pool = ga_forward(H, model.ga(m))
        lvl = LevelTrace(H=H, rows=rows, pool=pool)
        if m < M - 1:
            K = model.schedule[m]
            n = H.shape[0]
            if model.selection == "random":
                if replay is not None:
                    idx = replay.levels[m].random_indices
                else:
                    idx = np.sort(rng.choice(n, size=K, replace=False))
                T = np.zeros((n, K), dtype=dtype)
                T[idx, np.arange(K)] = 1
                lvl.random_indices = idx
            else:
                lvl.select = pool if not model.dual else ga_forward(H, model.sel(m))
                a = lvl.select.weights
                if model.selection == "diff":
                    noise = replay.levels[m].topk_cache.noise if replay is not None else None
                    Tm, cache = perturbed_topk_forward(a, model.topk_config(m), rng=rng, noise=noise)
                    T, lvl.topk_cache = Tm.entries, cache
                else:
                    idx = topk_indices(a, K)
                    T = np.zeros((n, K), dtype=dtype)
                    T[idx, np.arange(K)] = 1
            lvl.T = T
            lvl.cands_before = cands[m + 1:]
            for j in range(m + 1, M):
                cands[j] = zoom_select(T, cands[j], j - m)
            rows = descendant_rows(rows[np.argmax(T, axis=0)], 1)
        levels.append(lvl)

    z = aggregate(model, [lvl.pool.pooled for lvl in levels])
    mask = None
    if train_flag and model.dropout_p > 0:
        if replay is not None:
            mask = replay.dropout_mask
        else:
            keep = rng.random(model.hidden) >= model.dropout_p
            mask = (keep / (1.0 - model.dropout_p)).astype(dtype)
    logits, ccache = classifier_forward(model, z, mask)
    return ForwardTrace(levels, z, logits, ccache, mask, id(model), model.version)


def train_backward(trace: ForwardTrace, model: ZoomModel, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of every parameter for upstream ``grad_logits``.

    The selection attention is reached only through the perturbed Top-K
    estimator, so in ``hard``/``random`` selection its gradient is exactly zero.
    """
    if trace.model_id != id(model) or trace.model_version != model.version:
        raise CacheError("stale trace: model changed since the forward pass")
    grad_logits = np.asarray(grad_logits, dtype=model.dtype)
    if grad_logits.shape != (model.C,):
        raise DimensionError(f"grad_logits shape {grad_logits.shape} != ({model.C},)")

    grads = model.zero_grads()
    grad_z = classifier_backward(model, trace.classifier_cache, grad_logits, grads)
    grad_pooled = _split_aggregate_grad(model, grad_z)

    M = model.M
    gv: list[np.ndarray | None] = [None] * M
    for m in reversed(range(M)):
        lvl = trace.levels[m]
        grad_a = None
        if m < M - 1:
            grad_T = np.zeros_like(lvl.T)
            for j in range(m + 1, M):
                gT, gX = zoom_select_backward(lvl.T, lvl.cands_before[j - m - 1], gv[j], j - m)
                grad_T += gT
                gv[j] = gX
            if model.selection == "diff":
                grad_a = perturbed_topk_backward(lvl.topk_cache, grad_T).astype(model.dtype)

        if model.dual or grad_a is None:
            gH, gp = ga_backward(lvl.pool.cache, grad_pooled[m])
            _acc_ga(grads, f"ga{m}", gp)
            if grad_a is not None:
                gH2, gs = ga_backward(lvl.select.cache, np.zeros_like(grad_pooled[m]), grad_a)
                _acc_ga(grads, f"sel{m}", gs)
                gH = gH + gH2
        else:
            gH, gp = ga_backward(lvl.pool.cache, grad_pooled[m], grad_a)
            _acc_ga(grads, f"ga{m}", gp)
        gv[m] = gH
    return grads


def _acc_ga(grads: dict, prefix: str, g: GatedAttentionParams) -> None:
    grads[f"{prefix}.V"] += g.V
    grads[f"{prefix}.U"] += g.U
    grads[f"{prefix}.w"] += g.w


# ---------------------------------------------------------------------------
# Mode II: deterministic inference with lazy encoding
# ---------------------------------------------------------------------------

@dataclass
class FlopLedger:
    encoder_calls: list[int]
    encoder_flops: int = 0
    head_flops: int = 0
    wall_time: float = 0.0

    @property
    def total(self) -> int:
        return self.encoder_flops + self.head_flops

    @property
    def total_encoder_calls(self) -> int:
        return sum(self.encoder_calls)

    def as_dict(self) -> dict:
        return {
            "encoder_calls": list(self.encoder_calls),
            "total_encoder_calls": self.total_encoder_calls,
            "encoder_flops": self.encoder_flops,
            "head_flops": self.head_flops,
            "total_flops": self.total,
            "wall_time": self.wall_time,
        }


@dataclass
class LevelAttention:
    rows: np.ndarray                 # patch index at this level of every evaluated row
    pool: np.ndarray                 # GA_m weights
    select: np.ndarray | None        # selection weights (None at the last level / random arm)


@dataclass
class InferenceResult:
    prediction: int
    logits: np.ndarray
    attention: list[LevelAttention]
    ledger: FlopLedger


class _Fetcher:
    """Encodes (patches) or gathers (features) the requested rows of a batch and counts them."""

    def __init__(self, pyramids: Sequence, encoder: Encoder | None, dtype):
        self.patches = isinstance(pyramids[0], PatchPyramid)
        for p in pyramids:
            if isinstance(p, PatchPyramid) != self.patches:
                raise ArgumentError("cannot mix patch and feature pyramids in one batch")
            if p.sizes != pyramids[0].sizes:
                raise DimensionError(f"pyramid {p.id!r} has sizes {p.sizes}, batch expects {pyramids[0].sizes}")
        if self.patches and encoder is None:
            raise ArgumentError("inference on a PatchPyramid needs an encoder")
        self.pyramids, self.encoder, self.dtype = pyramids, encoder, dtype
        self.per_patch = encoder.flops_per_patch if encoder is not None else 0
        self.calls = [0] * pyramids[0].M

    def __call__(self, level: int, rows: np.ndarray) -> np.ndarray:
        """``rows`` is ``[B, n]``; returns features ``[B, n, D]``."""
        B, n = rows.shape
        self.calls[level] += n
        X = np.stack([p.levels[level][r] for p, r in zip(self.pyramids, rows)])
        if self.patches:
            try:
                out = self.encoder.encode(X.reshape((B * n,) + X.shape[2:]))
            except ZoomError:
                raise
            except Exception as exc:
                ids = [p.id for p in self.pyramids]
                raise ZoomError(
                    f"encoder failed at level {level + 1}, samples {ids}, patches {rows.tolist()}: {exc}"
                ) from exc
            X = np.asarray(out).reshape(B, n, -1)
        return np.asarray(X, dtype=self.dtype)

    def ledger(self, head: int, wall_time: float) -> FlopLedger:
        return FlopLedger(list(self.calls), sum(self.calls) * self.per_patch, head, wall_time)


def _stacked_heads(model: ZoomModel, m: int, with_select: bool):
    """Pooling (and selection) attention of level ``m`` stacked into one projection.

    Columns of ``W`` are ``[V | V' | U | U']`` so a single matmul, one ``tanh`` and
    one sigmoid serve both heads; ``S`` is block-diagonal so each head gets its
    own score column. Cached per model version.
    """
    key = (model.version, m, with_select)
    if key in model._heads:
        return model._heads[key]
    if len(model._heads) > 4 * model.M:
        model._heads.clear()
    ga = model.ga(m)
    heads = [ga, model.sel(m)] if with_select else [ga]
    W = np.concatenate([h.V for h in heads] + [h.U for h in heads]).T.copy()
    L = model.L
    S = np.zeros((L * len(heads), len(heads)), dtype=ga.w.dtype)
    for j, h in enumerate(heads):
        S[j * L:(j + 1) * L, j] = h.w
    model._heads[key] = (W, S)
    return W, S


def _attend(H: np.ndarray, W: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Attention weights ``[B, n, heads]`` for features ``[B, n, D]``.

    Same function as :func:`ga_forward`, batched and without the backward cache.
    """
    B, n, D = H.shape
    P = H.reshape(B * n, D) @ W
    h = P.shape[1] // 2
    gated = np.tanh(P[:, :h]) * (0.5 + 0.5 * np.tanh(0.5 * P[:, h:]))
    s = (gated @ S).reshape(B, n, -1)
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _head(model: ZoomModel, pooled: list[np.ndarray]):
    """Aggregation and classifier on ``[B, D]`` pooled vectors; returns logits ``[B, C]``."""
    if model.aggregation == "sum":
        z = np.sum(pooled, axis=0)
    elif model.aggregation == "concat":
        z = np.concatenate(pooled, axis=1)
    else:
        z = pooled[-1]
    p = model.params
    r = np.maximum(z @ p["fc1.W"].T + p["fc1.b"], 0)
    return r @ p["fc2.W"].T + p["fc2.b"]


def _results(logits, attn, ledger, B) -> list[InferenceResult]:
    return [
        InferenceResult(int(np.argmax(logits[b])), logits[b].copy(),
                        [LevelAttention(*(x[b] if x is not None else None for x in lvl)) for lvl in attn],
                        FlopLedger(list(ledger.encoder_calls), ledger.encoder_flops, ledger.head_flops, ledger.wall_time))
        for b in range(B)
    ]


def infer_batch(pyramids: Sequence[PatchPyramid | FeaturePyramid], model: ZoomModel,
                encoder: Encoder | None = None) -> list[InferenceResult]:
    """Mode-II forward on a batch of equally shaped pyramids.

    Every level is encoded and scored in one call for the whole batch, which
    amortises interpreter overhead; results equal per-sample :func:`infer`.
    """
    start = time.perf_counter()
    if len(pyramids) == 0:
        raise ArgumentError("empty batch")
    model.check_schedule(pyramids[0].sizes)
    fetch = _Fetcher(pyramids, encoder, model.dtype)
    B, M, D, L = len(pyramids), model.M, model.D, model.L
    use_select = model.dual and model.selection != "random"
    head = 0
    rows = np.broadcast_to(np.arange(pyramids[0].sizes[0]), (B, pyramids[0].sizes[0]))
    pooled, attn = [], []
    for m in range(M):
        H = fetch(m, rows)
        with_select = use_select and m < M - 1
        a = _attend(H, *_stacked_heads(model, m, with_select))
        head += ga_flops(rows.shape[1], D, L) * (2 if with_select else 1)
        pool_w = a[:, :, 0]
        pooled.append(np.einsum("bn,bnd->bd", pool_w, H))
        if m == M - 1:
            attn.append((rows, pool_w, None))
            break
        K = model.schedule[m]
        if model.selection == "random":
            sel_w = None
            idx = np.stack([
                np.sort(make_rng(model.seed, STREAM_RANDOM_SELECT, stable_hash(p.id), m)
                        .choice(rows.shape[1], size=K, replace=False))
                for p in pyramids
            ])
        else:
            sel_w = a[:, :, 1] if with_select else pool_w
            idx = topk_indices(sel_w, K)
        attn.append((rows, pool_w, sel_w))
        parents = np.take_along_axis(rows, idx, axis=1)
        rows = (parents[:, :, None] * 4 + np.arange(4)).reshape(B, -1)
    logits = _head(model, pooled)
    head += aggregate_flops(model) + classifier_flops(model.classifier_in, model.hidden, model.C)
    ledger = fetch.ledger(head, (time.perf_counter() - start) / B)
    return _results(logits, attn, ledger, B)


def infer(pyramid: PatchPyramid | FeaturePyramid, model: ZoomModel, encoder: Encoder | None = None) -> InferenceResult:
    """Mode-II forward: hard Top-K, only children of selected patches are encoded."""
    return infer_batch([pyramid], model, encoder)[0]


def infer_full_grid_batch(pyramids: Sequence[PatchPyramid | FeaturePyramid], model: ZoomModel,
                          encoder: Encoder | None = None) -> list[InferenceResult]:
    """Single-scale baseline: encode every highest-magnification patch and pool with the last level's GA.

    Lower levels contribute zero vectors to the aggregation.
    """
    start = time.perf_counter()
    if len(pyramids) == 0:
        raise ArgumentError("empty batch")
    fetch = _Fetcher(pyramids, encoder, model.dtype)
    B, M = len(pyramids), model.M
    n = pyramids[0].sizes[-1]
    rows = np.broadcast_to(np.arange(n), (B, n))
    H = fetch(M - 1, rows)
    pool_w = _attend(H, *_stacked_heads(model, M - 1, False))[:, :, 0]
    zero = np.zeros((B, model.D), dtype=model.dtype)
    logits = _head(model, [zero] * (M - 1) + [np.einsum("bn,bnd->bd", pool_w, H)])
    head = ga_flops(n, model.D, model.L) + aggregate_flops(model)
    head += classifier_flops(model.classifier_in, model.hidden, model.C)
    ledger = fetch.ledger(head, (time.perf_counter() - start) / B)
    empty = (np.zeros((B, 0), dtype=np.int64), np.zeros((B, 0), dtype=model.dtype), None)
    return _results(logits, [empty] * (M - 1) + [(rows, pool_w, None)], ledger, B)


def infer_full_grid(pyramid: PatchPyramid | FeaturePyramid, model: ZoomModel, encoder: Encoder | None = None) -> InferenceResult:
    return infer_full_grid_batch([pyramid], model, encoder)[0]


def export_attention(result: InferenceResult | ForwardTrace, level: int, kind: str = "auto") -> list[tuple[int, float]]:
    """Per-patch attention at ``level`` (1-based) as ``(patch index, weight)`` pairs.

    ``kind`` is ``"pool"``, ``"select"`` or ``"auto"`` (selection scores where the
    level zooms, pooling scores at the last level). For training traces the
    index of a soft row is its dominant source patch.
    """
    levels = result.attention if isinstance(result, InferenceResult) else result.levels
    if not 1 <= level <= len(levels):
        raise AvailabilityError(f"level {level} not available (model has {len(levels)} levels)")
    lvl = levels[level - 1]
    if isinstance(result, InferenceResult):
        rows, pool, select = lvl.rows, lvl.pool, lvl.select
    else:
        rows, pool = lvl.rows, lvl.pool.weights
        select = lvl.select.weights if lvl.select is not None else None
    if len(rows) == 0:
        raise AvailabilityError(f"level {level} was not evaluated on this path")
    if kind == "auto":
        kind = "select" if select is not None else "pool"
    if kind == "select":
        if select is None:
            raise AvailabilityError(f"no selection attention at level {level}")
        weights = select
    elif kind == "pool":
        weights = pool
    else:
        raise ArgumentError(f"unknown attention kind {kind!r}")
    return [(int(r), float(w)) for r, w in zip(rows, weights)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: ZoomModel, path: str | os.PathLike) -> None:
    """One file: magic line, JSON manifest line, then f32 LE blobs in manifest order."""
    order = sorted(model.params)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "hyperparameters": model.hyperparameters(),
        "dtype": "f32le",
        "params": [[k, list(model.params[k].shape)] for k in order],
    }
    blob = b"".join(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes() for k in order)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(
        CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION
        + json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n" + blob
    )
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> ZoomModel:
    raw = Path(path).read_bytes()
    try:
        magic_end = raw.index(b"\n")
        manifest_end = raw.index(b"\n", magic_end + 1)
    except ValueError as exc:
        raise FormatError(f"{path}: truncated checkpoint header") from exc
    magic = raw[:magic_end].split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if int(magic[1]) != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {magic[1].decode()}")
    try:
        manifest = json.loads(raw[magic_end + 1:manifest_end])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt manifest ({exc})") from exc
    offset = manifest_end + 1
    params = {}
    for name, shape in manifest["params"]:
        count = int(np.prod(shape))
        chunk = raw[offset:offset + 4 * count]
        if len(chunk) < 4 * count:
            raise FormatError(f"{path}: short read in parameter {name}")
        params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
        offset += 4 * count
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    hp = dict(manifest["hyperparameters"])
    hp["schedule"] = tuple(hp["schedule"])
    expected = ZoomModel.create(hp["D"], hp["C"], hp["schedule"], L=hp["L"], hidden=hp["hidden"],
                                dual=hp["dual"], aggregation=hp["aggregation"]).params
    if sorted(expected) != sorted(params):
        raise FormatError(f"{path}: parameter names do not match the stored hyperparameters")
    for name, arr in params.items():
        if arr.shape != expected[name].shape:
            raise FormatError(f"{path}: {name} has shape {arr.shape}, hyperparameters imply {expected[name].shape}")
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"{path}: non-finite values in {name}")
    return ZoomModel(params=params, **hp)
