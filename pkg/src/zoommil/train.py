"""Training loop, optimiser, scheduler, metrics and the ablation harness."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import STREAM_SHUFFLE, STREAM_TRAIN, ArgumentError, TrainingError, make_rng
from .model import ZoomModel, infer, train_backward, train_forward

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    patience: int = 5
    decay: float = 0.8
    epochs: int = 100
    batch_size: int = 1
    select_metric: str = "val_loss"  # or "val_f1"
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.learning_rate < 0 or not 0 < self.decay <= 1:
            raise ArgumentError("learning_rate must be >= 0 and decay in (0, 1]")
        if self.patience < 1 or self.epochs < 0:
            raise ArgumentError("patience must be >= 1 and epochs >= 0")
        if self.batch_size != 1:
            raise ArgumentError("only batch_size=1 is supported")
        if self.select_metric not in ("val_loss", "val_f1"):
            raise ArgumentError(f"unknown selection metric {self.select_metric!r}")


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy and its gradient with respect to ``logits``."""
    C = logits.shape[0]
    if not 0 <= label < C:
        raise ArgumentError(f"label {label} outside [0, {C})")
    shifted = logits - logits.max()
    lse = np.log(np.exp(shifted).sum())
    p = np.exp(shifted - lse)
    grad = p.copy()
    grad[label] -= 1
    return float(lse - shifted[label]), grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState, lr: float):
    """In-place bias-corrected Adam update. Returns ``(params, state)``."""
    for name, g in grads.items():
        if g.shape != params[name].shape or state.m[name].shape != g.shape:
            raise ArgumentError(f"shape mismatch for {name}: {g.shape} vs {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter {name}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        params[name] -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(params[name].dtype)
    return params, state


class PlateauScheduler:
    """Multiply the learning rate by ``decay`` after ``patience`` epochs without strict improvement."""

    def __init__(self, lr: float, mode: str = "min", patience: int = 5, decay: float = 0.8):
        if mode not in ("min", "max"):
            raise ArgumentError(f"mode must be 'min' or 'max', got {mode!r}")
        self.lr, self.mode, self.patience, self.decay = lr, mode, patience, decay
        self.best: float | None = None
        self.num_bad = 0

    def _better(self, value: float) -> bool:
        if self.best is None:
            return True
        return value < self.best if self.mode == "min" else value > self.best

    def step(self, value: float) -> float:
        if self._better(value):
            self.best, self.num_bad = value, 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr *= self.decay
                self.num_bad = 0
        return self.lr


def plateau_scheduler(history: Sequence[float], lr: float, mode: str = "min", patience: int = 5, decay: float = 0.8) -> float:
    """Learning rate after replaying ``history`` through a fresh :class:`PlateauScheduler`."""
    if len(history) == 0:
        raise ArgumentError("empty metric history")
    sched = PlateauScheduler(lr, mode, patience, decay)
    for value in history:
        sched.step(value)
    return sched.lr


def weighted_f1(predictions: Sequence[int], labels: Sequence[int], C: int) -> float:
    """Per-class F1 averaged with weights proportional to class support."""
    pred = np.asarray(predictions)
    true = np.asarray(labels)
    if pred.size == 0 or pred.shape != true.shape:
        raise ArgumentError("predictions and labels must be non-empty and of equal length")
    total = 0.0
    for c in range(C):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        support = tp + fn
        if support == 0:
            continue
        denom = 2 * tp + fp + fn
        total += support * (2 * tp / denom if denom else 0.0)
    return float(total / true.size)


# ---------------------------------------------------------------------------
# Fit / evaluate
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    loss: float
    accuracy: float
    f1: float
    predictions: list[int]


def evaluate(model: ZoomModel, samples: Sequence, threads: int = 1) -> EvalResult:
    """Deterministic (mode II, hard Top-K) evaluation on precomputed features."""
    def one(s):
        res = infer(s.features, model)
        return res.prediction, cross_entropy(res.logits, s.label)[0]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            out = list(pool.map(one, samples))
    else:
        out = [one(s) for s in samples]
    preds = [p for p, _ in out]
    labels = [s.label for s in samples]
    return EvalResult(
        loss=float(np.mean([l for _, l in out])),
        accuracy=float(np.mean(np.equal(preds, labels))),
        f1=weighted_f1(preds, labels, model.C),
        predictions=preds,
    )


@dataclass
class FitResult:
    model: ZoomModel          # parameters of the best epoch
    log: list[dict]
    best_epoch: int

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def train_step(model: ZoomModel, sample, rng: np.random.Generator, state: OptimizerState, lr: float) -> tuple[float, bool]:
    trace = train_forward(sample.features, model, rng, train_flag=True)
    loss, grad_logits = cross_entropy(trace.logits, sample.label)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss on sample {sample.id}")
    grads = train_backward(trace, model, grad_logits)
    adam_step(model.params, grads, state, lr)
    model.version += 1
    return loss, trace.prediction == sample.label


def fit(dataset, model: ZoomModel, cfg: TrainConfig) -> FitResult:
    """Single-sample Adam steps with plateau decay; keeps the best epoch by ``cfg.select_metric``.

    ``model`` is updated in place; the returned model holds the best parameters.
    """
    train, val = dataset.split("train"), dataset.split("val")
    if not train:
        raise ArgumentError("empty training split")
    state = OptimizerState.zeros_like(model.params)
    mode = "min" if cfg.select_metric == "val_loss" else "max"
    sched = PlateauScheduler(cfg.learning_rate, mode, cfg.patience, cfg.decay)
    lr = cfg.learning_rate
    best_value, best_params, best_epoch = None, {k: v.copy() for k, v in model.params.items()}, -1
    log = []
    for epoch in range(cfg.epochs):
        order = make_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(train))
        losses, hits = [], []
        for pos, i in enumerate(order):
            try:
                loss, hit = train_step(model, train[i], make_rng(cfg.seed, STREAM_TRAIN, epoch, pos), state, lr)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, sample {train[i].id}: {exc}") from exc
            losses.append(loss)
            hits.append(hit)
        ev = evaluate(model, val, cfg.threads) if val else EvalResult(float(np.mean(losses)), float(np.mean(hits)), 0.0, [])
        monitored = ev.loss if cfg.select_metric == "val_loss" else ev.f1
        improved = best_value is None or (monitored < best_value if mode == "min" else monitored > best_value)
        if improved:
            best_value, best_epoch = monitored, epoch
            best_params = {k: v.copy() for k, v in model.params.items()}
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": float(np.mean(losses)),
            "train_acc": float(np.mean(hits)),
            "val_loss": ev.loss,
            "val_acc": ev.accuracy,
            "val_f1": ev.f1,
            "best": improved,
        }
        log.append(rec)
        logger.info("epoch %d: %s", epoch, rec)
        lr = sched.step(monitored)
    return FitResult(model.replace(best_params), log, best_epoch)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

ARMS: dict[str, dict] = {
    "diff_topk": {},
    "random_k": {"selection": "random"},
    "nondiff_topk": {"selection": "hard"},
    "single_ga": {"dual": False},
    "dga": {},
    "agg_sum": {"aggregation": "sum"},
    "agg_concat": {"aggregation": "concat"},
    "agg_highest": {"aggregation": "highest"},
}

ARM_LABELS = {
    "diff_topk": "Diff-TopK K @ level 1",
    "random_k": "Random K @ level 1",
    "nondiff_topk": "NonDiff-TopK K @ level 1",
    "single_ga": "Single GA",
    "dga": "DGA",
    "agg_sum": "Features sum over levels",
    "agg_concat": "Features concat over levels",
    "agg_highest": "Features @ highest level",
}


@dataclass
class ArmResult:
    arm: str
    seed: int
    accuracy: float
    f1: float
    val_accuracy: float
    best_epoch: int
    extra: dict = field(default_factory=dict)


def build_model(dataset, arm: str = "diff_topk", seed: int = 0, **model_kwargs) -> ZoomModel:
    if arm not in ARMS:
        raise ArgumentError(f"unknown arm {arm!r}; expected one of {sorted(ARMS)}")
    kw = dict(model_kwargs)
    kw.update(ARMS[arm])
    cfg = dataset.cfg
    schedule = kw.pop("schedule", None) or default_schedule(cfg.levels)
    return ZoomModel.create(cfg.D, cfg.C, schedule, seed=seed, **kw)


def default_schedule(levels: int, k: int = 4) -> tuple[int, ...]:
    return (k,) * (levels - 1)


def run_arm(dataset, arm: str, cfg: TrainConfig, **model_kwargs) -> ArmResult:
    model = build_model(dataset, arm, seed=cfg.seed, **model_kwargs)
    res = fit(dataset, model, cfg)
    test = evaluate(res.model, dataset.split("test"), cfg.threads)
    val_acc = res.log[res.best_epoch]["val_acc"] if res.log else float("nan")
    return ArmResult(arm, cfg.seed, test.accuracy, test.f1, val_acc, res.best_epoch)


def ablate(dataset, arms: Iterable[str], cfg: TrainConfig, seeds: Sequence[int] = (0,), **model_kwargs) -> list[ArmResult]:
    """Train and test every arm under identical seeds and configuration."""
    arms = list(arms)
    for arm in arms:
        if arm not in ARMS:
            raise ArgumentError(f"unknown arm {arm!r}; expected one of {sorted(ARMS)}")
    out = []
    for arm in arms:
        for seed in seeds:
            run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
            out.append(run_arm(dataset, arm, run_cfg, **model_kwargs))
    return out


def summarize(results: Sequence[ArmResult]) -> list[dict]:
    """Mean/std of test metrics per arm, in first-seen arm order."""
    arms: dict[str, list[ArmResult]] = {}
    for r in results:
        arms.setdefault(r.arm, []).append(r)
    rows = []
    for arm, rs in arms.items():
        acc = np.array([r.accuracy for r in rs])
        f1 = np.array([r.f1 for r in rs])
        rows.append({
            "arm": arm,
            "label": ARM_LABELS.get(arm, arm),
            "seeds": [r.seed for r in rs],
            "accuracy": float(acc.mean()),
            "accuracy_std": float(acc.std()),
            "f1": float(f1.mean()),
            "f1_std": float(f1.std()),
        })
    return rows


def format_table(rows: Sequence[dict], key: str = "label") -> str:
    lines = [f"{'method':<34} {'weighted F1 (%)':>16} {'accuracy (%)':>13}"]
    for r in rows:
        lines.append(f"{str(r[key]):<34} {100 * r['f1']:>16.1f} {100 * r['accuracy']:>13.1f}")
    return "\n".join(lines)


def k_sweep(dataset, ks: Sequence[int], cfg: TrainConfig, seeds: Sequence[int] = (0,), **model_kwargs) -> list[dict]:
    """Accuracy versus K, using the same K at every zoom step."""
    rows = []
    for k in ks:
        results = []
        for seed in seeds:
            run_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
            results.append(run_arm(dataset, "diff_topk", run_cfg,
                                   schedule=default_schedule(dataset.cfg.levels, k), **model_kwargs))
        row = summarize(results)[0]
        row.update(label=f"K={k}", K=k)
        rows.append(row)
    return rows
