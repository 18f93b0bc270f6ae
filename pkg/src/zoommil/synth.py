"""Synthetic multi-resolution bags with a planted "look here, then zoom" structure.

A few level-1 parents are informative. They (and their descendants below the
last level) carry a class-agnostic localisation cue; their last-level
descendants carry one of ``C`` orthogonal class motifs. Everything else is
Gaussian texture, so the label is only decodable after zooming into the right
parents.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    STREAM_ENCODER,
    STREAM_PATTERNS,
    STREAM_SYNTH,
    ArgumentError,
    DimensionError,
    FeaturePyramid,
    FormatError,
    PatchPyramid,
    descendant_rows,
    load_pyramid,
    make_rng,
    save_pyramid,
)

SPLITS = ("train", "val", "test")
INDEX_FILE = "index.json"


@dataclass(frozen=True)
class SynthConfig:
    n1: int = 16
    levels: int = 3
    patch_shape: tuple[int, int, int] = (16, 16, 1)
    D: int = 64
    C: int = 3
    informative_fraction: float = 2 / 16
    cue_strength: float = 0.5
    motif_strength: float = 1.0
    noise_std: float = 1.0
    seed: int = 0
    n_train: int = 600
    n_val: int = 100
    n_test: int = 300

    def __post_init__(self):
        object.__setattr__(self, "patch_shape", tuple(int(p) for p in self.patch_shape))
        if not 0 < self.informative_fraction <= 1:
            raise ArgumentError(f"informative_fraction must be in (0, 1], got {self.informative_fraction}")
        if self.cue_strength < 0 or self.motif_strength < 0 or self.noise_std < 0:
            raise ArgumentError("strengths and noise_std must be >= 0")
        if self.levels < 1 or self.n1 < 1 or self.C < 1:
            raise ArgumentError("levels, n1 and C must be >= 1")
        if self.n_informative < 1:
            raise ArgumentError("configuration plants no informative parent")
        if self.C + 1 > self.patch_size:
            raise ArgumentError(f"need {self.C + 1} orthogonal patterns but patches have {self.patch_size} pixels")

    @property
    def patch_size(self) -> int:
        return int(np.prod(self.patch_shape))

    @property
    def n_informative(self) -> int:
        return math.ceil(self.informative_fraction * self.n1 - 1e-9)

    @property
    def sizes(self) -> list[int]:
        return [self.n1 * 4 ** m for m in range(self.levels)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        return d


class SynthEncoder:
    """Fixed random projection of the flattened patch followed by ``tanh``."""

    def __init__(self, patch_shape: tuple[int, int, int], D: int, seed: int = 0):
        self.patch_shape = tuple(patch_shape)
        self.D = D
        P = int(np.prod(self.patch_shape))
        rng = make_rng(seed, STREAM_ENCODER)
        self.W = (rng.standard_normal((D, P)) / np.sqrt(P)).astype(np.float32)
        self.WT = np.ascontiguousarray(self.W.T)
        self.flops_per_patch = 2 * P * D + D

    def encode(self, patches: np.ndarray) -> np.ndarray:
        patches = np.asarray(patches)
        if patches.shape[1:] != self.patch_shape:
            raise DimensionError(f"patch shape {patches.shape[1:]} != encoder's {self.patch_shape}")
        flat = patches.reshape(patches.shape[0], -1).astype(np.float32, copy=False)
        return np.tanh(flat @ self.WT)


def patterns(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """``(cue, motifs)``: mutually orthogonal patterns with unit RMS, shaped like a patch."""
    rng = make_rng(cfg.seed, STREAM_PATTERNS)
    q, _ = np.linalg.qr(rng.standard_normal((cfg.patch_size, cfg.C + 1)))
    q = q.T * np.sqrt(cfg.patch_size)
    q = q.reshape((cfg.C + 1,) + cfg.patch_shape).astype(np.float32)
    return q[0], q[1:]


@dataclass
class Sample:
    id: str
    label: int
    informative: np.ndarray  # level-1 parent indices carrying signal
    features: FeaturePyramid


@dataclass
class SynthDataset:
    cfg: SynthConfig
    encoder: SynthEncoder
    samples: list[Sample]
    splits: dict[str, list[int]] = field(default_factory=dict)
    root: Path | None = None  # set when loaded from disk

    def split(self, name: str) -> list[Sample]:
        if name not in self.splits:
            raise ArgumentError(f"unknown split {name!r}")
        return [self.samples[i] for i in self.splits[name]]

    def patches(self, index: int) -> PatchPyramid:
        """Regenerate the raw patch pyramid of sample ``index`` (bit-identical to generation time)."""
        s = self.samples[index]
        return _sample_patches(self.cfg, index, s.label, s.id)[0]

    def subset(self, n_per_split: dict[str, int]) -> "SynthDataset":
        keep = {name: self.splits[name][:n] for name, n in n_per_split.items()}
        return SynthDataset(self.cfg, self.encoder, self.samples, keep, self.root)


def _labels(cfg: SynthConfig) -> list[int]:
    """Stratified labels: each split is balanced to within one sample per class."""
    out = []
    for k, n in enumerate((cfg.n_train, cfg.n_val, cfg.n_test)):
        rng = make_rng(cfg.seed, STREAM_SYNTH, 0, k)
        out.extend(rng.permutation(np.arange(n) % cfg.C).tolist())
    return out


def _sample_patches(cfg: SynthConfig, index: int, label: int, sample_id: str):
    rng = make_rng(cfg.seed, STREAM_SYNTH, 1, index)
    cue, motifs = patterns(cfg)
    informative = np.sort(rng.choice(cfg.n1, size=cfg.n_informative, replace=False))
    levels = []
    for m, n in enumerate(cfg.sizes):
        lvl = (cfg.noise_std * rng.standard_normal((n,) + cfg.patch_shape)).astype(np.float32)
        rows = descendant_rows(informative, m) if m > 0 else informative
        if m < cfg.levels - 1:
            lvl[rows] += cfg.cue_strength * cue
        else:
            lvl[rows] += cfg.motif_strength * motifs[label]
        levels.append(lvl)
    return PatchPyramid(tuple(levels), label, sample_id), informative


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    encoder = SynthEncoder(cfg.patch_shape, cfg.D, cfg.seed)
    labels = _labels(cfg)
    samples, splits, start = [], {}, 0
    for name, n in zip(SPLITS, (cfg.n_train, cfg.n_val, cfg.n_test)):
        splits[name] = list(range(start, start + n))
        start += n
    for i, label in enumerate(labels):
        sid = f"s{i:05d}"
        pp, informative = _sample_patches(cfg, i, label, sid)
        feats = FeaturePyramid(tuple(encoder.encode(l) for l in pp.levels), label, sid)
        samples.append(Sample(sid, label, informative, feats))
    return SynthDataset(cfg, encoder, samples, splits)


def save_dataset(ds: SynthDataset, root: str | os.PathLike, with_patches: bool = True) -> None:
    """Directory of pyramids plus ``index.json`` listing split membership."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(ds.samples):
        save_pyramid(s.features, root / s.id / "features")
        if with_patches:
            save_pyramid(ds.patches(i), root / s.id / "patches")
    index = {
        "version": 1,
        "config": ds.cfg.to_dict(),
        "with_patches": with_patches,
        "splits": {name: [ds.samples[i].id for i in idx] for name, idx in ds.splits.items()},
        "samples": {s.id: {"label": s.label, "informative": s.informative.tolist()} for s in ds.samples},
    }
    (root / INDEX_FILE).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(root: str | os.PathLike) -> SynthDataset:
    root = Path(root)
    try:
        index = json.loads((root / INDEX_FILE).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{root}: missing {INDEX_FILE}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root}: corrupt {INDEX_FILE} ({exc})") from exc
    cfg_d = dict(index["config"])
    cfg_d["patch_shape"] = tuple(cfg_d["patch_shape"])
    cfg = SynthConfig(**cfg_d)
    order = [sid for name in SPLITS for sid in index["splits"].get(name, [])]
    samples, splits, pos = [], {}, {}
    for sid in order:
        meta = index["samples"][sid]
        feats = load_pyramid(root / sid / "features")
        pos[sid] = len(samples)
        samples.append(Sample(sid, int(meta["label"]), np.asarray(meta["informative"]), feats))
    for name in SPLITS:
        splits[name] = [pos[sid] for sid in index["splits"].get(name, [])]
    return SynthDataset(cfg, SynthEncoder(cfg.patch_shape, cfg.D, cfg.seed), samples, splits, root)


def load_patches(root: str | os.PathLike, sample_id: str) -> PatchPyramid:
    path = Path(root) / sample_id / "patches"
    if not path.exists():
        raise FormatError(f"{path}: dataset was generated without patches")
    return load_pyramid(path)

