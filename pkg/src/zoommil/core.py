"""Pyramid containers, indicator matrices, seeded RNG streams and the on-disk pyramid format.

Row layout contract: the four children of row ``i`` at level ``m`` are rows
``[4i, 4i + 4)`` at level ``m + 1``. Everything downstream (Kronecker expansion,
lazy encoding, heatmaps) relies on it.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

FORMAT_VERSION = 1
BRANCHING = 4


class ZoomError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ZoomError, ValueError):
    pass


class FormatError(ZoomError, ValueError):
    pass


class ArgumentError(ZoomError, ValueError):
    pass


class EmptyBagError(ZoomError, ValueError):
    pass


class ScheduleError(ZoomError, ValueError):
    pass


class AvailabilityError(ZoomError, LookupError):
    pass


class CacheError(ZoomError, RuntimeError):
    pass


class TrainingError(ZoomError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# RNG streams
# ---------------------------------------------------------------------------

STREAM_INIT = 1
STREAM_SYNTH = 2
STREAM_TRAIN = 3
STREAM_SHUFFLE = 4
STREAM_RANDOM_SELECT = 5
STREAM_ENCODER = 6
STREAM_PATTERNS = 7


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Return an independent generator for ``(seed, *stream)``.

    Streams are split with ``SeedSequence`` spawn keys, so ``make_rng(s, 3, 7)``
    and ``make_rng(s, 3, 8)`` are statistically independent while both are
    fully determined by ``s``.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in stream))
    return np.random.Generator(np.random.PCG64(ss))


def stable_hash(text: str) -> int:
    """Process-independent 32-bit hash for deriving streams from sample ids."""
    return zlib.crc32(text.encode("utf-8"))


# ---------------------------------------------------------------------------
# Index contract
# ---------------------------------------------------------------------------

def children_of(parent_index: int, level_gap: int = 1, n_parents: int | None = None) -> range:
    """Rows at level ``m + level_gap`` descending from ``parent_index`` at level ``m``."""
    if level_gap < 1:
        raise ArgumentError(f"level_gap must be >= 1, got {level_gap}")
    if parent_index < 0 or (n_parents is not None and parent_index >= n_parents):
        raise IndexError(f"parent index {parent_index} out of range for {n_parents} rows")
    span = BRANCHING ** level_gap
    return range(parent_index * span, (parent_index + 1) * span)


def descendant_rows(parents: Sequence[int] | np.ndarray, level_gap: int = 1) -> np.ndarray:
    """Concatenated child rows of ``parents`` in parent-major order."""
    span = BRANCHING ** level_gap
    parents = np.asarray(parents, dtype=np.int64)
    return (parents[:, None] * span + np.arange(span)[None, :]).reshape(-1)


def _check_levels(levels: Sequence[np.ndarray], trailing: tuple[int, ...] | None = None) -> None:
    if len(levels) == 0:
        raise FormatError("pyramid has no levels")
    tail = levels[0].shape[1:] if trailing is None else trailing
    for m, lvl in enumerate(levels, start=1):
        if lvl.shape[1:] != tail:
            raise FormatError(f"level {m}: trailing shape {lvl.shape[1:]} != {tail}")
        if not np.all(np.isfinite(lvl)):
            raise FormatError(f"level {m}: non-finite values")
        if m > 1 and lvl.shape[0] != BRANCHING * levels[m - 2].shape[0]:
            raise FormatError(
                f"level ratio violated at level {m}: {lvl.shape[0]} rows != 4 * {levels[m - 2].shape[0]}"
            )


@dataclass(frozen=True)
class FeaturePyramid:
    """Per-level feature matrices ``[N_m, D]`` with ``N_{m+1} = 4 N_m``."""

    levels: tuple[np.ndarray, ...]
    label: int = 0
    id: str = ""

    def __post_init__(self):
        levels = tuple(np.asarray(l) for l in self.levels)
        if any(l.ndim != 2 for l in levels):
            raise FormatError("feature levels must be 2-D matrices")
        _check_levels(levels)
        for l in levels:
            l.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def M(self) -> int:
        return len(self.levels)

    @property
    def D(self) -> int:
        return self.levels[0].shape[1]

    @property
    def sizes(self) -> list[int]:
        return [l.shape[0] for l in self.levels]

    def astype(self, dtype) -> "FeaturePyramid":
        return FeaturePyramid(tuple(l.astype(dtype) for l in self.levels), self.label, self.id)


@dataclass(frozen=True)
class PatchPyramid:
    """Per-level raw patches ``[N_m, p_h, p_w, p_c]``, same index contract as :class:`FeaturePyramid`."""

    levels: tuple[np.ndarray, ...]
    label: int = 0
    id: str = ""

    def __post_init__(self):
        levels = tuple(np.asarray(l) for l in self.levels)
        if any(l.ndim != 4 for l in levels):
            raise FormatError("patch levels must be 4-D arrays [n, p_h, p_w, p_c]")
        _check_levels(levels)
        for l in levels:
            l.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def M(self) -> int:
        return len(self.levels)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return tuple(self.levels[0].shape[1:])

    @property
    def sizes(self) -> list[int]:
        return [l.shape[0] for l in self.levels]


Pyramid = Union[FeaturePyramid, PatchPyramid]


# ---------------------------------------------------------------------------
# Indicator matrices
# ---------------------------------------------------------------------------

@dataclass
class IndicatorMatrix:
    """``N x K`` selection matrix; hard mode is one-hot per column with ascending rows."""

    entries: np.ndarray
    mode: str = "hard"
    indices: np.ndarray | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.entries.shape[0]

    @property
    def K(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def from_indices(cls, indices: np.ndarray, n: int, dtype=np.float64) -> "IndicatorMatrix":
        indices = np.asarray(indices, dtype=np.int64)
        T = np.zeros((n, len(indices)), dtype=dtype)
        T[indices, np.arange(len(indices))] = 1
        return cls(T, "hard", indices)

    def selected(self) -> np.ndarray:
        """Row index per column (hard mode) or the argmax row per column (soft mode)."""
        if self.indices is not None:
            return self.indices
        return np.argmax(self.entries, axis=0)

    def violations(self, tol: float = 1e-5) -> list[str]:
        T = np.asarray(self.entries, dtype=np.float64)
        out = []
        if T.ndim != 2:
            return ["entries must be a matrix"]
        if np.any(T < -tol) or np.any(T > 1 + tol):
            out.append("entries outside [0, 1]")
        col_tol = 0.0 if self.mode == "hard" else tol
        if np.any(np.abs(T.sum(axis=0) - 1) > col_tol):
            out.append("column sums != 1")
        if np.any(T.sum(axis=1) > 1 + tol):
            out.append("row sums > 1")
        if self.mode == "hard":
            if not np.all((T == 0) | (T == 1)):
                out.append("hard entries not in {0, 1}")
            elif T.shape[1] > 0:
                rows = np.argmax(T, axis=0)
                if np.any(np.diff(rows) <= 0):
                    out.append("selected rows not strictly increasing")
        return out

    def check(self, tol: float = 1e-5) -> "IndicatorMatrix":
        bad = self.violations(tol)
        if bad:
            raise ArgumentError("invalid indicator matrix: " + "; ".join(bad))
        return self


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------

def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def save_pyramid(pyramid: Pyramid, path: str | os.PathLike) -> None:
    """Write ``pyramid`` as a directory: ``manifest`` (JSON) plus ``level_<m>.bin`` (f32 LE, row-major)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if isinstance(pyramid, FeaturePyramid):
        kind, dims = "features", {"D": pyramid.D}
    else:
        kind, dims = "patches", {"patch_shape": list(pyramid.patch_shape)}
    manifest = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "M": pyramid.M,
        **dims,
        "N": pyramid.sizes,
        "label": int(pyramid.label),
        "id": pyramid.id,
        "dtype": "f32le",
    }
    for m, lvl in enumerate(pyramid.levels, start=1):
        (root / f"level_{m}.bin").write_bytes(np.ascontiguousarray(lvl, dtype="<f4").tobytes())
    _atomic_write_text(root / "manifest", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_pyramid(path: str | os.PathLike) -> Pyramid:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{root}: missing manifest") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{root}: manifest is not valid JSON ({exc})") from exc

    if manifest.get("version") != FORMAT_VERSION:
        raise FormatError(f"{root}: unsupported version {manifest.get('version')!r}")
    if manifest.get("dtype") != "f32le":
        raise FormatError(f"{root}: unsupported dtype {manifest.get('dtype')!r}")
    sizes = [int(n) for n in manifest["N"]]
    if len(sizes) != int(manifest["M"]):
        raise FormatError(f"{root}: M={manifest['M']} but {len(sizes)} level sizes")
    for m in range(1, len(sizes)):
        if sizes[m] != BRANCHING * sizes[m - 1]:
            raise FormatError(f"level ratio violated at level {m + 1}: {sizes[m]} != 4 * {sizes[m - 1]}")

    kind = manifest.get("kind", "features")
    trailing = (int(manifest["D"]),) if kind == "features" else tuple(int(d) for d in manifest["patch_shape"])
    levels = []
    for m, n in enumerate(sizes, start=1):
        f = root / f"level_{m}.bin"
        if not f.exists():
            raise FormatError(f"level {m}: missing {f.name}")
        raw = f.read_bytes()
        want = n * int(np.prod(trailing)) * 4
        if len(raw) < want:
            raise FormatError(f"level {m}: short read ({len(raw)} of {want} bytes)")
        if len(raw) > want:
            raise FormatError(f"level {m}: shape mismatch vs manifest ({len(raw)} bytes, expected {want})")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape((n,) + trailing)
        if not np.all(np.isfinite(arr)):
            raise FormatError(f"level {m}: non-finite values")
        levels.append(arr)

    cls = FeaturePyramid if kind == "features" else PatchPyramid
    return cls(tuple(levels), int(manifest.get("label", 0)), str(manifest.get("id", "")))
