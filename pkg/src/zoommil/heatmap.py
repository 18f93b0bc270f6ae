"""Attention heatmaps on the patch grid, written as binary portable graymaps (PGM)."""

from __future__ import annotations

import math
import os
from typing import Sequence

import numpy as np


def grid_shape(n1: int) -> tuple[int, int]:
    """Rows x columns of the level-1 grid (row-major, as square as possible)."""
    cols = math.ceil(math.sqrt(n1))
    return math.ceil(n1 / cols), cols


def patch_position(index: int, level: int, n1: int) -> tuple[int, int]:
    """Grid cell of patch ``index`` at ``level`` (1-based); children fill their parent's 2x2 block."""
    _, cols = grid_shape(n1)
    depth = level - 1
    root = index // 4 ** depth
    r, c = divmod(root, cols)
    for j in range(depth - 1, -1, -1):
        q = (index // 4 ** j) % 4
        r, c = 2 * r + q // 2, 2 * c + q % 2
    return r, c


def render(scores: Sequence[tuple[int, float]], level: int, n1: int, scale: int = 1) -> np.ndarray:
    """8-bit image with each evaluated patch's weight scaled to the maximum; unevaluated patches are 0."""
    rows, cols = grid_shape(n1)
    side = 2 ** (level - 1)
    img = np.zeros((rows * side, cols * side), dtype=np.float64)
    for idx, w in scores:
        img[patch_position(idx, level, n1)] = w
    peak = img.max()
    if peak > 0:
        img = img / peak
    img = np.rint(img * 255).astype(np.uint8)
    if scale > 1:
        img = np.kron(img, np.ones((scale, scale), dtype=np.uint8))
    return img


def write_pgm(img: np.ndarray, path: str | os.PathLike) -> None:
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = open(path, "rb").read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
