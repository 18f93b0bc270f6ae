"""Top-K patch selection: hard, perturbed (differentiable), and Kronecker expansion across levels."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import BRANCHING, ArgumentError, DimensionError, IndicatorMatrix, descendant_rows


@dataclass(frozen=True)
class PerturbedTopKConfig:
    K: int
    sigma: float = 0.05
    num_samples: int = 100
    rng_stream: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ArgumentError(f"K must be >= 1, got {self.K}")
        if not self.sigma > 0:
            raise ArgumentError(f"sigma must be > 0, got {self.sigma}")
        if self.num_samples < 1:
            raise ArgumentError(f"num_samples must be >= 1, got {self.num_samples}")


@dataclass
class PerturbedTopKCache:
    noise: np.ndarray    # Z, [S, N]
    indices: np.ndarray  # selected rows per sample, ascending, [S, K]
    a: np.ndarray        # unperturbed input, [N]
    sigma: float

    def hard_indicators(self) -> list[IndicatorMatrix]:
        n = self.a.shape[0]
        return [IndicatorMatrix.from_indices(idx, n) for idx in self.indices]


def topk_indices(scores: np.ndarray, K: int) -> np.ndarray:
    """Ascending row indices of the K largest entries along the last axis; ties go to the lower index."""
    n = scores.shape[-1]
    if not 1 <= K <= n:
        raise ArgumentError(f"K={K} must satisfy 1 <= K <= N={n}")
    order = np.argsort(-scores, axis=-1, kind="stable")[..., :K]
    return np.sort(order, axis=-1)


def hard_topk(a: np.ndarray, K: int) -> IndicatorMatrix:
    a = np.asarray(a)
    idx = topk_indices(a, K)
    return IndicatorMatrix.from_indices(idx, a.shape[0], dtype=a.dtype if a.dtype.kind == "f" else np.float64)


def random_topk(n: int, K: int, rng: np.random.Generator, dtype=np.float64) -> IndicatorMatrix:
    """Uniformly random K of n rows, in ascending order (the Random-K ablation)."""
    if not 1 <= K <= n:
        raise ArgumentError(f"K={K} must satisfy 1 <= K <= N={n}")
    idx = np.sort(rng.choice(n, size=K, replace=False))
    return IndicatorMatrix.from_indices(idx, n, dtype=dtype)


def perturbed_topk_forward(
    a: np.ndarray,
    cfg: PerturbedTopKConfig,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
):
    """Monte-Carlo mean of hard Top-K over ``a + sigma Z``; one Z per sample shared by all K columns.

    Pass ``noise`` (``[S, N]``) instead of ``rng`` to replay a previous draw.
    Returns ``(IndicatorMatrix(mode="soft"), PerturbedTopKCache)``.
    """
    a = np.asarray(a)
    n, K = a.shape[0], cfg.K
    if K > n:
        raise ArgumentError(f"K={K} exceeds N={n}")
    if noise is None:
        if rng is None:
            raise ArgumentError("perturbed_topk_forward needs rng or noise")
        Z = rng.standard_normal((cfg.num_samples, n)).astype(a.dtype, copy=False)
    else:
        Z = np.asarray(noise, dtype=a.dtype)
        if Z.ndim != 2 or Z.shape[1] != n:
            raise DimensionError(f"noise shape {Z.shape} incompatible with N={n}")
    S = Z.shape[0]
    idx = topk_indices(a[None, :] + cfg.sigma * Z, K)
    counts = np.bincount((idx * K + np.arange(K)).ravel(), minlength=n * K).reshape(n, K)
    T = (counts / S).astype(a.dtype)
    return IndicatorMatrix(T, "soft"), PerturbedTopKCache(Z, idx, a, cfg.sigma)


def perturbed_topk_backward(cache: PerturbedTopKCache, grad_T: np.ndarray, sigma: float | None = None) -> np.ndarray:
    """Vector-Jacobian product with the forward's own noise samples.

    grad_a = 1 / (sigma S) * sum_s <grad_T, T_s>_F Z_s
    """
    sigma = cache.sigma if sigma is None else sigma
    S, K = cache.indices.shape
    n = cache.a.shape[0]
    if grad_T.shape != (n, K):
        raise DimensionError(f"grad_T shape {grad_T.shape} != ({n}, {K})")
    inner = grad_T[cache.indices, np.arange(K)[None, :]].sum(axis=1)  # <grad_T, T_s> per sample
    return (inner @ cache.noise) / (sigma * S)


def expand_indicator(T: IndicatorMatrix, level_gap: int) -> IndicatorMatrix:
    """``T kron I_{4^gap}``: selecting a parent selects all its descendants ``level_gap`` levels down."""
    if level_gap < 1:
        raise ArgumentError(f"level_gap must be >= 1, got {level_gap}")
    span = BRANCHING ** level_gap
    E = np.kron(T.entries, np.eye(span, dtype=T.entries.dtype))
    indices = descendant_rows(T.indices, level_gap) if T.indices is not None else None
    return IndicatorMatrix(E, T.mode, indices)


def select_rows(T: IndicatorMatrix, X: np.ndarray) -> np.ndarray:
    """``T^T X`` over the leading axis; a pure gather in hard mode."""
    if X.shape[0] != T.N:
        raise DimensionError(f"X has {X.shape[0]} rows but indicator has {T.N}")
    if T.mode == "hard" and T.indices is not None:
        return X[T.indices]
    flat = X.reshape(X.shape[0], -1)
    return (T.entries.T @ flat).reshape((T.K,) + X.shape[1:])


# The two helpers below compute select_rows(expand_indicator(T, gap), X) and its
# adjoint without materialising the Kronecker product.

def zoom_select(T: np.ndarray, X: np.ndarray, level_gap: int) -> np.ndarray:
    n, K = T.shape
    span = BRANCHING ** level_gap
    if X.shape[0] != n * span:
        raise DimensionError(f"X has {X.shape[0]} rows, expected {n} * {span}")
    Xr = X.reshape(n, span * X.shape[1])
    return (T.T @ Xr).reshape(K * span, X.shape[1])


def zoom_select_backward(T: np.ndarray, X: np.ndarray, grad_out: np.ndarray, level_gap: int):
    """Returns ``(grad_T, grad_X)`` for ``out = zoom_select(T, X, level_gap)``."""
    n, K = T.shape
    span = BRANCHING ** level_gap
    Xr = X.reshape(n, -1)
    Gr = grad_out.reshape(K, -1)
    return Xr @ Gr.T, (T @ Gr).reshape(X.shape)
