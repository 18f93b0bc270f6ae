"""Gated attention pooling with a hand-written reverse pass.

    a = softmax_i( w . (tanh(V h_i) * sigmoid(U h_i)) ),   g = sum_i a_i h_i
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DimensionError, EmptyBagError


@dataclass
class GatedAttentionParams:
    V: np.ndarray  # [L, D]
    U: np.ndarray  # [L, D]
    w: np.ndarray  # [L]

    @property
    def L(self) -> int:
        return self.w.shape[0]

    @property
    def D(self) -> int:
        return self.V.shape[1]

    @classmethod
    def init(cls, D: int, L: int, rng: np.random.Generator, dtype=np.float32) -> "GatedAttentionParams":
        """Fan-in uniform init: V, U ~ U(+-1/sqrt(D)), w ~ U(+-1/sqrt(L))."""
        bd, bl = 1.0 / np.sqrt(D), 1.0 / np.sqrt(L)
        return cls(
            V=rng.uniform(-bd, bd, size=(L, D)).astype(dtype),
            U=rng.uniform(-bd, bd, size=(L, D)).astype(dtype),
            w=rng.uniform(-bl, bl, size=L).astype(dtype),
        )

    def zeros_like(self) -> "GatedAttentionParams":
        return GatedAttentionParams(np.zeros_like(self.V), np.zeros_like(self.U), np.zeros_like(self.w))


@dataclass
class AttentionOutput:
    pooled: np.ndarray   # g, [D]
    weights: np.ndarray  # a, [N]
    logits: np.ndarray   # pre-softmax scores, [N]
    cache: tuple


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def ga_forward(H: np.ndarray, params: GatedAttentionParams) -> AttentionOutput:
    if H.ndim != 2:
        raise DimensionError(f"H must be [N, D], got shape {H.shape}")
    if H.shape[0] == 0:
        raise EmptyBagError("gated attention on an empty bag")
    if H.shape[1] != params.D or params.U.shape != params.V.shape or params.w.shape != (params.L,):
        raise DimensionError(
            f"shape mismatch: H {H.shape}, V {params.V.shape}, U {params.U.shape}, w {params.w.shape}"
        )
    t = np.tanh(H @ params.V.T)
    u = sigmoid(H @ params.U.T)
    gated = t * u
    logits = gated @ params.w
    a = softmax(logits)
    g = a @ H
    return AttentionOutput(g, a, logits, (H, params, t, u, gated, a))


def ga_backward(cache: tuple, grad_pooled: np.ndarray, grad_weights: np.ndarray | None = None):
    """Gradients of a scalar loss given dL/dg and optionally dL/da.

    Returns ``(grad_H, grad_params)``.
    """
    H, params, t, u, gated, a = cache
    if grad_pooled.shape != (H.shape[1],):
        raise DimensionError(f"grad_pooled shape {grad_pooled.shape} != ({H.shape[1]},)")
    da = H @ grad_pooled
    if grad_weights is not None:
        if grad_weights.shape != a.shape:
            raise DimensionError(f"grad_weights shape {grad_weights.shape} != {a.shape}")
        da = da + grad_weights
    dlogits = a * (da - a @ da)

    dw = gated.T @ dlogits
    dgated = np.outer(dlogits, params.w)
    dA = dgated * u * (1.0 - t * t)
    dB = dgated * t * u * (1.0 - u)

    grad_H = np.outer(a, grad_pooled) + dA @ params.V + dB @ params.U
    grads = GatedAttentionParams(V=dA.T @ H, U=dB.T @ H, w=dw)
    return grad_H, grads


def ga_flops(n: int, D: int, L: int) -> int:
    """Arithmetic count of one forward pass on ``n`` rows (MAC = 2, elementwise op = 1)."""
    projections = 2 * (2 * n * L * D)
    activations = 2 * n * L          # tanh, sigmoid
    gate = n * L
    score = 2 * n * L
    softmax_ops = 3 * n              # exp, sum, divide
    pooling = 2 * n * D
    return projections + activations + gate + score + softmax_ops + pooling
