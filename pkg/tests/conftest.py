import numpy as np
import pytest

from zoommil.core import FeaturePyramid
from zoommil.synth import SynthConfig, generate_dataset


def central_diff(f, x, eps=1e-6):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def random_pyramid(rng, n1=4, M=3, D=6, dtype=np.float64, label=0, sid="p"):
    levels = tuple(rng.standard_normal((n1 * 4 ** m, D)).astype(dtype) for m in range(M))
    return FeaturePyramid(levels, label, sid)


@pytest.fixture(scope="session")
def tiny_dataset():
    cfg = SynthConfig(n_train=24, n_val=9, n_test=9, seed=3)
    return generate_dataset(cfg)
