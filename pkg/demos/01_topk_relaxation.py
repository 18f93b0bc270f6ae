"""How the perturbed Top-K operator trades sharpness for gradients.

Hard Top-K is piecewise constant in its scores, so it passes no gradient to
whatever produced them. Averaging hard Top-K over Gaussian perturbations of the
scores gives a smooth indicator with a usable Jacobian. This script shows the
soft indicator as the noise scale shrinks, then compares the Monte-Carlo
gradient estimate with a finite difference of the smoothed operator.
"""

import numpy as np

from zoommil import PerturbedTopKConfig, hard_topk, perturbed_topk_backward, perturbed_topk_forward
from zoommil.core import make_rng

np.set_printoptions(precision=3, suppress=True)

a = np.array([0.8, 0.1, 0.6, 0.2])
K = 2
print("scores:", a)
print("hard Top-2 indicator (columns pick rows in index order):")
print(hard_topk(a, K).entries)

# as sigma grows, mass leaks onto the runners-up
for sigma in (0.01, 0.1, 0.5):
    T, _ = perturbed_topk_forward(a, PerturbedTopKConfig(K, sigma, 20_000), make_rng(0))
    print(f"\nsigma = {sigma}: soft indicator")
    print(T.entries)
    print("column sums", T.entries.sum(axis=0), " row sums", T.entries.sum(axis=1))

# gradient of <G, T(a)> from the forward's own noise samples
sigma = 0.5
G = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, 1.0]])  # reward row 0 in col 0, row 3 in col 1
_, cache = perturbed_topk_forward(a, PerturbedTopKConfig(K, sigma, 200_000), make_rng(1))
grad = perturbed_topk_backward(cache, G)


def smoothed(x, seed):
    T, _ = perturbed_topk_forward(x, PerturbedTopKConfig(K, sigma, 200_000), make_rng(seed))
    return float(np.sum(G * T.entries))


# finite differences with shared noise on both sides of each step
eps = 0.05
fd = np.array([(smoothed(a + eps * e, 10 + i) - smoothed(a - eps * e, 10 + i)) / (2 * eps)
               for i, e in enumerate(np.eye(4))])
print("\nestimated gradient   ", grad)
print("finite differences   ", fd)
print("raising a[3] helps, raising a[2] (its rival) hurts:", grad[3] > 0 > grad[2])
