import numpy as np
import pytest

from lcnn.autodiff import Tensor, ops
from lcnn.layers import centered_softplus


def fd_gradient(f, x, h=1e-5):
    """Central differences of a scalar numpy function."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


class RandomMLP:
    """A seeded three-layer network mapping (N, d) inputs to per-sample losses."""

    def __init__(self, seed, d=4, hidden=6, classes=3, n=3):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(size=(hidden, d)) / np.sqrt(d)
        self.b1 = rng.normal(size=hidden) * 0.1
        self.w2 = rng.normal(size=(hidden, hidden)) / np.sqrt(hidden)
        self.w3 = rng.normal(size=(classes, hidden)) / np.sqrt(hidden)
        self.beta = float(rng.uniform(0.5, 3.0))
        self.x = rng.normal(size=(n, d))
        self.y = rng.integers(0, classes, n)

    def per_sample(self, x):
        h = centered_softplus(ops.matmul(x, self.w1.T) + self.b1, self.beta)
        h = ops.tanh(ops.matmul(h, self.w2.T))
        return ops.cross_entropy(ops.matmul(h, self.w3.T), self.y)

    def loss(self, x):
        return ops.sum(self.per_sample(x))

    def loss_np(self, x):
        return self.loss(Tensor(x)).item()


@pytest.fixture
def random_mlp():
    return RandomMLP
