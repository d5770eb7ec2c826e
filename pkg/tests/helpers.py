"""Shared fixtures-as-functions for the test modules."""

import numpy as np

from gccm.autodiff import Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar function ``f`` at ``x``."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += h
        down[idx] -= h
        g[idx] = (f(up) - f(down)) / (2 * h)
    return g


def max_rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    rel = np.where(scale < 1e-8, diff, diff / np.maximum(scale, 1e-300))
    return float(rel.max())


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    leaf = Tensor(x, requires_grad=True)
    build(leaf).backward()
    return leaf.grad


def ring_adjacency(n: int) -> np.ndarray:
    a = np.zeros((n, n))
    for i in range(n):
        a[i, (i + 1) % n] = a[(i + 1) % n, i] = 1.0
    return a


def random_adjacency(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    a = np.triu((rng.random((n, n)) < p).astype(float), 1)
    return a + a.T
