"""Matrix helpers, the seeded generator, and the finite-difference gradient oracle.

Matrices are plain 2-D ``float64`` numpy arrays.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={a.ndim}")
    return a


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def global_l2_norm(mats: Sequence[np.ndarray]) -> float:
    """Euclidean norm over every entry of every array in ``mats``."""
    total = 0.0
    for m in mats:
        m = np.asarray(m, dtype=np.float64)
        total += float(np.dot(m.ravel(), m.ravel()))
    return math.sqrt(total)


def finite_diff_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Each entry is ``(f(x + h e_ij) - f(x - h e_ij)) / (2h)``. ``x`` is not
    modified.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericError(f"non-finite function value at flat index {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


class Rng:
    """Seeded random stream backed by numpy's PCG64.

    Gaussian draws use Box-Muller on the uniform stream so the normal
    sampler is fixed and independent of numpy's ziggurat implementation.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._bitgen = np.random.PCG64(np.random.SeedSequence(self.seed))
        self._gen = np.random.Generator(self._bitgen)

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state.get("seed", 0))
        rng.set_state(state)
        return rng

    def get_state(self) -> dict:
        return {"seed": self.seed, "pcg64": self._bitgen.state}

    def set_state(self, state: dict) -> None:
        self._bitgen.state = state["pcg64"]

    def spawn(self, n: int) -> list["Rng"]:
        """Derive ``n`` independent child generators from this stream."""
        seeds = self._gen.integers(0, 2**63 - 1, size=n)
        return [Rng(int(s)) for s in seeds]

    def uniform(self, size=None):
        return self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, k: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=replace)
