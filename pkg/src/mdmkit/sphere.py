"""Unit-hypersphere geometry: normalization, angular distance, RBF kernels.

Three kernels are supported, all evaluated on unit-normalized rows:

* ``geodesic``  exp(-arccos(<a,b>)^2 / (2 sigma^2))
* ``chordal``   exp(-(2 - 2<a,b>) / (2 sigma^2))
* ``laplacian`` exp(-||a - b||_1 / sigma)
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateRowError, PreconditionError, ShapeError
from .numerics import as_matrix

KERNELS = ("geodesic", "chordal", "laplacian")

COS_CLAMP = 1e-7
NORM_EPS = 1e-12


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "geodesic"
    sigma: float = 0.5

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ConfigError(f"unknown kernel kind {self.kind!r}; expected one of {KERNELS}")
        if not self.sigma > 0:
            raise ConfigError(f"kernel sigma must be > 0, got {self.sigma}")


def row_norms(rows: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", rows, rows))


def unit_normalize(rows) -> np.ndarray:
    """Divide every row by its L2 norm.

    Raises:
        DegenerateRowError: if a row has norm below 1e-12.
    """
    rows = as_matrix(rows)
    norms = row_norms(rows)
    bad = np.flatnonzero(~(norms >= NORM_EPS))
    if bad.size:
        raise DegenerateRowError(int(bad[0]), float(norms[bad[0]]))
    return rows / norms[:, None]


def normalize_vjp(grad_out: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """Pull a gradient back through ``x -> x / ||x||`` row-wise."""
    radial = np.einsum("ij,ij->i", grad_out, unit)
    return (grad_out - radial[:, None] * unit) / norms[:, None]


def clamp_cos(c):
    return np.clip(c, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)


def angular_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    for name, v in (("a", a), ("b", b)):
        if abs(np.linalg.norm(v) - 1.0) > 1e-6:
            raise PreconditionError(f"{name} is not unit-norm")
    return float(np.arccos(clamp_cos(np.dot(a, b))))


def kernel_eval(spec: KernelSpec, a, b) -> float:
    a = unit_normalize(np.asarray(a, dtype=np.float64).ravel())
    b = unit_normalize(np.asarray(b, dtype=np.float64).ravel())
    return float(gram(spec, a, b)[0, 0])


def _cos_matrix(x, y):
    return x @ y.T


def gram(spec: KernelSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Kernel matrix ``K[i, j] = k(x_i, y_j)`` for unit rows ``x`` and ``y``."""
    s2 = spec.sigma ** 2
    if spec.kind == "geodesic":
        phi = np.arccos(clamp_cos(_cos_matrix(x, y)))
        return np.exp(-phi * phi / (2.0 * s2))
    if spec.kind == "chordal":
        c = _cos_matrix(x, y)
        return np.exp(-(2.0 - 2.0 * c) / (2.0 * s2))
    l1 = np.abs(x[:, None, :] - y[None, :, :]).sum(axis=2)
    return np.exp(-l1 / spec.sigma)


def gram_vjp(spec: KernelSpec, x: np.ndarray, y: np.ndarray, weights: np.ndarray):
    """Gradients of ``sum_ij weights[i,j] * k(x_i, y_j)`` w.r.t. ``x`` and ``y``.

    Inputs are treated as free vectors (no normalization Jacobian). For the
    geodesic kernel the cosine clamp has zero derivative outside its range.

    Returns:
        (value, d_x, d_y)
    """
    k = gram(spec, x, y)
    value = float((weights * k).sum())
    s2 = spec.sigma ** 2
    if spec.kind in ("geodesic", "chordal"):
        c = _cos_matrix(x, y)
        if spec.kind == "geodesic":
            cc = clamp_cos(c)
            phi = np.arccos(cc)
            inside = (c > -1.0 + COS_CLAMP) & (c < 1.0 - COS_CLAMP)
            # dk/dc = k * phi / (sigma^2 sqrt(1 - c^2))
            dkdc = np.where(inside, k * phi / (s2 * np.sqrt(1.0 - cc * cc)), 0.0)
        else:
            dkdc = k / s2
        w = weights * dkdc
        return value, w @ y, w.T @ x
    sign = np.sign(x[:, None, :] - y[None, :, :])
    w = (weights * k / spec.sigma)[:, :, None]
    d_x = -(w * sign).sum(axis=1)
    d_y = (w * sign).sum(axis=0)
    return value, d_x, d_y


@dataclass
class JointBatch:
    """Unit modality embeddings with their agreement/discrepancy directions.

    ``u_kept`` / ``g_kept`` index the rows whose sum / difference survived
    the degeneracy guard; ``u`` and ``g_rows`` hold only those rows.
    """

    zv: np.ndarray
    zt: np.ndarray
    u: np.ndarray
    g_rows: np.ndarray
    u_kept: np.ndarray
    g_kept: np.ndarray
    # backward cache
    zv_norms: np.ndarray = field(repr=False, default=None)
    zt_norms: np.ndarray = field(repr=False, default=None)
    sum_norms: np.ndarray = field(repr=False, default=None)
    diff_norms: np.ndarray = field(repr=False, default=None)

    @property
    def size(self) -> int:
        return self.zv.shape[0]

    @property
    def dropped_u(self) -> int:
        return self.size - self.u_kept.size

    @property
    def dropped_g(self) -> int:
        return self.size - self.g_kept.size


def make_joint_batch(zv_raw, zt_raw, eps_gap: float = 1e-8) -> JointBatch:
    """Normalize both modalities and build u = n(zv + zt), g = n(zv - zt).

    Rows where ``||zv - zt|| < eps_gap`` are left out of ``g_rows``; rows where
    ``||zv + zt|| < eps_gap`` (antipodal modalities) are left out of ``u``.
    """
    zv_raw = as_matrix(zv_raw)
    zt_raw = as_matrix(zt_raw)
    if zv_raw.shape != zt_raw.shape:
        raise ShapeError(f"modality shapes differ: {zv_raw.shape} vs {zt_raw.shape}")
    zv_n = row_norms(zv_raw)
    zt_n = row_norms(zt_raw)
    zv = unit_normalize(zv_raw)
    zt = unit_normalize(zt_raw)
    s = zv + zt
    dif = zv - zt
    s_n = row_norms(s)
    d_n = row_norms(dif)
    u_kept = np.flatnonzero(s_n >= eps_gap)
    g_kept = np.flatnonzero(d_n >= eps_gap)
    d = zv.shape[1]
    u = s[u_kept] / s_n[u_kept, None] if u_kept.size else np.zeros((0, d))
    g = dif[g_kept] / d_n[g_kept, None] if g_kept.size else np.zeros((0, d))
    return JointBatch(zv, zt, u, g, u_kept, g_kept, zv_n, zt_n, s_n, d_n)
