import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mdmkit.errors import ConfigError, DegenerateRowError, PreconditionError, ShapeError
from mdmkit.numerics import finite_diff_grad
from mdmkit.sphere import (KERNELS, KernelSpec, angular_distance, gram, gram_vjp, kernel_eval,
                           make_joint_batch, unit_normalize)

# exp(-(pi/2)^2 / (2 * 0.5^2)), evaluated with mpmath at 30 digits
ORTHOGONAL_GEODESIC = 0.00719188335582636560780136639637


def _k_loop(kind, sigma, a, b):
    """Scalar reference kernel written straight from the definitions."""
    a = a / math.sqrt(sum(v * v for v in a))
    b = b / math.sqrt(sum(v * v for v in b))
    c = sum(x * y for x, y in zip(a, b))
    if kind == "geodesic":
        c = min(max(c, -1 + 1e-7), 1 - 1e-7)
        return math.exp(-math.acos(c) ** 2 / (2 * sigma ** 2))
    if kind == "chordal":
        return math.exp(-sum((x - y) ** 2 for x, y in zip(a, b)) / (2 * sigma ** 2))
    return math.exp(-sum(abs(x - y) for x, y in zip(a, b)) / sigma)


def test_kernel_spec_validation():
    with pytest.raises(ConfigError):
        KernelSpec("rbf")
    with pytest.raises(ConfigError):
        KernelSpec("geodesic", 0.0)


@pytest.mark.parametrize("kind", KERNELS)
def test_self_similarity_is_one(kind, rng):
    # the geodesic cosine clamp leaves arccos(1 - 1e-7) ~ 4.5e-4 at a == b
    tol = 1 - math.exp(-math.acos(1 - 1e-7) ** 2 / (2 * 0.25)) if kind == "geodesic" else 0.0
    for _ in range(10):
        a = rng.normal(size=7)
        assert abs(kernel_eval(KernelSpec(kind), a, a) - 1.0) <= tol + 1e-12


def test_orthogonal_geodesic_value():
    v = kernel_eval(KernelSpec("geodesic", 0.5), [1, 0, 0], [0, 1, 0])
    assert abs(v - ORTHOGONAL_GEODESIC) < 1e-6


def test_geodesic_antipodal_is_finite():
    v = kernel_eval(KernelSpec("geodesic", 0.5), [1, 0], [-1, 0])
    assert math.isfinite(v) and 0 < v < 1e-8


@pytest.mark.parametrize("kind", KERNELS)
def test_gram_matches_scalar_loop(kind, rng):
    x, y = rng.normal(size=(5, 4)), rng.normal(size=(3, 4))
    spec = KernelSpec(kind, 0.7)
    k = gram(spec, unit_normalize(x), unit_normalize(y))
    ref = np.array([[_k_loop(kind, 0.7, a, b) for b in y] for a in x])
    np.testing.assert_allclose(k, ref, rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("kind", KERNELS)
def test_gram_vjp_matches_finite_differences(kind, rng):
    x, y = unit_normalize(rng.normal(size=(4, 5))), unit_normalize(rng.normal(size=(3, 5)))
    w = rng.normal(size=(4, 3))
    spec = KernelSpec(kind, 0.8)
    _, dx, dy = gram_vjp(spec, x, y, w)
    nx = finite_diff_grad(lambda v: float((w * gram(spec, v, y)).sum()), x)
    ny = finite_diff_grad(lambda v: float((w * gram(spec, x, v)).sum()), y)
    np.testing.assert_allclose(dx, nx, rtol=1e-5, atol=1e-8)
    np.testing.assert_allclose(dy, ny, rtol=1e-5, atol=1e-8)


def test_angular_distance_requires_unit_inputs():
    assert angular_distance([1, 0], [0, 1]) == pytest.approx(math.pi / 2)
    with pytest.raises(PreconditionError):
        angular_distance([2, 0], [0, 1])


def test_unit_normalize_degenerate_row():
    with pytest.raises(DegenerateRowError) as info:
        unit_normalize([[1.0, 0.0], [0.0, 0.0]])
    assert info.value.row == 1


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-5, 5)).filter(
    lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-3)))
def test_unit_normalize_rows_have_unit_norm(x):
    np.testing.assert_allclose(np.linalg.norm(unit_normalize(x), axis=1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(KERNELS),
       arrays(np.float64, (4, 3), elements=st.floats(-3, 3)).filter(
           lambda a: np.all(np.linalg.norm(a, axis=1) > 1e-2)))
def test_gram_symmetric_and_bounded(kind, x):
    u = unit_normalize(x)
    k = gram(KernelSpec(kind), u, u)
    np.testing.assert_allclose(k, k.T, atol=1e-12)
    assert np.all((k >= 0) & (k <= 1 + 1e-12))


def test_joint_batch_construction_and_drops():
    zv = np.array([[1.0, 0.0], [0.0, 2.0], [1.0, 1.0]])
    zt = np.array([[3.0, 0.0], [0.0, -1.0], [1.0, -1.0]])
    b = make_joint_batch(zv, zt)
    # row 0: coincident -> no g; row 1: antipodal -> no u
    assert b.g_kept.tolist() == [1, 2]
    assert b.u_kept.tolist() == [0, 2]
    assert b.dropped_g == 1 and b.dropped_u == 1
    np.testing.assert_allclose(b.u[0], [1.0, 0.0])
    np.testing.assert_allclose(b.g_rows[0], [0.0, 1.0])
    np.testing.assert_allclose(np.linalg.norm(b.u, axis=1), 1.0)


def test_joint_batch_shape_mismatch():
    with pytest.raises(ShapeError):
        make_joint_batch(np.ones((2, 3)), np.ones((3, 3)))
