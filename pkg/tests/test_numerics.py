import math

import numpy as np
import pytest

from mdmkit.errors import NumericError, ShapeError
from mdmkit.numerics import Rng, as_matrix, finite_diff_grad, global_l2_norm, matmul


def test_as_matrix_promotes_vectors():
    assert as_matrix([1.0, 2.0]).shape == (1, 2)
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 2, 2)))


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))
    assert matmul(np.eye(2), [[1.0], [2.0]]).tolist() == [[1.0], [2.0]]


def test_global_norm_matches_concatenation():
    a, b = np.arange(6.0).reshape(2, 3), -np.ones((4, 1))
    assert global_l2_norm([a, b]) == pytest.approx(np.linalg.norm(np.concatenate([a.ravel(), b.ravel()])))


def test_finite_diff_on_quadratic():
    q = np.array([[2.0, 0.5], [0.5, 1.0]])
    x = np.array([[0.3, -1.2]])
    num = finite_diff_grad(lambda v: float((v @ q @ v.T)[0, 0]), x)
    np.testing.assert_allclose(num, 2 * x @ q, rtol=1e-9)
    assert x.tolist() == [[0.3, -1.2]]


def test_finite_diff_non_finite_raises():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda v: float("nan"), np.zeros((1, 2)))


def test_rng_determinism_and_state_roundtrip():
    a, b = Rng(7), Rng(7)
    assert np.array_equal(a.normal((3, 4)), b.normal((3, 4)))
    state = a.get_state()
    first = a.uniform(5)
    a.set_state(state)
    assert np.array_equal(a.uniform(5), first)
    c = Rng.from_state(state)
    assert np.array_equal(c.uniform(5), first)
    assert not np.array_equal(Rng(8).uniform(5), Rng(7).uniform(5))


def test_spawn_children_are_distinct_and_reproducible():
    kids = Rng(0).spawn(3)
    again = Rng(0).spawn(3)
    draws = [k.uniform(4) for k in kids]
    assert all(np.array_equal(d, k.uniform(4)) for d, k in zip(draws, again))
    assert not np.array_equal(draws[0], draws[1])


def test_box_muller_moments():
    z = Rng(1).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    # odd sizes are truncated, not padded
    assert Rng(1).normal((3, 3)).shape == (3, 3)


def test_integers_uniform_chi_square():
    k, n = 10, 50_000
    counts = np.bincount(Rng(2).integers(0, k, n), minlength=k)
    chi2 = float(((counts - n / k) ** 2 / (n / k)).sum())
    assert chi2 < 27.88  # 99.9th percentile, 9 dof


def test_choice_without_replacement():
    c = Rng(3).choice(10, 10)
    assert sorted(c.tolist()) == list(range(10))
    assert math.isclose(len(set(Rng(3).choice(100, 30).tolist())), 30)
