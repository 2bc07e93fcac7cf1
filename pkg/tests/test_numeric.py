"""Tests for the shared numeric helpers and the finite-difference oracle."""

import numpy as np
import pytest

from skiprec.numeric import (
    GradientProbeError,
    ShapeError,
    affine,
    as_matrix,
    as_vector,
    finite_diff_grad,
    finite_diff_tensor_grads,
    l2sq,
    relative_gap,
    sigmoid_map,
    stable_sigmoid,
    tanh_map,
)


def test_as_vector_coerces_lists_to_float64():
    v = as_vector([1, 2, 3])
    assert v.dtype == np.float64
    assert v.shape == (3,)


def test_as_vector_rejects_wrong_rank_and_empty():
    with pytest.raises(ShapeError):
        as_vector(np.zeros((2, 2)))
    with pytest.raises(ShapeError):
        as_vector([])
    with pytest.raises(ShapeError):
        as_vector(3.0)


def test_as_vector_rejects_non_finite():
    with pytest.raises(ValueError):
        as_vector([1.0, np.nan])
    with pytest.raises(ValueError):
        as_vector([np.inf, 0.0])


def test_as_matrix_shape_checks():
    m = as_matrix([[1.0, 2.0], [3.0, 4.0]])
    assert m.shape == (2, 2)
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((0, 3)))


def test_affine_known_value():
    w = [[1.0, 2.0], [0.0, -1.0]]
    x = [3.0, 4.0]
    b = [0.5, 0.5]
    np.testing.assert_allclose(affine(w, x, b), [11.5, -3.5])


def test_affine_dimension_errors():
    with pytest.raises(ShapeError):
        affine(np.eye(2), [1.0, 2.0, 3.0], [0.0, 0.0])
    with pytest.raises(ShapeError):
        affine(np.eye(2), [1.0, 2.0], [0.0, 0.0, 0.0])


def test_tanh_map_frozen_value():
    out = tanh_map([0.0, 1.0])
    assert out[0] == 0.0
    assert out[1] == pytest.approx(0.7615941559557649, abs=1e-15)


def test_sigmoid_frozen_value_and_symmetry():
    out = sigmoid_map([0.0, 1.0, -1.0])
    assert out[0] == 0.5
    assert out[1] == pytest.approx(0.7310585786300049, abs=1e-15)
    assert out[1] + out[2] == pytest.approx(1.0, abs=1e-15)


def test_stable_sigmoid_extremes_do_not_overflow():
    out = stable_sigmoid(np.array([-1000.0, 1000.0]))
    assert out[0] == 0.0
    assert out[1] == 1.0
    # symmetry holds across a wide range
    xs = np.linspace(-40, 40, 81)
    np.testing.assert_allclose(stable_sigmoid(xs) + stable_sigmoid(-xs), 1.0, atol=1e-15)


def test_stable_sigmoid_keeps_shape():
    arr = np.zeros((2, 3))
    assert stable_sigmoid(arr).shape == (2, 3)


def test_l2sq_frozen_value_and_symmetry():
    assert l2sq([1.0, 2.0], [4.0, 6.0]) == 25.0
    rng = np.random.default_rng(3)
    for _ in range(25):
        a = rng.normal(size=5)
        b = rng.normal(size=5)
        assert l2sq(a, b) == pytest.approx(l2sq(b, a), abs=1e-12)
        assert l2sq(a, b) >= 0.0
        assert l2sq(a, a) == 0.0


def test_l2sq_length_mismatch():
    with pytest.raises(ShapeError):
        l2sq([1.0], [1.0, 2.0])


def test_finite_diff_grad_quadratic():
    grad = finite_diff_grad(lambda v: float(v @ v), [1.0, 2.0, 3.0])
    np.testing.assert_allclose(grad, [2.0, 4.0, 6.0], atol=1e-8)


def test_finite_diff_grad_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: 0.0, [1.0], eps=0.0)


def test_finite_diff_grad_flags_non_finite_probe():
    def f(v):
        return float("inf") if v[0] > 1.0 else float(v[0])

    with pytest.raises(GradientProbeError):
        finite_diff_grad(f, [1.0], eps=0.5)


def test_finite_diff_tensor_grads_matches_analytic():
    tensors = {"a": np.array([1.0, -2.0, 0.5]), "b": np.array([[2.0, 1.0], [0.0, 3.0]])}

    def loss_fn():
        return float(np.sum(tensors["a"] ** 2) + np.sum(tensors["b"] ** 3))

    numeric = finite_diff_tensor_grads(loss_fn, tensors)
    np.testing.assert_allclose(numeric["a"], 2.0 * tensors["a"], atol=1e-7)
    np.testing.assert_allclose(numeric["b"], 3.0 * tensors["b"] ** 2, atol=1e-6)
    # probing restores the tensors exactly
    np.testing.assert_array_equal(tensors["a"], [1.0, -2.0, 0.5])


def test_finite_diff_tensor_grads_sampled_coords_leave_nan():
    tensors = {"a": np.arange(10, dtype=np.float64)}

    def loss_fn():
        return float(np.sum(tensors["a"] ** 2))

    numeric = finite_diff_tensor_grads(
        loss_fn, tensors, coords=4, rng=np.random.default_rng(0)
    )
    assert int(np.isnan(numeric["a"]).sum()) == 6
    probed = ~np.isnan(numeric["a"])
    np.testing.assert_allclose(numeric["a"][probed], 2.0 * tensors["a"][probed], atol=1e-7)


def test_finite_diff_tensor_grads_coords_require_rng():
    tensors = {"a": np.zeros(10)}
    with pytest.raises(ValueError):
        finite_diff_tensor_grads(lambda: 0.0, tensors, coords=3)


def test_relative_gap_exact_and_scaled():
    assert relative_gap([1.0, 2.0], [1.0, 2.0]) == 0.0
    # |1.0 - 1.1| / 1.1
    assert relative_gap([1.0], [1.1]) == pytest.approx(0.1 / 1.1, abs=1e-12)


def test_relative_gap_floor_absorbs_tiny_noise():
    # both values below the floor: denominator is the floor, not the values
    assert relative_gap([1e-9], [2e-9], floor=1e-3) == pytest.approx(1e-6, abs=1e-12)


def test_relative_gap_ignores_nan_entries():
    a = np.array([1.0, np.nan, 3.0])
    n = np.array([1.0, 5.0, np.nan])
    assert relative_gap(a, n) == 0.0
    assert relative_gap(np.full(3, np.nan), np.full(3, np.nan)) == 0.0


def test_relative_gap_shape_mismatch():
    with pytest.raises(ShapeError):
        relative_gap(np.zeros(2), np.zeros(3))
