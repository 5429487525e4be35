"""
Tests for the Gaussian linear forward model.
"""
import numpy as np
import pytest

from gdnet.errors import ConfigValidationError, DimensionError
from gdnet.forward_model import (
    GaussianLinearModel,
    build_blur_matrix,
    default_step,
    f_grad,
    f_value,
    gaussian_design,
)

from oracles import central_difference_grad, jacobi_eigenvalues


@pytest.fixture
def model(rng):
    return GaussianLinearModel(gaussian_design(6, 4, rng), v2=0.3)


def test_value_and_gradient(model, rng):
    y = rng.standard_normal(6)
    x = rng.standard_normal(4)
    r = y - model.A @ x
    assert f_value(model, y, x) == pytest.approx(r @ r / (2 * 0.3), rel=1e-12)
    fd = central_difference_grad(lambda t: f_value(model, y, t), x)
    np.testing.assert_allclose(f_grad(model, y, x), fd, rtol=1e-7, atol=1e-8)


def test_batched_rows_match_single(model, rng):
    Y = rng.standard_normal((3, 6))
    X = rng.standard_normal((3, 4))
    G = model.grad(Y, X)
    for i in range(3):
        np.testing.assert_allclose(G[i], f_grad(model, Y[i], X[i]), rtol=1e-13, atol=1e-13)
    np.testing.assert_allclose(model.value(Y, X), [f_value(model, Y[i], X[i]) for i in range(3)], rtol=1e-13)


def test_lipschitz_constant(model):
    ref = jacobi_eigenvalues(model.A.T @ model.A)[-1]
    assert model.lambda_max == pytest.approx(ref, rel=1e-8)
    assert model.lip == pytest.approx(ref / 0.3, rel=1e-8)


def test_default_step():
    m = GaussianLinearModel(np.diag([2.0, 1.0]), v2=0.5)
    # lambda_max(A^T A) = 4, M = 8
    assert default_step(m) == pytest.approx(1 / 8, rel=1e-10)
    assert default_step(m, multiplier=2.0) == pytest.approx(2 * 0.5 / 4, rel=1e-10)


def test_default_step_degenerate_operator():
    m = GaussianLinearModel(np.zeros((3, 3)), v2=1.0)
    with pytest.raises(ConfigValidationError):
        default_step(m)


def test_dimension_errors(model):
    with pytest.raises(DimensionError):
        model.grad(np.zeros(5), np.zeros(4))
    with pytest.raises(DimensionError):
        GaussianLinearModel(np.zeros(3), v2=1.0)


def test_rejects_nonpositive_variance():
    with pytest.raises(ConfigValidationError):
        GaussianLinearModel(np.eye(2), v2=0.0)


def test_grad_step_vjp_is_transpose_product(model, rng):
    v = rng.standard_normal(4)
    gamma = model.default_step()
    J = np.eye(4) - gamma * model.A.T @ model.A / model.v2
    np.testing.assert_allclose(model.grad_step_vjp(v, gamma), J.T @ v, rtol=1e-12, atol=1e-12)


def test_blur_matrix_rows_normalized_and_symmetric_kernel():
    A = build_blur_matrix(4, 5, 3.0)
    assert A.shape == (20, 20)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, rtol=0, atol=1e-14)
    assert np.all(A > 0)
    # pixel (0,0) weighs (0,1) and (1,0) equally
    assert A[0, 1] == pytest.approx(A[0, 5], rel=1e-14)


def test_blur_matrix_rejects_bad_variance():
    with pytest.raises(ConfigValidationError):
        build_blur_matrix(4, 4, 0.0)


@pytest.mark.parametrize("multiplier", [0.25, 1.0])
def test_gradient_step_is_nonexpansive(model, rng, multiplier):
    gamma = model.default_step(multiplier)
    y = rng.standard_normal(6)
    for _ in range(10):
        x1, x2 = rng.standard_normal((2, 4)) * 3.0
        s1 = x1 - gamma * model.grad(y, x1)
        s2 = x2 - gamma * model.grad(y, x2)
        assert np.linalg.norm(s1 - s2) <= np.linalg.norm(x1 - x2) * (1.0 + 1e-12)
