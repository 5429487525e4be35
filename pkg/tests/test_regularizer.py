"""
Tests for the elastic-net penalty and its proximal operators.
"""
import numpy as np
import pytest

from gdnet.errors import ConfigValidationError
from gdnet.numerics import rand_orthogonal
from gdnet.regularizer import (
    ElasticNet,
    OrthoRegularizer,
    certificate_violation,
    prox_elastic_net,
    prox_ortho,
    reg_value,
)

from oracles import brute_force_prox


def test_prox_elastic_net_examples():
    r = ElasticNet(1.0, 1.0)
    out = prox_elastic_net(r, np.array([3.0, -3.0, 0.5, -1.0]), 1.0)
    np.testing.assert_allclose(out, [1.0, -1.0, 0.0, 0.0], atol=0)


def test_prox_pure_l1_is_soft_threshold():
    out = prox_elastic_net(ElasticNet(2.0, 0.0), np.array([5.0, -1.0, -3.5]), 0.5)
    np.testing.assert_allclose(out, [4.0, 0.0, -2.5], atol=1e-15)


def test_prox_zero_penalty_is_identity(rng):
    x = rng.standard_normal(5)
    np.testing.assert_array_equal(prox_elastic_net(ElasticNet(0.0, 0.0), x, 3.0), x)


def test_prox_rejects_nonpositive_gamma():
    with pytest.raises(ValueError):
        prox_elastic_net(ElasticNet(1.0, 1.0), np.ones(2), 0.0)


def test_negative_weights_rejected():
    with pytest.raises(ConfigValidationError):
        ElasticNet(-1.0, 0.0)


@pytest.mark.acceptance
def test_prox_ortho_matches_brute_force(rng):
    for _ in range(20):
        B = rand_orthogonal(6, rng)
        gamma = float(rng.uniform(0.1, 2.0))
        lam1, lam2 = float(rng.uniform(0.0, 2.0)), float(rng.uniform(0.0, 2.0))
        r = OrthoRegularizer(ElasticNet(lam1, lam2), B)
        x = rng.uniform(-5, 5, 6)
        ref = brute_force_prox(x, gamma, lam1, lam2, B)
        np.testing.assert_allclose(prox_ortho(r, x, gamma), ref, rtol=0, atol=1e-6)


def test_prox_ortho_identity_b_equals_elastic_net(rng):
    x = rng.standard_normal((4, 7))
    base = ElasticNet(0.7, 0.2)
    np.testing.assert_array_equal(prox_ortho(OrthoRegularizer(base), x, 0.9), prox_elastic_net(base, x, 0.9))


def test_reg_value_uses_coefficients(rng):
    B = rand_orthogonal(5, rng)
    r = OrthoRegularizer(ElasticNet(1.5, 0.5), B)
    x = rng.standard_normal(5)
    z = B @ x
    assert reg_value(r, x) == pytest.approx(1.5 * np.abs(z).sum() + 0.25 * (z @ z), rel=1e-12)


def test_non_orthogonal_b_rejected():
    with pytest.raises(ConfigValidationError):
        OrthoRegularizer(ElasticNet(1.0, 1.0), np.array([[1.0, 0.1], [0.0, 1.0]]))


def test_certificate_holds_at_prox_output(rng):
    B = rand_orthogonal(8, rng)
    r = OrthoRegularizer(ElasticNet(1.0, 0.5), B)
    x = rng.uniform(-4, 4, (10, 8))
    assert certificate_violation(r, r.prox(x, 0.8), x, 0.8) < 1e-12


def test_certificate_detects_wrong_output(rng):
    r = OrthoRegularizer(ElasticNet(1.0, 0.0))
    x = np.array([3.0, 0.2])
    assert certificate_violation(r, x, x, 1.0) == pytest.approx(1.0)


def test_prox_maps_are_firmly_nonexpansive(rng):
    for _ in range(20):
        gamma = float(rng.uniform(0.1, 2.0))
        base = ElasticNet(float(rng.uniform(0.0, 2.0)), float(rng.uniform(0.0, 2.0)))
        rot = OrthoRegularizer(base, rand_orthogonal(6, rng))
        x, y = rng.uniform(-5, 5, (2, 6))
        for prox in (lambda v: prox_elastic_net(base, v, gamma), lambda v: prox_ortho(rot, v, gamma)):
            p, q = prox(x), prox(y)
            assert (p - q) @ (p - q) <= (p - q) @ (x - y) + 1e-12
