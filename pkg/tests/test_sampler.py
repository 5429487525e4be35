"""
Tests for the spike-and-slab posterior and the SA-SGLD chain.
"""
import math

import numpy as np
import pytest

from gdnet.errors import ConfigValidationError, DimensionError, DivergenceError
from gdnet.fnn import FnnParams, InitScheme, LayerSpec, Mask, apply_mask, init_weights
from gdnet.forward_model import GaussianLinearModel, gaussian_design
from gdnet.gdn import FnnBaseline, GdnModel
from gdnet.numerics import make_rng
from gdnet.sampler import (
    ChainState,
    PosteriorSpec,
    SamplerCounters,
    SpikeSlabPrior,
    init_chain,
    log_lik_and_grad,
    log_prior,
    posterior_mean_prediction,
    posterior_test_error,
    run_chain,
    sasgld_step,
    toggle_log_odds,
)

from oracles import central_difference_grad, reference_lambda_chain


STACK = (LayerSpec.dense(5, augment_bias=True), LayerSpec.layernorm(), LayerSpec.dense(3))


@pytest.fixture
def posterior(rng):
    fm = GaussianLinearModel(gaussian_design(4, 3, rng) / 2.0, v2=0.5)
    model = GdnModel(fm, STACK, fm.default_step(), 2)
    q = sum(int(np.prod(s)) for s in model.param_shapes())
    X = rng.standard_normal((12, 3))
    Y = X @ fm.A.T + 0.1 * rng.standard_normal((12, 4))
    return PosteriorSpec(SpikeSlabPrior(u=1.0, rho0=12.0, q=q), 0.5, model, X, Y)


def _empty_posterior(model, q, rho0):
    X = np.zeros((0, model.output_dim))
    Y = np.zeros((0, model.input_dim))
    return PosteriorSpec(SpikeSlabPrior(u=1.0, rho0=rho0, q=q), 1.0, model, X, Y)


# ============= Prior =============

def test_activation_probability():
    p = SpikeSlabPrior(u=1.0, rho0=4.0, q=4)
    assert p.activation_probability == pytest.approx(1 / 17, rel=1e-12)
    assert p.activation_log_penalty == pytest.approx(-2 * math.log(4), rel=1e-12)


def test_activation_probability_for_very_sparse_prior():
    p = SpikeSlabPrior(u=8000.0, rho0=200.0, q=500)
    assert 0.0 <= p.activation_probability < 1e-300
    assert p.activation_log_penalty == pytest.approx(-8001 * math.log(500), rel=1e-12)
    odds = toggle_log_odds(p, np.array([0.0, 1.0, -3.0]))
    assert np.all(np.isfinite(odds))
    moderate = SpikeSlabPrior(u=30.0, rho0=200.0, q=500)
    assert moderate.activation_probability == pytest.approx(500.0 ** -31, rel=1e-9)


@pytest.mark.parametrize("kwargs", [{"u": 0.5}, {"rho0": 1.0}, {"rho0": 0.5}, {"q": 1}])
def test_prior_validation(kwargs):
    args = {"u": 1.0, "rho0": 10.0, "q": 10, **kwargs}
    with pytest.raises(ConfigValidationError):
        SpikeSlabPrior(**args)


def test_log_prior_matches_formula(rng):
    p = SpikeSlabPrior(u=2.0, rho0=9.0, q=5)
    w = FnnParams(rng.standard_normal(5), ((5,),))
    lam = np.array([1, 0, 0, 1, 1], dtype=np.uint8)
    expected = 0.0
    for wk, lk in zip(w.flat, lam):
        rho = 1.0 if lk else 9.0
        expected += -lk * 3.0 * math.log(5) + 0.5 * math.log(rho / (2 * math.pi)) - 0.5 * rho * wk * wk
    assert log_prior(p, w, Mask(lam, ((5,),))) == pytest.approx(expected, rel=1e-12)


def test_toggle_log_odds_is_log_prior_difference(rng):
    p = SpikeSlabPrior(u=1.5, rho0=20.0, q=6)
    w = FnnParams(rng.standard_normal(6), ((6,),))
    off = np.zeros(6, dtype=np.uint8)
    for k in range(6):
        on = off.copy()
        on[k] = 1
        diff = log_prior(p, w, Mask(on, ((6,),))) - log_prior(p, w, Mask(off, ((6,),)))
        assert toggle_log_odds(p, w.flat)[k] == pytest.approx(diff, abs=1e-10)


# ============= Likelihood =============

def test_likelihood_gradient_matches_finite_differences(posterior, rng):
    model = posterior.model
    w = init_weights(model.specs, InitScheme.HE_NORMAL, rng, model.net_input_dim)
    full = np.arange(posterior.n)
    m = Mask.ones(w.shapes)
    _, grad = log_lik_and_grad(posterior, w, m, full)
    fd = central_difference_grad(lambda flat: log_lik_and_grad(posterior, w.with_flat(flat), m, full)[0], w.flat)
    assert np.linalg.norm(grad.flat - fd) <= 1e-6 * np.linalg.norm(fd)


def test_likelihood_uses_masked_weights(posterior, rng):
    model = posterior.model
    w = init_weights(model.specs, InitScheme.HE_NORMAL, rng, model.net_input_dim)
    lam = (rng.random(w.total_count) < 0.5).astype(np.uint8)
    m = Mask(lam, w.shapes)
    full = np.arange(posterior.n)
    loglik, grad = log_lik_and_grad(posterior, w, m, full)
    pred, _ = model.forward(apply_mask(w, m), posterior.Y)
    assert loglik == pytest.approx(-np.sum((posterior.X - pred) ** 2) / (2 * 0.5), rel=1e-12)
    assert np.all(grad.flat[lam == 0] == 0.0)


def test_minibatch_is_scaled(posterior, rng):
    model = posterior.model
    w = init_weights(model.specs, InitScheme.HE_NORMAL, rng, model.net_input_dim)
    m = Mask.ones(w.shapes)
    batch = np.array([1, 4, 7])
    loglik, _ = log_lik_and_grad(posterior, w, m, batch)
    pred, _ = model.forward(w, posterior.Y[batch])
    expected = -(12 / 3) * np.sum((posterior.X[batch] - pred) ** 2) / (2 * 0.5)
    assert loglik == pytest.approx(expected, rel=1e-12)


def test_batch_index_out_of_range(posterior, rng):
    model = posterior.model
    w = init_weights(model.specs, InitScheme.HE_NORMAL, rng, model.net_input_dim)
    with pytest.raises(IndexError):
        log_lik_and_grad(posterior, w, Mask.ones(w.shapes), [0, 12])


def test_posterior_checks_prior_size(posterior):
    with pytest.raises(ConfigValidationError):
        PosteriorSpec(SpikeSlabPrior(1.0, 12.0, 7), 0.5, posterior.model, posterior.X, posterior.Y)


def test_posterior_checks_dataset_shape(posterior):
    with pytest.raises(DimensionError):
        PosteriorSpec(posterior.prior, 0.5, posterior.model, posterior.X[:, :2], posterior.Y)


# ============= Chain mechanics =============

def test_chain_is_reproducible(posterior):
    def run():
        s = init_chain(posterior.model, make_rng(5, 3), step_h=1e-4, batch_size=4, flip_fraction=0.2)
        return run_chain(posterior, s, 20, 5).final_state
    a, b = run(), run()
    np.testing.assert_array_equal(a.w.flat, b.w.flat)
    np.testing.assert_array_equal(a.mask.flat, b.mask.flat)


def test_split_run_equals_single_run(posterior):
    s = init_chain(posterior.model, make_rng(5, 3), step_h=1e-4, batch_size=4, flip_fraction=0.2)
    whole = run_chain(posterior, s, 10, 1).final_state
    s = init_chain(posterior.model, make_rng(5, 3), step_h=1e-4, batch_size=4, flip_fraction=0.2)
    first = run_chain(posterior, s, 4, 1).final_state
    second = run_chain(posterior, first, 6, 1).final_state
    assert second.iter == 10
    np.testing.assert_array_equal(whole.w.flat, second.w.flat)


def test_thinning_and_callbacks(posterior):
    s = init_chain(posterior.model, make_rng(1), step_h=1e-4, batch_size=4)
    seen = []

    def cb(state, metrics):
        metrics.test_err = float(state.iter)
        seen.append(state.iter)

    res = run_chain(posterior, s, 12, 5, callbacks=[cb])
    assert [m.iter for m in res.trace] == [5, 10]
    assert seen == [5, 10]
    assert [m.test_err for m in res.trace] == [5.0, 10.0]
    assert len(res.samples) == 2
    assert res.final_state.iter == 12


def test_zero_flip_fraction_skips_mask_update(posterior):
    s = init_chain(posterior.model, make_rng(2), step_h=1e-4, batch_size=4, flip_fraction=0.0, init_active=0.5)
    counters = SamplerCounters()
    res = run_chain(posterior, s, 5, 1, counters=counters)
    np.testing.assert_array_equal(res.final_state.mask.flat, s.mask.flat)
    assert counters.backward_calls == 5
    assert counters.backward_samples == 20


def test_two_backward_passes_per_iteration(posterior):
    s = init_chain(posterior.model, make_rng(2), step_h=1e-4, batch_size=4, flip_fraction=0.1)
    counters = SamplerCounters()
    run_chain(posterior, s, 3, 1, counters=counters)
    assert counters.backward_calls == 6


def test_inactive_weights_are_spike_draws(posterior):
    s = init_chain(posterior.model, make_rng(3), step_h=1e-4, batch_size=4, flip_fraction=0.0, init_active=0.3)
    s1 = sasgld_step(posterior, s)
    off = s.mask.flat == 0
    assert not np.any(s1.w.flat[off] == s.w.flat[off])


def test_divergence_reports_iteration(posterior):
    s = init_chain(posterior.model, make_rng(4), step_h=1e300, batch_size=4, flip_fraction=0.0)
    with np.errstate(all="ignore"):
        with pytest.raises(DivergenceError):
            for _ in range(10):
                s = sasgld_step(posterior, s)


def test_chain_state_validation(posterior):
    s = init_chain(posterior.model, make_rng(4), step_h=1e-3, batch_size=4)
    with pytest.raises(ConfigValidationError):
        ChainState(s.w, s.mask, 0, 0.0, 4, 0.1, s.rng)
    with pytest.raises(ConfigValidationError):
        ChainState(s.w, s.mask, 0, 1e-3, 4, 1.5, s.rng)


# ============= Prior calibration (no likelihood) =============

@pytest.mark.acceptance
def test_activation_frequency_matches_prior():
    model = FnnBaseline((LayerSpec.dense(2),), d_y=2)
    ps = _empty_posterior(model, 4, 4.0)
    s = init_chain(model, make_rng(11, 3), step_h=0.05, batch_size=1, flip_fraction=1.0)
    res = run_chain(ps, s, 20_000, 1)
    freq = np.mean([m.active_frac for m in res.trace[2000:]])
    assert abs(freq - 1 / 17) < 0.015
    ref, se = reference_lambda_chain(1.0, 4.0, 1.0, 4, 4, 20_000, make_rng(12))
    assert abs(ref - 1 / 17) < max(5 * se, 0.01)
    assert abs(freq - ref) < 0.02


@pytest.mark.acceptance
def test_active_weights_have_slab_variance():
    model = FnnBaseline((LayerSpec.dense(5, augment_bias=True),), d_y=8)
    ps = _empty_posterior(model, 45, 64.0)
    s = init_chain(model, make_rng(13, 3), step_h=2e-2, batch_size=1, flip_fraction=0.0)
    res = run_chain(ps, s, 20_000, 10)
    w2 = np.array([w.flat ** 2 for _, w in res.samples[200:]])
    assert w2.mean() == pytest.approx(1.0, rel=0.1)


@pytest.mark.acceptance
def test_inactive_weights_have_spike_variance():
    model = FnnBaseline((LayerSpec.dense(2),), d_y=2)
    ps = _empty_posterior(model, 4, 4.0)
    s = init_chain(model, make_rng(14, 3), step_h=0.05, batch_size=1, flip_fraction=0.0, init_active=0.0)
    res = run_chain(ps, s, 5000, 1)
    w2 = np.array([w.flat ** 2 for _, w in res.samples])
    assert w2.mean() == pytest.approx(1 / 4, rel=0.05)
    assert res.final_state.mask.active_count == 0


# ============= Evaluation =============

def test_posterior_test_error(posterior, rng):
    model = posterior.model
    samples = []
    for _ in range(3):
        w = init_weights(model.specs, InitScheme.HE_NORMAL, rng, model.net_input_dim)
        samples.append((Mask.ones(w.shapes), w))
    errs = posterior_test_error(model, samples, posterior.Y, posterior.X)
    for (mask, w), err in zip(samples, errs):
        dist = np.linalg.norm(model.forward(w, posterior.Y)[0] - posterior.X, axis=1)
        assert err.e == pytest.approx(dist.mean(), rel=1e-12)
        assert err.norm_n == pytest.approx(np.sqrt(np.mean(dist ** 2)), rel=1e-12)
        assert err.e <= err.norm_n + 1e-12
    mean = posterior_mean_prediction(model, samples, posterior.Y)
    expected = sum(model.forward(w, posterior.Y)[0] for _, w in samples) / 3
    np.testing.assert_allclose(mean, expected, rtol=1e-12)
