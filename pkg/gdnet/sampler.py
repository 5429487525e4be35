"""
Spike-and-slab posterior over (Lambda, W) and its sparse asynchronous SGLD sampler.

Posterior:
    Pi(Lambda, W | D) ∝ exp(-(1 / 2 sigma^2) sum_i ||x_i - g_{W*Lambda}(y_i)||^2)
                        * q^{-(u+1) ||Lambda||_0}
                        * prod_k N(W_k; 0, 1/rho_{Lambda_k})
with rho_1 for active (slab) and rho_0 for inactive (spike) coordinates.

One sampler iteration performs two backward passes through the estimator:
one for the Lambda update and one for the SGLD move of the active weights.
"""
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from scipy.special import expit

from .errors import ConfigValidationError, DimensionError, DivergenceError
from .fnn import FnnParams, InitScheme, Mask, apply_mask, init_weights
from .gdn import Estimator
from .numerics import RngState


logger = logging.getLogger(__name__)


# ============= Prior =============

@dataclass(frozen=True)
class SpikeSlabPrior:
    """
    Spike-and-slab prior.

    Attributes:
        u: Sparsity exponent (>= 1); P(Lambda_k = 1) = 1 / (1 + q^{u+1})
        rho0: Spike precision
        rho1: Slab precision (1 unless stated otherwise)
        q: Number of parameters
    """
    u: float
    rho0: float
    q: int
    rho1: float = 1.0

    def __post_init__(self):
        if self.u < 1:
            raise ConfigValidationError(f"prior u must be >= 1, got {self.u}", {"field": "u"})
        if not self.rho0 > self.rho1 > 0:
            raise ConfigValidationError(
                f"prior needs rho0 > rho1 > 0, got rho0={self.rho0}, rho1={self.rho1}", {"field": "rho0"}
            )
        if self.q < 2:
            raise ConfigValidationError(f"prior needs q >= 2, got {self.q}", {"field": "q"})

    @property
    def activation_log_penalty(self) -> float:
        """-(u+1) ln q, the log prior weight of one active coordinate."""
        return -(self.u + 1.0) * math.log(self.q)

    @property
    def activation_probability(self) -> float:
        """Marginal prior probability 1 / (1 + q^{u+1}) of Lambda_k = 1."""
        return float(expit(self.activation_log_penalty))


def log_prior(p: SpikeSlabPrior, w: FnnParams, m: Mask) -> float:
    """
    log pi(Lambda, W) up to the Lambda-normalizing constant.

    -(u+1) ||Lambda||_0 ln q
      + sum_{Lambda=1} [ln(rho1 / 2pi) / 2 - rho1 w^2 / 2]
      + sum_{Lambda=0} [ln(rho0 / 2pi) / 2 - rho0 w^2 / 2]
    """
    if not w.congruent(m):
        raise DimensionError("mask and parameters are not congruent")
    active = m.flat.astype(bool)
    w2 = w.flat * w.flat
    n_active = int(active.sum())
    n_inactive = w.total_count - n_active
    value = n_active * p.activation_log_penalty
    value += 0.5 * n_active * math.log(p.rho1 / (2.0 * math.pi)) - 0.5 * p.rho1 * float(w2[active].sum())
    value += 0.5 * n_inactive * math.log(p.rho0 / (2.0 * math.pi)) - 0.5 * p.rho0 * float(w2[~active].sum())
    return float(value)


def toggle_log_odds(p: SpikeSlabPrior, w_values: np.ndarray) -> np.ndarray:
    """Prior log-odds of Lambda_k = 1 given W_k: -(u+1) ln q + ln(rho1/rho0)/2 - (rho1 - rho0) w^2 / 2."""
    w_values = np.asarray(w_values, dtype=np.float64)
    return (
        p.activation_log_penalty
        + 0.5 * math.log(p.rho1 / p.rho0)
        - 0.5 * (p.rho1 - p.rho0) * w_values * w_values
    )


# ============= Posterior =============

@dataclass
class SamplerCounters:
    """Instrumentation of estimator passes (per-sample counts)."""
    forward_samples: int = 0
    backward_samples: int = 0
    backward_calls: int = 0


@dataclass(eq=False)
class PosteriorSpec:
    """
    Data, estimator and prior defining the posterior.

    Attributes:
        prior: Spike-and-slab prior
        sigma2: Likelihood variance sigma^2
        model: GDN or baseline estimator
        X: (n, d_x) latent samples (regression targets)
        Y: (n, d_y) observations
    """
    prior: SpikeSlabPrior
    sigma2: float
    model: Estimator
    X: np.ndarray
    Y: np.ndarray

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise ConfigValidationError(f"sigma2 must be positive, got {self.sigma2}", {"field": "sigma2"})
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=np.float64))
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.n and (self.X.shape[1] != self.model.output_dim or self.Y.shape[1] != self.model.input_dim):
            raise DimensionError(
                f"dataset shapes X{self.X.shape}, Y{self.Y.shape} do not match estimator "
                f"({self.model.input_dim} -> {self.model.output_dim})"
            )
        q = sum(int(np.prod(s)) for s in self.model.param_shapes())
        if q != self.prior.q:
            raise ConfigValidationError(f"prior q={self.prior.q} but the estimator has {q} parameters", {"field": "q"})

    @property
    def n(self) -> int:
        return int(self.X.shape[0]) if self.X.size else 0


def _loglik_theta_grad(
    ps: PosteriorSpec,
    theta: FnnParams,
    batch: np.ndarray,
    counters: Optional[SamplerCounters],
) -> Tuple[float, np.ndarray]:
    """Minibatch log-likelihood estimate and its gradient in the effective weights theta = W*Lambda."""
    if batch.size == 0 or ps.n == 0:
        return 0.0, np.zeros(theta.total_count)
    scale = ps.n / batch.size
    xhat, tape = ps.model.forward(theta, ps.Y[batch])
    resid = ps.X[batch] - xhat
    loglik = -scale * float(np.sum(resid * resid)) / (2.0 * ps.sigma2)
    grad = ps.model.backward(theta, tape, scale * resid / ps.sigma2)
    if counters is not None:
        counters.forward_samples += int(batch.size)
        counters.backward_samples += int(batch.size)
        counters.backward_calls += 1
    return loglik, grad.flat


def log_lik_and_grad(
    ps: PosteriorSpec,
    w: FnnParams,
    m: Mask,
    batch: Sequence[int],
    counters: Optional[SamplerCounters] = None,
) -> Tuple[float, FnnParams]:
    """
    Unbiased minibatch estimate (n / |batch|) sum_i of the log-likelihood and its W-gradient.

    The estimator is evaluated at W*Lambda; the gradient is zero on
    coordinates with Lambda = 0.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size and (batch.min() < 0 or batch.max() >= ps.n):
        raise IndexError(f"batch indices must lie in [0, {ps.n})")
    loglik, grad = _loglik_theta_grad(ps, apply_mask(w, m), batch, counters)
    return loglik, w.with_flat(grad * m.flat)


# ============= Chain =============

@dataclass
class ChainState:
    """One sampler state."""
    w: FnnParams
    mask: Mask
    iter: int
    step_h: float
    batch_size: int
    flip_fraction: float
    rng: RngState
    loglik: float = 0.0
    log_prior: float = 0.0

    def __post_init__(self):
        if not self.step_h > 0:
            raise ConfigValidationError(f"step_h must be positive, got {self.step_h}", {"field": "step_h"})
        if not 0.0 <= self.flip_fraction <= 1.0:
            raise ConfigValidationError(
                f"flip_fraction must lie in [0, 1], got {self.flip_fraction}", {"field": "flip_fraction"}
            )

    @property
    def active_fraction(self) -> float:
        return self.mask.active_count / max(self.mask.total_count, 1)


@dataclass
class ChainMetrics:
    """Metrics emitted every ``thin`` iterations."""
    iter: int
    loglik: float
    log_prior: float
    active_frac: float
    test_err: float
    step_h: float


ChainCallback = Callable[[ChainState, ChainMetrics], None]


@dataclass
class ChainResult:
    """Retained samples, metrics trace and final state of a chain."""
    samples: List[Tuple[Mask, FnnParams]]
    trace: List[ChainMetrics]
    final_state: ChainState
    counters: SamplerCounters = field(default_factory=SamplerCounters)


def _draw_batch(ps: PosteriorSpec, size: int, rng: RngState) -> np.ndarray:
    if ps.n == 0:
        return np.zeros(0, dtype=np.int64)
    return np.sort(rng.choice(ps.n, size=min(size, ps.n), replace=False))


def sasgld_step(
    ps: PosteriorSpec,
    s: ChainState,
    counters: Optional[SamplerCounters] = None,
) -> ChainState:
    """
    One sparse asynchronous SGLD iteration.

    (a) Lambda update on a random subset of ceil(flip_fraction q)
        coordinates: each is redrawn from its conditional with the
        likelihood change approximated to first order, G_k w_k, where G is
        the likelihood gradient in the effective weights on a fresh minibatch.
    (b) W update on a fresh minibatch: active coordinates take the step
        w + (h/2) grad[loglik + log_prior] + sqrt(h) N(0, 1); inactive
        coordinates are redrawn exactly from N(0, 1/rho0).

    With flip_fraction = 0 the Lambda update and its backward pass are skipped.

    Raises:
        DivergenceError: If a gradient or weight becomes non-finite
    """
    prior = ps.prior
    rng = s.rng
    w = s.w.flat.copy()
    lam = s.mask.flat.copy()
    q = w.size

    n_flip = int(math.ceil(s.flip_fraction * q)) if s.flip_fraction > 0 else 0
    if n_flip:
        sel = rng.choice(q, size=min(n_flip, q), replace=False)
        batch = _draw_batch(ps, s.batch_size, rng)
        theta = s.w.with_flat(w * lam)
        _, g_theta = _loglik_theta_grad(ps, theta, batch, counters)
        if not np.all(np.isfinite(g_theta)):
            raise DivergenceError(
                f"non-finite likelihood gradient in Lambda update at iteration {s.iter + 1}",
                {"iteration": s.iter + 1, "step_h": s.step_h},
            )
        log_odds = toggle_log_odds(prior, w[sel]) + g_theta[sel] * w[sel]
        lam[sel] = (rng.random(sel.size) < expit(log_odds)).astype(np.uint8)

    mask = s.mask.with_flat(lam)
    batch = _draw_batch(ps, s.batch_size, rng)
    loglik, grad = log_lik_and_grad(ps, s.w, mask, batch, counters)
    g = grad.flat
    if not np.all(np.isfinite(g)):
        raise DivergenceError(
            f"non-finite gradient at iteration {s.iter + 1}; step size {s.step_h:g} is likely too large",
            {"iteration": s.iter + 1, "step_h": s.step_h},
        )
    active = lam.astype(bool)
    noise = rng.standard_normal(q)
    spike = rng.normal(0.0, 1.0 / math.sqrt(prior.rho0), size=q)
    drift = g - prior.rho1 * w
    w_new = np.where(active, w + 0.5 * s.step_h * drift + math.sqrt(s.step_h) * noise, spike)
    if not np.all(np.isfinite(w_new)):
        raise DivergenceError(
            f"non-finite weights at iteration {s.iter + 1}", {"iteration": s.iter + 1, "step_h": s.step_h}
        )
    w_params = s.w.with_flat(w_new)
    return ChainState(
        w=w_params,
        mask=mask,
        iter=s.iter + 1,
        step_h=s.step_h,
        batch_size=s.batch_size,
        flip_fraction=s.flip_fraction,
        rng=rng,
        loglik=loglik,
        log_prior=log_prior(prior, w_params, mask),
    )


def run_chain(
    ps: PosteriorSpec,
    s0: ChainState,
    iters: int,
    thin: int,
    callbacks: Sequence[ChainCallback] = (),
    counters: Optional[SamplerCounters] = None,
) -> ChainResult:
    """
    Apply ``sasgld_step`` ``iters`` times.

    Whenever the iteration counter is a multiple of ``thin`` the current
    (Lambda, W) is retained, a metrics row is produced and every callback is
    invoked with the state and the row (callbacks may fill ``test_err``).

    Args:
        ps: Posterior
        s0: Initial state (its iteration counter is continued)
        iters: Number of iterations to run
        thin: Retention period
        callbacks: Called at every retention
        counters: Optional pass counters

    Returns:
        ChainResult
    """
    if thin < 1:
        raise ConfigValidationError(f"thin must be >= 1, got {thin}", {"field": "thin"})
    counters = counters if counters is not None else SamplerCounters()
    samples: List[Tuple[Mask, FnnParams]] = []
    trace: List[ChainMetrics] = []
    state = s0
    for _ in range(max(iters, 0)):
        state = sasgld_step(ps, state, counters)
        if state.iter % thin:
            continue
        samples.append((state.mask, state.w))
        metrics = ChainMetrics(
            iter=state.iter,
            loglik=state.loglik,
            log_prior=state.log_prior,
            active_frac=state.active_fraction,
            test_err=float("nan"),
            step_h=state.step_h,
        )
        for callback in callbacks:
            callback(state, metrics)
        trace.append(metrics)
        logger.debug(f"iter {state.iter}: loglik={state.loglik:.4g} active={metrics.active_frac:.3f}")
    return ChainResult(samples=samples, trace=trace, final_state=state, counters=counters)


def init_chain(
    model: Estimator,
    rng: RngState,
    step_h: float,
    batch_size: int,
    flip_fraction: float = 0.05,
    scheme: InitScheme | str = InitScheme.HE_NORMAL,
    prox_params: Optional[Tuple[float, float, float]] = None,
    init_active: float = 1.0,
    basis: Optional[np.ndarray] = None,
) -> ChainState:
    """
    Initial chain state.

    Args:
        model: Estimator whose H_W is sampled
        rng: Random generator (owned by the chain from now on)
        step_h: SGLD step size
        batch_size: Minibatch size
        flip_fraction: Fraction of coordinates proposed for a Lambda update per iteration
        scheme: Weight initialization
        prox_params: (gamma, lambda1, lambda2) for exact_prox initialization
        init_active: Probability that a coordinate starts active
        basis: Regularizer basis B for exact_prox initialization
    """
    w = init_weights(model.specs, scheme, rng, model.net_input_dim, prox_params, basis)
    if init_active >= 1.0:
        mask = Mask.ones(w.shapes)
    else:
        mask = Mask(rng.random(w.total_count) < init_active, w.shapes)
    return ChainState(
        w=w,
        mask=mask,
        iter=0,
        step_h=step_h,
        batch_size=batch_size,
        flip_fraction=flip_fraction,
        rng=rng,
    )


# ============= Evaluation =============

@dataclass
class SampleError:
    """Per-sample test error of one retained (Lambda, W)."""
    e: float
    norm_n: float


def posterior_test_error(
    model: Estimator,
    samples: Sequence[Tuple[Mask, FnnParams]],
    Y_test: np.ndarray,
    targets: np.ndarray,
) -> List[SampleError]:
    """
    e(Lambda, W) = mean_j ||g_{W*Lambda}(y_j) - target_j||_2 and the
    empirical norm sqrt(mean_j ||.||^2) for every retained sample.

    Args:
        model: Estimator
        samples: Retained (Lambda, W) pairs
        Y_test: (n_test, d_y) observations
        targets: (n_test, d_x) oracle values g(y_j) (or ground truth)
    """
    Y_test = np.atleast_2d(np.asarray(Y_test, dtype=np.float64))
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    out = []
    for mask, w in samples:
        pred, _ = model.forward(apply_mask(w, mask), Y_test)
        dist = np.linalg.norm(pred - targets, axis=1)
        out.append(SampleError(e=float(dist.mean()), norm_n=float(np.sqrt(np.mean(dist * dist)))))
    return out


def posterior_mean_prediction(
    model: Estimator,
    samples: Sequence[Tuple[Mask, FnnParams]],
    Y: np.ndarray,
) -> np.ndarray:
    """Average of g_{W*Lambda}(Y) over the retained samples."""
    if not samples:
        raise ValueError("posterior mean needs at least one retained sample")
    total = None
    for mask, w in samples:
        pred, _ = model.forward(apply_mask(w, mask), Y)
        total = pred if total is None else total + pred
    return total / len(samples)
