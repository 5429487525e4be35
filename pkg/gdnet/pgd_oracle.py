"""
Exact inversion map g(y) = argmin_x f(y|x) + R(x) by proximal gradient descent.

This is the ground truth the unrolled network is measured against. It also
estimates the linear contraction rate of the prox-gradient map and turns it
into a recommended unrolling depth.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Sequence
import logging
import math

import numpy as np

from .errors import ConvergenceError, DimensionError
from .forward_model import GaussianLinearModel
from .regularizer import OrthoRegularizer, certificate_violation


logger = logging.getLogger(__name__)


@dataclass
class PgdSolution:
    """
    Result of the fixed-point iteration for one observation.

    Attributes:
        x_star: Approximation of g(y)
        iterations: Prox-gradient steps taken
        residual: Last step length ||x_{k+1} - x_k||
        converged: Whether residual <= tol was reached
        dist_trace: ||x_k - x_star|| for the recorded prefix of iterates
        polished: Whether an active-set solve was accepted along the way
    """
    x_star: np.ndarray
    iterations: int
    residual: float
    converged: bool
    dist_trace: np.ndarray = field(default_factory=lambda: np.zeros(0))
    polished: bool = False


@dataclass
class ContractionEstimate:
    """Empirical linear rate of the prox-gradient iteration."""
    rho: float
    r0: float
    per_sample: List[float]
    traces: List[np.ndarray] = field(default_factory=list)


def pgd_step(
    fm: GaussianLinearModel,
    reg: OrthoRegularizer,
    gamma: float,
    y: np.ndarray,
    x: np.ndarray,
) -> np.ndarray:
    """One application of F_y(x) = Prox^{gamma R}(x - gamma grad_x f(y|x))."""
    return reg.prox(x - gamma * fm.grad(y, x), gamma)


def pgd_trajectory(
    fm: GaussianLinearModel,
    reg: OrthoRegularizer,
    gamma: float,
    y: np.ndarray,
    x0: np.ndarray,
    steps: int,
) -> np.ndarray:
    """Iterates F_y^k(x0) for k = 0..steps, stacked as rows."""
    traj = np.empty((steps + 1, fm.d_x))
    x = np.asarray(x0, dtype=np.float64)
    traj[0] = x
    for k in range(1, steps + 1):
        x = pgd_step(fm, reg, gamma, y, x)
        traj[k] = x
    return traj


class _ActiveSetPolisher:
    """
    Exact elastic-net solve on a frozen sign pattern, in B-coordinates.

    With C = A B^T, Q = C^T C / v2 and b = C^T y / v2, a candidate with
    support S and signs s solves (Q_SS + lambda2 I) z_S = b_S - lambda1 s.
    The pattern is refined until it is self-consistent.
    """

    def __init__(self, fm: GaussianLinearModel, reg: OrthoRegularizer, max_rounds: int = 50):
        C = fm.A if reg.B is None else fm.A @ reg.B.T
        self.C = C
        self.v2 = fm.v2
        self.Q = C.T @ C / fm.v2
        self.lam1 = reg.base.lambda1
        self.lam2 = reg.base.lambda2
        self.max_rounds = max_rounds

    def solve(self, y: np.ndarray, z: np.ndarray) -> Optional[np.ndarray]:
        b = self.C.T @ y / self.v2
        signs = np.sign(z)
        for _ in range(self.max_rounds):
            support = np.flatnonzero(signs)
            cand = np.zeros_like(z)
            if support.size:
                lhs = self.Q[np.ix_(support, support)] + self.lam2 * np.eye(support.size)
                rhs = b[support] - self.lam1 * signs[support]
                try:
                    cand[support] = np.linalg.solve(lhs, rhs)
                except np.linalg.LinAlgError:
                    return None
            grad = self.Q @ cand - b
            new_signs = signs.copy()
            # sign flips on the support drop the coordinate
            flipped = support[np.sign(cand[support]) != signs[support]]
            new_signs[flipped] = 0.0
            off = np.flatnonzero(signs == 0.0)
            entering = off[np.abs(grad[off]) > self.lam1 * (1.0 + 1e-12)]
            new_signs[entering] = -np.sign(grad[entering])
            if np.array_equal(new_signs, signs):
                return cand
            signs = new_signs
        return None


def solve_g(
    fm: GaussianLinearModel,
    reg: OrthoRegularizer,
    gamma: float,
    y: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    x0: Optional[np.ndarray] = None,
    polish: bool = True,
    polish_every: int = 25,
    trace_len: int = 0,
    _polisher: Optional[_ActiveSetPolisher] = None,
) -> PgdSolution:
    """
    Fixed-point iteration of ``pgd_step`` until ||x_{k+1} - x_k|| <= tol.

    Every ``polish_every`` steps the current sign pattern is handed to an
    exact active-set solve; its output replaces the iterate only when it
    satisfies the prox optimality certificate. The iteration itself always
    has the last word: convergence is declared on the step length.

    Args:
        fm: Forward model
        reg: Regularizer
        gamma: Step size
        y: Observation
        tol: Step-length tolerance
        max_iter: Iteration cap
        x0: Starting point (zeros by default)
        polish: Enable active-set polishing
        polish_every: Steps between polishing attempts
        trace_len: Number of leading iterates whose distance to x_star is recorded

    Returns:
        PgdSolution; ``converged`` is False when max_iter was reached
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (fm.d_y,):
        raise DimensionError(f"y must have shape ({fm.d_y},), got {y.shape}")
    x = np.zeros(fm.d_x) if x0 is None else np.array(x0, dtype=np.float64)
    polisher = _polisher if _polisher is not None else (_ActiveSetPolisher(fm, reg) if polish else None)

    prefix = [x.copy()] if trace_len > 0 else []
    residual = math.inf
    polished = False
    converged = False
    k = 0
    while k < max_iter:
        k += 1
        x_new = pgd_step(fm, reg, gamma, y, x)
        residual = float(np.linalg.norm(x_new - x))
        x = x_new
        if len(prefix) and len(prefix) <= trace_len:
            prefix.append(x.copy())
        if residual <= tol:
            converged = True
            break
        if polisher is not None and k % polish_every == 0:
            cand_z = polisher.solve(y, reg.to_coeffs(x))
            if cand_z is not None:
                cand = reg.from_coeffs(cand_z)
                fixed = cand - gamma * fm.grad(y, cand)
                if certificate_violation(reg, cand, fixed, gamma) <= tol:
                    x = cand
                    polished = True

    if not converged:
        logger.warning(f"solve_g reached max_iter={max_iter} with residual {residual:.3e} (tol {tol:.1e})")
    dist = np.array([np.linalg.norm(p - x) for p in prefix]) if prefix else np.zeros(0)
    return PgdSolution(
        x_star=x,
        iterations=k,
        residual=residual,
        converged=converged,
        dist_trace=dist,
        polished=polished,
    )


def solve_g_batch(
    fm: GaussianLinearModel,
    reg: OrthoRegularizer,
    gamma: float,
    Y: np.ndarray,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    x0: Optional[np.ndarray] = None,
    polish: bool = True,
) -> np.ndarray:
    """
    Oracle values g(y) for every row of Y.

    Raises:
        ConvergenceError: If any row fails to converge
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    polisher = _ActiveSetPolisher(fm, reg) if polish else None
    out = np.empty((Y.shape[0], fm.d_x))
    for i, y in enumerate(Y):
        sol = solve_g(fm, reg, gamma, y, tol=tol, max_iter=max_iter, x0=x0, polish=polish, _polisher=polisher)
        if not sol.converged:
            raise ConvergenceError(
                f"oracle did not converge for row {i}: residual {sol.residual:.3e} after {sol.iterations} steps",
                {"row": i, "residual": sol.residual, "iterations": sol.iterations},
            )
        out[i] = sol.x_star
    logger.info(f"Solved oracle g(y) for {Y.shape[0]} observations")
    return out


def _fit_rate(dist: np.ndarray) -> float:
    """Geometric rate of a distance trace, fitted on its last half."""
    half = dist[len(dist) // 2:]
    floor = 1e-14 * max(1.0, float(dist[0]) if dist.size else 1.0)
    usable = np.flatnonzero(half > floor)
    if usable.size < 2:
        # reached the floor within the first half: essentially one-step convergence
        head = np.flatnonzero(dist > floor)
        if head.size >= 2:
            k = head.astype(np.float64)
            slope = np.polyfit(k, np.log(dist[head]), 1)[0]
            return float(min(max(math.exp(slope), 0.0), 1.0 - 1e-12))
        return 0.0
    k = (usable + len(dist) // 2).astype(np.float64)
    slope = np.polyfit(k, np.log(half[usable]), 1)[0]
    return float(min(max(math.exp(slope), 0.0), 1.0 - 1e-12))


def estimate_contraction(
    fm: GaussianLinearModel,
    reg: OrthoRegularizer,
    gamma: float,
    ys: Sequence[np.ndarray],
    x0: Optional[np.ndarray] = None,
    horizon: int = 200,
    tol: float = 1e-10,
    g_values: Optional[np.ndarray] = None,
) -> ContractionEstimate:
    """
    Plug-in estimate of the linear rate rho and the radius R0.

    For each y the plain iterates F^k(x0), k <= horizon, are compared with
    g(y); rho is the largest geometric-fit rate over the last half of each
    trace and R0 = max ||x0 - g(y)||.

    Args:
        fm: Forward model
        reg: Regularizer
        gamma: Step size
        ys: Observations
        x0: Starting point (zeros by default)
        horizon: Number of iterates per trace
        tol: Oracle tolerance
        g_values: Precomputed oracle values (rows aligned with ys)

    Returns:
        ContractionEstimate with rho in [0, 1)

    Raises:
        ConvergenceError: If the oracle fails on any y
    """
    x0 = np.zeros(fm.d_x) if x0 is None else np.asarray(x0, dtype=np.float64)
    rates: List[float] = []
    traces: List[np.ndarray] = []
    r0 = 0.0
    for i, y in enumerate(ys):
        if g_values is not None:
            g = np.asarray(g_values[i], dtype=np.float64)
        else:
            sol = solve_g(fm, reg, gamma, y, tol=tol)
            if not sol.converged:
                raise ConvergenceError(
                    f"prox-gradient iteration did not converge for sample {i}; no linear rate",
                    {"sample": i, "residual": sol.residual},
                )
            g = sol.x_star
        traj = pgd_trajectory(fm, reg, gamma, y, x0, horizon)
        dist = np.linalg.norm(traj - g, axis=1)
        traces.append(dist)
        rates.append(_fit_rate(dist))
        r0 = max(r0, float(dist[0]))
    rho = max(rates) if rates else 0.0
    logger.info(f"Estimated contraction rho={rho:.6f}, R0={r0:.4f} over {len(rates)} observations")
    return ContractionEstimate(rho=rho, r0=r0, per_sample=rates, traces=traces)


def analytic_contraction_bound(fm: GaussianLinearModel, reg: OrthoRegularizer, gamma: float) -> float:
    """max(|1 - gamma L|, |1 - gamma m|) / (1 + gamma lambda2), L, m extreme eigenvalues of A^T A / v2."""
    eig = np.linalg.eigvalsh(fm.A.T @ fm.A / fm.v2)
    factor = max(abs(1.0 - gamma * eig[-1]), abs(1.0 - gamma * eig[0]))
    return float(factor / (1.0 + gamma * reg.base.lambda2))


def depth_rule(n: int, rho: float, c: float = 1.0) -> int:
    """
    Unrolling depth D' = ceil(c ln(n) / -ln(rho)).

    The result is clamped to [1, 10 ln(n) / -ln(rho) + 1]; a 1e-9 relative
    slack absorbs rounding in the logarithms before the ceiling.

    Raises:
        ValueError: If rho is outside (0, 1), n < 2 or c <= 0
    """
    if not 0.0 < rho < 1.0:
        raise ValueError(f"depth rule needs 0 < rho < 1, got rho={rho}")
    if n < 2:
        raise ValueError(f"depth rule needs n >= 2, got n={n}")
    if c <= 0:
        raise ValueError(f"depth rule constant must be positive, got c={c}")
    ratio = math.log(n) / -math.log(rho)
    raw = c * ratio
    depth = math.ceil(raw - 1e-9 * max(1.0, raw))
    upper = math.floor(10.0 * ratio + 1.0)
    return int(min(max(depth, 1), max(upper, 1)))
