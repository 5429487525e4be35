"""
Convex penalties R(x) with exact proximal operators.

The elastic net R0(z) = lambda1 ||z||_1 + (lambda2 / 2) ||z||_2^2 is the only
base penalty; ``OrthoRegularizer`` composes it with an orthogonal transform,
R(x) = R0(Bx), whose prox is B^T prox_R0(Bx).
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigValidationError, DimensionError
from .numerics import Mat


class Regularizer(ABC):
    """Penalty with a closed-form proximal operator."""

    @abstractmethod
    def value(self, x: np.ndarray) -> np.ndarray | float:
        """R(x), row-wise for batches."""

    @abstractmethod
    def prox(self, x: np.ndarray, gamma: float) -> np.ndarray:
        """argmin_u gamma R(u) + ||u - x||^2 / 2, row-wise for batches."""


@dataclass(frozen=True)
class ElasticNet(Regularizer):
    """Elastic-net penalty lambda1 ||z||_1 + (lambda2 / 2) ||z||^2."""
    lambda1: float
    lambda2: float

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigValidationError(
                f"elastic-net weights must be >= 0, got lambda1={self.lambda1}, lambda2={self.lambda2}"
            )

    @property
    def normalizable(self) -> bool:
        """Whether exp(-R0) integrates (needed when R0 is a log-density)."""
        return self.lambda1 > 0 or self.lambda2 > 0

    def value(self, x: np.ndarray) -> np.ndarray | float:
        out = self.lambda1 * np.sum(np.abs(x), axis=-1) + 0.5 * self.lambda2 * np.sum(x * x, axis=-1)
        return float(out) if np.ndim(out) == 0 else out

    def prox(self, x: np.ndarray, gamma: float) -> np.ndarray:
        if not gamma > 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        scale = 1.0 + gamma * self.lambda2
        shift = gamma * self.lambda1
        return np.maximum((x - shift) / scale, 0.0) - np.maximum((-x - shift) / scale, 0.0)


@dataclass(frozen=True, eq=False)
class OrthoRegularizer(Regularizer):
    """
    Elastic net after an orthogonal change of basis, R(x) = R0(Bx).

    Attributes:
        base: Elastic-net penalty R0
        B: Orthogonal (d, d) matrix, or None for the identity
    """
    base: ElasticNet
    B: Optional[Mat] = None
    ortho_tol: float = 1e-10

    def __post_init__(self):
        if self.B is None:
            return
        B = np.ascontiguousarray(np.asarray(self.B, dtype=np.float64))
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise DimensionError(f"B must be square, got shape {B.shape}")
        err = np.max(np.abs(B.T @ B - np.eye(B.shape[0])))
        if err >= self.ortho_tol:
            raise ConfigValidationError(
                f"B is not orthogonal: max |B^T B - I| = {err:.3e}", {"field": "B", "error": float(err)}
            )
        B.setflags(write=False)
        object.__setattr__(self, "B", B)

    def to_coeffs(self, x: np.ndarray) -> np.ndarray:
        """Bx (row-wise)."""
        return x if self.B is None else x @ self.B.T

    def from_coeffs(self, z: np.ndarray) -> np.ndarray:
        """B^T z (row-wise)."""
        return z if self.B is None else z @ self.B

    def value(self, x: np.ndarray) -> np.ndarray | float:
        return self.base.value(self.to_coeffs(x))

    def prox(self, x: np.ndarray, gamma: float) -> np.ndarray:
        return self.from_coeffs(self.base.prox(self.to_coeffs(x), gamma))


def reg_value(r: OrthoRegularizer, x: np.ndarray) -> float:
    """Return lambda1 ||Bx||_1 + (lambda2 / 2) ||Bx||_2^2."""
    return r.value(np.asarray(x, dtype=np.float64))


def prox_elastic_net(r: ElasticNet, x: np.ndarray, gamma: float) -> np.ndarray:
    """Coordinatewise shrinkage s_gamma."""
    return r.prox(np.asarray(x, dtype=np.float64), gamma)


def prox_ortho(r: OrthoRegularizer, x: np.ndarray, gamma: float) -> np.ndarray:
    """Return B^T prox_elastic_net(Bx)."""
    return r.prox(np.asarray(x, dtype=np.float64), gamma)


def certificate_violation(
    r: OrthoRegularizer, u: np.ndarray, x: np.ndarray, gamma: float, zero_tol: float = 1e-12
) -> float:
    """
    Largest violation of the prox optimality conditions for u = prox(x).

    Checked in B-coordinates z = Bu, w = Bx: for z_i != 0 the residual is
    |z_i - w_i + gamma lambda2 z_i + gamma lambda1 sign(z_i)|; for z_i = 0 it
    is max(0, |z_i - w_i| - gamma lambda1). Coefficients with
    |z_i| <= zero_tol max(1, max |w|) count as zero.

    Args:
        r: Regularizer
        u: Candidate prox output
        x: Prox input
        gamma: Step size
        zero_tol: Relative magnitude treated as an exact zero

    Returns:
        Max violation over coordinates (and rows for batches)
    """
    z = r.to_coeffs(np.asarray(u, dtype=np.float64))
    w = r.to_coeffs(np.asarray(x, dtype=np.float64))
    lam1, lam2 = r.base.lambda1, r.base.lambda2
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    active = np.abs(z) > zero_tol * scale
    z = np.where(active, z, 0.0)
    on_support = np.abs(z - w + gamma * lam2 * z + gamma * lam1 * np.sign(z))
    off_support = np.maximum(np.abs(z - w) - gamma * lam1, 0.0)
    viol = np.where(active, on_support, off_support)
    return float(np.max(viol)) if viol.size else 0.0
