"""
Forward models f(y|x): value, gradient in x and smoothness constant.

Only the isotropic Gaussian linear model y ~ N(Ax, v^2 I) is implemented;
``ForwardModel`` is the interface the unrolled network and the oracle use.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
import logging

import numpy as np

from .errors import ConfigValidationError, DimensionError
from .numerics import Mat, RngState, ensure_finite, power_iteration


logger = logging.getLogger(__name__)


class ForwardModel(ABC):
    """Known conditional log-density of an observation given the latent x."""

    @property
    @abstractmethod
    def d_x(self) -> int:
        """Latent dimension."""

    @property
    @abstractmethod
    def d_y(self) -> int:
        """Observation dimension."""

    @property
    @abstractmethod
    def lip(self) -> float:
        """Lipschitz constant M of x -> grad_x f(y|x)."""

    @abstractmethod
    def value(self, y: np.ndarray, x: np.ndarray) -> np.ndarray | float:
        """f(y|x), up to the normalizing constant."""

    @abstractmethod
    def grad(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        """grad_x f(y|x)."""

    @abstractmethod
    def grad_step_vjp(self, v: np.ndarray, gamma: float) -> np.ndarray:
        """Product of v with the Jacobian of x -> x - gamma grad_x f(y|x)."""


@dataclass(frozen=True, eq=False)
class GaussianLinearModel(ForwardModel):
    """
    Gaussian linear forward model f(y|x) = ||y - Ax||^2 / (2 v^2).

    Attributes:
        A: (d_y, d_x) forward operator
        v2: Noise variance v^2
    """
    A: Mat
    v2: float
    lip_tol: float = 1e-12
    _lip: float = field(init=False, repr=False)
    _lambda_max: float = field(init=False, repr=False)

    def __post_init__(self):
        A = np.ascontiguousarray(np.asarray(self.A, dtype=np.float64))
        if A.ndim != 2:
            raise DimensionError(f"A must be a matrix, got shape {A.shape}")
        ensure_finite(A, "forward operator A")
        if not self.v2 > 0:
            raise ConfigValidationError(f"v2 must be positive, got {self.v2}", {"field": "v2"})
        A.setflags(write=False)
        power = power_iteration(A, tol=self.lip_tol)
        if not power.converged:
            logger.warning(f"lambda_max(A^T A) estimate did not converge after {power.iterations} iterations")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "_lambda_max", power.value)
        object.__setattr__(self, "_lip", power.value / self.v2)

    @property
    def d_x(self) -> int:
        return self.A.shape[1]

    @property
    def d_y(self) -> int:
        return self.A.shape[0]

    @property
    def lip(self) -> float:
        return self._lip

    @property
    def lambda_max(self) -> float:
        """Largest eigenvalue of A^T A."""
        return self._lambda_max

    def _check(self, y: np.ndarray, x: np.ndarray) -> None:
        if np.shape(y)[-1] != self.d_y or np.shape(x)[-1] != self.d_x:
            raise DimensionError(
                f"forward model expects y[..., {self.d_y}] and x[..., {self.d_x}], "
                f"got y {np.shape(y)} and x {np.shape(x)}",
                {"y_shape": list(np.shape(y)), "x_shape": list(np.shape(x))},
            )

    def value(self, y: np.ndarray, x: np.ndarray) -> np.ndarray | float:
        self._check(y, x)
        r = y - x @ self.A.T
        out = 0.5 * np.sum(r * r, axis=-1) / self.v2
        return float(out) if np.ndim(out) == 0 else out

    def grad(self, y: np.ndarray, x: np.ndarray) -> np.ndarray:
        self._check(y, x)
        return ((x @ self.A.T) - y) @ self.A / self.v2

    def grad_step_vjp(self, v: np.ndarray, gamma: float) -> np.ndarray:
        # (I - gamma A^T A / v2) is symmetric
        return v - gamma * ((v @ self.A.T) @ self.A) / self.v2

    def default_step(self, multiplier: float = 1.0) -> float:
        """See module-level ``default_step``."""
        return default_step(self, multiplier)


def f_value(m: GaussianLinearModel, y: np.ndarray, x: np.ndarray) -> float:
    """Return ||y - Ax||^2 / (2 v^2)."""
    return m.value(np.asarray(y, dtype=np.float64), np.asarray(x, dtype=np.float64))


def f_grad(m: GaussianLinearModel, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Return A^T (Ax - y) / v^2."""
    return m.grad(np.asarray(y, dtype=np.float64), np.asarray(x, dtype=np.float64))


def default_step(m: GaussianLinearModel, multiplier: float = 1.0) -> float:
    """
    Step size gamma = multiplier / M = multiplier * v^2 / lambda_max(A^T A).

    multiplier=1 satisfies the nonexpansiveness bound gamma <= 1/M;
    multiplier=2 gives the 2 v^2 / lambda_max choice of the elastic-net
    experiment.

    Raises:
        ConfigValidationError: If lambda_max(A^T A) is zero
    """
    if m.lambda_max == 0.0:
        raise ConfigValidationError("degenerate forward operator: lambda_max(A^T A) = 0")
    if multiplier <= 0:
        raise ConfigValidationError(f"gamma multiplier must be positive, got {multiplier}")
    return multiplier / m.lip


# ============= Operator builders =============

def gaussian_design(d_y: int, d_x: int, rng: RngState) -> Mat:
    """(d_y, d_x) matrix with i.i.d. standard normal entries."""
    return np.ascontiguousarray(rng.standard_normal((d_y, d_x)))


def build_blur_matrix(height: int, width: int, variance: float) -> Mat:
    """
    Gaussian blur acting on row-major vectorized images.

    Entry (output pixel (i,j), input pixel (k,l)) is proportional to
    exp(-((i-k)^2 + (j-l)^2) / (2 variance)); the kernel covers the whole
    image and each row is normalized to sum 1.

    Args:
        height: Image height (>= 1)
        width: Image width (>= 1)
        variance: Isotropic kernel variance (> 0)

    Returns:
        (height*width, height*width) blur matrix
    """
    if height < 1 or width < 1:
        raise ConfigValidationError(f"image dims must be >= 1, got {height}x{width}")
    if not variance > 0:
        raise ConfigValidationError(f"blur variance must be positive, got {variance}")
    ii, jj = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    rows = ii.ravel().astype(np.float64)
    cols = jj.ravel().astype(np.float64)
    dist2 = (rows[:, None] - rows[None, :]) ** 2 + (cols[:, None] - cols[None, :]) ** 2
    kernel = np.exp(-dist2 / (2.0 * variance))
    kernel /= kernel.sum(axis=1, keepdims=True)
    return np.ascontiguousarray(kernel)
