"""
Dense linear algebra and seeded random sampling primitives.

All reals are float64. Random streams come from the counter-based Philox
generator so that independent runs can derive disjoint streams from
``(seed, stream_id)``.
"""
from dataclasses import dataclass
from typing import Any, Dict
import logging

import numpy as np
import numpy.typing as npt
from scipy.stats import truncnorm

from .errors import DimensionError, DivergenceError


logger = logging.getLogger(__name__)

Mat = npt.NDArray[np.float64]
RngState = np.random.Generator


# ============= Matrices =============

def as_matrix(data: Any, rows: int | None = None, cols: int | None = None) -> Mat:
    """
    Build a row-major float64 matrix.

    Args:
        data: Array-like data (nested lists or flat sequence)
        rows: Row count when ``data`` is flat
        cols: Column count when ``data`` is flat

    Returns:
        C-ordered float64 matrix

    Raises:
        DimensionError: If the data length is not rows*cols
    """
    arr = np.asarray(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if arr.size != rows * cols:
            raise DimensionError(
                f"data length {arr.size} does not equal rows*cols = {rows}*{cols}",
                {"length": arr.size, "rows": rows, "cols": cols},
            )
        arr = arr.reshape(rows, cols)
    if arr.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {arr.shape}")
    ensure_finite(arr, "matrix")
    return np.ascontiguousarray(arr)


def ensure_finite(arr: np.ndarray, what: str) -> np.ndarray:
    """Raise DivergenceError if ``arr`` holds NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite entries in {what}", {"what": what})
    return arr


def matvec(m: Mat, x: np.ndarray) -> np.ndarray:
    """
    Exact dense product ``m @ x``.

    Args:
        m: Matrix of shape (rows, cols)
        x: Vector of length cols

    Returns:
        Vector of length rows

    Raises:
        DimensionError: If x does not have m.cols entries
    """
    x = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or x.ndim != 1 or x.shape[0] != m.shape[1]:
        raise DimensionError(
            f"cannot multiply matrix of shape {m.shape} with vector of shape {x.shape}",
            {"matrix_shape": list(m.shape), "vector_shape": list(x.shape)},
        )
    return m @ x


@dataclass(frozen=True)
class PowerIterationResult:
    """Outcome of a power iteration on m^T m."""
    value: float
    iterations: int
    converged: bool


def power_iteration(m: Mat, tol: float = 1e-12, max_iter: int = 100_000) -> PowerIterationResult:
    """
    Largest eigenvalue of m^T m by power iteration.

    The start vector is the normalized all-ones vector. The estimate is the
    Rayleigh quotient ||m v||^2; iteration stops once its relative change
    drops below ``tol``.

    Args:
        m: Matrix (not necessarily square)
        tol: Relative tolerance on successive estimates
        max_iter: Iteration cap

    Returns:
        PowerIterationResult with the best estimate and a convergence flag
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if not np.any(m):
        return PowerIterationResult(value=0.0, iterations=0, converged=True)

    n = m.shape[1]
    v = np.full(n, 1.0 / np.sqrt(n))
    value = float(np.dot(m @ v, m @ v))
    for it in range(1, max_iter + 1):
        w = m.T @ (m @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            # start vector in the null space; restart from a fixed basis vector
            v = np.zeros(n)
            v[it % n] = 1.0
            continue
        v = w / norm
        mv = m @ v
        new_value = float(np.dot(mv, mv))
        if abs(new_value - value) <= tol * abs(new_value):
            return PowerIterationResult(value=new_value, iterations=it, converged=True)
        value = new_value

    logger.warning(f"power iteration stopped at max_iter={max_iter} without reaching tol={tol}")
    return PowerIterationResult(value=value, iterations=max_iter, converged=False)


def spectral_norm_sq(m: Mat, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Return lambda_max(m^T m); see ``power_iteration`` for the convergence flag."""
    return power_iteration(m, tol=tol, max_iter=max_iter).value


# ============= Random streams =============

def make_rng(seed: int, *stream: int) -> RngState:
    """
    Philox generator for ``seed`` and an optional stream path.

    Streams with different paths are statistically independent and depend
    only on (seed, stream), never on call order.
    """
    seq = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(seq))


def rng_state_to_json(rng: RngState) -> Dict[str, Any]:
    """Serialize a generator's state with every integer as a decimal string."""
    return _encode_state(rng.bit_generator.state)


def rng_from_json(state: Dict[str, Any]) -> RngState:
    """Rebuild a Philox generator from ``rng_state_to_json`` output."""
    decoded = _decode_state(state)
    if decoded.get("bit_generator") != "Philox":
        raise ValueError(f"unsupported bit generator {decoded.get('bit_generator')!r}")
    bitgen = np.random.Philox()
    bitgen.state = decoded
    return np.random.Generator(bitgen)


def _encode_state(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _encode_state(v) for k, v in value.items()}
    if isinstance(value, np.ndarray):
        return {"__uint64__": [str(int(v)) for v in value.ravel()]}
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return value


def _decode_state(value: Any) -> Any:
    if isinstance(value, dict):
        if "__uint64__" in value:
            return np.array([int(v) for v in value["__uint64__"]], dtype=np.uint64)
        return {k: _decode_state(v) for k, v in value.items()}
    if isinstance(value, str) and value.isdigit():
        return int(value)
    return value


# ============= Sampling =============

def rand_orthogonal(d: int, rng: RngState) -> Mat:
    """
    Haar-distributed orthogonal matrix.

    QR of a standard Gaussian matrix with the diagonal of R forced positive.

    Args:
        d: Dimension (>= 1)
        rng: Random generator

    Returns:
        (d, d) orthogonal matrix
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    g = rng.standard_normal((d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray(q * signs)


def trunc_normal_nonneg(mean: float, sd: float, size: int, rng: RngState) -> np.ndarray:
    """``size`` draws from N(mean, sd^2) conditioned on [0, inf)."""
    if sd <= 0:
        raise ValueError(f"sd must be positive, got {sd}")
    draws = truncnorm.rvs(-mean / sd, np.inf, loc=mean, scale=sd, size=size, random_state=rng)
    # loc + scale * a can round just below zero
    return np.maximum(np.asarray(draws, dtype=np.float64), 0.0)


def sample_trunc_normal_nonneg(mean: float, sd: float, rng: RngState) -> float:
    """Single draw from N(mean, sd^2) conditioned on [0, inf)."""
    return float(trunc_normal_nonneg(mean, sd, 1, rng)[0])
