"""
Synthetic datasets for the inverse problems.

Latent samples x come either from the elastic-net marginal
mu(dx) ∝ exp(-R0(Bx)) dx (drawn exactly, coordinatewise in B-coordinates) or
from the 16x16 block-image generator; observations follow the Gaussian
linear forward model y = Ax + v eps.
"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Sequence
import hashlib
import logging
import math

import numpy as np

from .errors import ConfigValidationError, DimensionError
from .forward_model import GaussianLinearModel
from .numerics import Mat, RngState, trunc_normal_nonneg
from .regularizer import ElasticNet, OrthoRegularizer


logger = logging.getLogger(__name__)

GENERATOR_VERSION = "gdnet-datagen/1"


@dataclass(eq=False)
class Dataset:
    """
    Paired samples.

    Attributes:
        X: (n, d_x) latent samples
        Y: (n, d_y) observations
        meta: Generation record (seed, hyperparameters, generator version)
    """
    X: Mat
    Y: Mat
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.ascontiguousarray(np.asarray(self.X, dtype=np.float64))
        self.Y = np.ascontiguousarray(np.asarray(self.Y, dtype=np.float64))
        if self.X.ndim != 2 or self.Y.ndim != 2:
            raise DimensionError(f"X and Y must be 2-D, got shapes {self.X.shape} and {self.Y.shape}")
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimensionError(
                f"row counts differ: X has {self.X.shape[0]}, Y has {self.Y.shape[0]}",
                {"x_rows": self.X.shape[0], "y_rows": self.Y.shape[0]},
            )

    @property
    def n(self) -> int:
        return int(self.X.shape[0])

    def content_hash(self) -> str:
        """sha256 over shapes and little-endian bytes of X and Y."""
        h = hashlib.sha256()
        for block in (self.X, self.Y):
            h.update(np.asarray(block.shape, dtype="<u4").tobytes())
            h.update(block.astype("<f8", copy=False).tobytes())
        return h.hexdigest()

    def subset(self, rows: Sequence[int] | slice) -> "Dataset":
        """Rows ``rows`` with the generation record extended by the selection."""
        idx = np.arange(self.n)[rows] if isinstance(rows, slice) else np.asarray(rows, dtype=np.int64)
        meta = dict(self.meta)
        meta["parent_hash"] = self.content_hash()
        meta["rows"] = [int(i) for i in idx] if idx.size <= 64 else [int(idx[0]), int(idx[-1]), int(idx.size)]
        return Dataset(self.X[idx], self.Y[idx], meta)


# ============= Elastic-net marginal =============

def _sample_elastic_net_coords(lambda1: float, lambda2: float, size: int, rng: RngState) -> np.ndarray:
    """Draws from the density ∝ exp(-lambda1 |t| - lambda2 t^2 / 2)."""
    if lambda2 > 0:
        sd = 1.0 / math.sqrt(lambda2)
        magnitude = trunc_normal_nonneg(-lambda1 / lambda2, sd, size, rng)
    else:
        magnitude = rng.exponential(1.0 / lambda1, size)
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return sign * magnitude


def sample_mu(
    lambda1: float,
    lambda2: float,
    B: Optional[Mat],
    d: int,
    n: int,
    rng: RngState,
) -> Mat:
    """
    ``n`` i.i.d. draws from mu(dx) ∝ exp(-R0(Bx)) dx.

    Coordinates of z = Bx are drawn independently: uniform sign, magnitude
    N(-lambda1/lambda2, 1/lambda2) truncated to [0, inf) when lambda2 > 0,
    Exp(lambda1) when lambda2 = 0. The rows returned are B^T z.

    Raises:
        ConfigValidationError: If lambda1 = lambda2 = 0 (mu not normalizable)
    """
    if lambda1 < 0 or lambda2 < 0:
        raise ConfigValidationError(f"elastic-net weights must be >= 0, got {lambda1}, {lambda2}")
    if not ElasticNet(lambda1, lambda2).normalizable:
        raise ConfigValidationError(
            "elastic-net marginal with lambda1 = lambda2 = 0 is not normalizable", {"field": "lambda1"}
        )
    if B is not None and np.shape(B) != (d, d):
        raise DimensionError(f"B must have shape ({d}, {d}), got {np.shape(B)}")
    z = _sample_elastic_net_coords(lambda1, lambda2, n * d, rng).reshape(n, d)
    return np.ascontiguousarray(z if B is None else z @ np.asarray(B))


def sample_mu_elastic_net(
    lambda1: float,
    lambda2: float,
    B: Optional[Mat],
    d: int,
    rng: RngState,
) -> np.ndarray:
    """Single draw from the elastic-net marginal (see ``sample_mu``)."""
    return sample_mu(lambda1, lambda2, B, d, 1, rng)[0]


def generate_dataset(
    fm: GaussianLinearModel,
    mu: OrthoRegularizer,
    n: int,
    rng: RngState,
    meta: Optional[Dict[str, Any]] = None,
) -> Dataset:
    """
    i.i.d. pairs x_i ~ mu, y_i = A x_i + v eps_i.

    Args:
        fm: Forward model
        mu: Penalty R = R0(B .) defining the marginal exp(-R)
        n: Number of pairs (>= 1)
        rng: Random generator
        meta: Extra fields for the generation record

    Returns:
        Dataset
    """
    if n < 1:
        raise ConfigValidationError(f"n must be >= 1, got {n}", {"field": "n"})
    if mu.B is not None and mu.B.shape[0] != fm.d_x:
        raise DimensionError(f"B is {mu.B.shape} but d_x = {fm.d_x}")
    X = sample_mu(mu.base.lambda1, mu.base.lambda2, mu.B, fm.d_x, n, rng)
    Y = _observe(fm, X, rng)
    record = {
        "generator": GENERATOR_VERSION,
        "kind": "elastic_net",
        "lambda1": mu.base.lambda1,
        "lambda2": mu.base.lambda2,
        "ortho_B": mu.B is not None,
        "v2": fm.v2,
    }
    record.update(meta or {})
    logger.debug(f"generated {n} elastic-net pairs at d_x={fm.d_x}, d_y={fm.d_y}")
    return Dataset(X, Y, record)


def _observe(fm: GaussianLinearModel, X: Mat, rng: RngState) -> Mat:
    noise = rng.standard_normal((X.shape[0], fm.d_y))
    return np.ascontiguousarray(X @ fm.A.T + math.sqrt(fm.v2) * noise)


# ============= Block images =============

@dataclass(frozen=True)
class BlockImageParams:
    """
    Block-image generator parameters, Gaussians given as (mean, variance).

    The image is split into four equal blocks: upper-left and lower-right
    are diagonal, upper-right and lower-left are dense.
    """
    size: int = 16
    ul_mean: float = 20.0
    ul_var: float = 0.5
    lr_mean: float = -10.0
    lr_var: float = 0.1
    ur_mean: float = 10.0
    ur_var: float = 0.1
    ll_mean: float = -10.0
    ll_var: float = 5.0

    def __post_init__(self):
        if self.size < 2 or self.size % 2:
            raise ConfigValidationError(f"block image size must be even and >= 2, got {self.size}")
        for name in ("ul_var", "lr_var", "ur_var", "ll_var"):
            if getattr(self, name) < 0:
                raise ConfigValidationError(f"{name} must be >= 0", {"field": name})


def generate_block_images(n: int, rng: RngState, params: BlockImageParams = BlockImageParams()) -> Mat:
    """
    ``n`` row-major vectorized block images of shape (size, size).

    Off-diagonal entries of the two diagonal blocks are exactly zero.
    """
    if n < 1:
        raise ConfigValidationError(f"n must be >= 1, got {n}", {"field": "n"})
    s = params.size
    h = s // 2
    img = np.zeros((n, s, s))
    diag = np.arange(h)
    img[:, diag, diag] = rng.normal(params.ul_mean, math.sqrt(params.ul_var), (n, h))
    img[:, h + diag, h + diag] = rng.normal(params.lr_mean, math.sqrt(params.lr_var), (n, h))
    img[:, :h, h:] = rng.normal(params.ur_mean, math.sqrt(params.ur_var), (n, h, h))
    img[:, h:, :h] = rng.normal(params.ll_mean, math.sqrt(params.ll_var), (n, h, h))
    return np.ascontiguousarray(img.reshape(n, s * s))


def generate_deblur_dataset(
    fm: GaussianLinearModel,
    n: int,
    rng: RngState,
    params: BlockImageParams = BlockImageParams(),
    meta: Optional[Dict[str, Any]] = None,
) -> Dataset:
    """Block images pushed through the blur forward model."""
    if fm.d_x != params.size * params.size:
        raise DimensionError(
            f"forward model expects d_x={fm.d_x} but images have {params.size * params.size} pixels"
        )
    X = generate_block_images(n, rng, params)
    Y = _observe(fm, X, rng)
    record = {"generator": GENERATOR_VERSION, "kind": "block_images", "v2": fm.v2, "blocks": asdict(params)}
    record.update(meta or {})
    return Dataset(X, Y, record)
