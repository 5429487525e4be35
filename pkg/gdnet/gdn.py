"""
Unrolled estimator g_W: D' weight-shared applications of
F_{y,W}(x) = H_W(x - gamma grad_x f(y|x)) starting from x0, plus the
no-physics baseline that applies H_W directly to y.
"""
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence, Tuple
import logging

import numpy as np

from .errors import ConfigValidationError, DimensionError, DivergenceError, StaleTapeError
from .fnn import FnnParams, FnnTape, LayerSpec, fnn_backward, fnn_forward, layer_dims, param_shapes
from .forward_model import GaussianLinearModel


logger = logging.getLogger(__name__)


class Estimator(Protocol):
    """What the sampler and the harness need from a trainable estimator."""

    specs: Tuple[LayerSpec, ...]

    @property
    def input_dim(self) -> int: ...

    @property
    def output_dim(self) -> int: ...

    @property
    def net_input_dim(self) -> int: ...

    def param_shapes(self) -> Tuple[Tuple[int, ...], ...]: ...

    def forward(self, w: FnnParams, y: np.ndarray): ...

    def backward(self, w: FnnParams, tape, residual: np.ndarray) -> FnnParams: ...


@dataclass
class GdnTape:
    """Unroll cache: one inner fnn tape per stage plus diagnostics."""
    params: FnnParams
    stages: List[FnnTape]
    batched: bool
    max_iterate_norm: np.ndarray


@dataclass(frozen=True, eq=False)
class GdnModel:
    """
    Gradient descent network g_W.

    Attributes:
        fm: Forward model
        specs: Layer stack of H_W (input and output dim d_x)
        gamma: Step size, 0 < gamma <= gamma_multiplier / M
        depth_unroll: Number of stages D' >= 1
        x0: Starting point (zeros when None)
        gamma_multiplier: Upper bound factor on gamma M
    """
    fm: GaussianLinearModel
    specs: Tuple[LayerSpec, ...]
    gamma: float
    depth_unroll: int
    x0: Optional[np.ndarray] = None
    gamma_multiplier: float = 1.0
    _x0: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))
        d = self.fm.d_x
        dims = layer_dims(self.specs, d)
        if dims[-1] != d:
            raise DimensionError(
                f"H_W must map R^{d} to R^{d}, layer stack ends at dimension {dims[-1]}",
                {"d_x": d, "output_dim": dims[-1]},
            )
        if self.depth_unroll < 1:
            raise ConfigValidationError(f"depth_unroll must be >= 1, got {self.depth_unroll}")
        bound = self.gamma_multiplier / self.fm.lip
        if not 0.0 < self.gamma <= bound * (1.0 + 1e-9):
            raise ConfigValidationError(
                f"gamma={self.gamma:.6g} outside (0, {bound:.6g}]", {"field": "gamma"}
            )
        x0 = np.zeros(d) if self.x0 is None else np.asarray(self.x0, dtype=np.float64)
        if x0.shape != (d,):
            raise DimensionError(f"x0 must have shape ({d},), got {x0.shape}")
        object.__setattr__(self, "_x0", x0)

    @property
    def input_dim(self) -> int:
        return self.fm.d_y

    @property
    def output_dim(self) -> int:
        return self.fm.d_x

    @property
    def net_input_dim(self) -> int:
        """Input dimension of H_W."""
        return self.fm.d_x

    def param_shapes(self) -> Tuple[Tuple[int, ...], ...]:
        return param_shapes(self.specs, self.fm.d_x)

    def with_depth(self, depth_unroll: int) -> "GdnModel":
        """Same model, different unrolling depth."""
        return GdnModel(self.fm, self.specs, self.gamma, depth_unroll, self.x0, self.gamma_multiplier)

    def forward(self, w: FnnParams, y: np.ndarray) -> Tuple[np.ndarray, GdnTape]:
        return gdn_forward(self, w, y)

    def backward(self, w: FnnParams, tape: GdnTape, residual: np.ndarray) -> FnnParams:
        return gdn_backward(self, w, tape, residual)


def gdn_forward(g: GdnModel, w: FnnParams, y: np.ndarray) -> Tuple[np.ndarray, GdnTape]:
    """
    Evaluate g_W(y) = F_{y,W}^{D'}(x0).

    Args:
        g: Model
        w: Parameters of H_W (already masked by the caller if needed)
        y: Observation vector or (batch, d_y) matrix

    Returns:
        Estimate (same batching as y) and the unroll tape

    Raises:
        DivergenceError: If an intermediate iterate is not finite
    """
    y = np.asarray(y, dtype=np.float64)
    batched = y.ndim == 2
    Y = y if batched else y[None, :]
    if Y.shape[1] != g.fm.d_y:
        raise DimensionError(f"y must have {g.fm.d_y} columns, got shape {y.shape}")
    x = np.broadcast_to(g._x0, (Y.shape[0], g.fm.d_x)).copy()
    stages: List[FnnTape] = []
    max_norm = np.linalg.norm(x, axis=1)
    for k in range(g.depth_unroll):
        u = x - g.gamma * g.fm.grad(Y, x)
        x, tape = fnn_forward(g.specs, w, u)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite iterate at unroll stage {k}", {"stage": k})
        stages.append(tape)
        max_norm = np.maximum(max_norm, np.linalg.norm(x, axis=1))
    tape = GdnTape(params=w, stages=stages, batched=batched, max_iterate_norm=max_norm)
    return (x if batched else x[0]), tape


def gdn_jacobian_step(g: GdnModel, v: np.ndarray) -> np.ndarray:
    """Product of v with (I - gamma A^T A / v^2)."""
    return g.fm.grad_step_vjp(v, g.gamma)


def gdn_backward(g: GdnModel, w: FnnParams, tape: GdnTape, residual: np.ndarray) -> FnnParams:
    """
    Gradient of <residual, g_W(y)> with respect to W.

    Contributions of the D' weight-shared stages are accumulated; between
    stages the adjoint passes through the gradient-step Jacobian.

    Raises:
        StaleTapeError: If the tape was not recorded with ``w``
    """
    if tape.params is not w:
        raise StaleTapeError("unroll tape was recorded with different parameters")
    lam = np.asarray(residual, dtype=np.float64)
    lam = lam if tape.batched else lam[None, :]
    total = np.zeros_like(w.flat)
    for stage in reversed(tape.stages):
        grad_w, grad_u = fnn_backward(stage, w, lam)
        total += grad_w.flat
        lam = gdn_jacobian_step(g, grad_u)
    return w.with_flat(total)


# ============= No-physics baseline =============

@dataclass(frozen=True)
class FnnBaseline:
    """Regressor H_W(y) that ignores the forward model."""
    specs: Tuple[LayerSpec, ...]
    d_y: int

    def __post_init__(self):
        object.__setattr__(self, "specs", tuple(self.specs))

    @property
    def input_dim(self) -> int:
        return self.d_y

    @property
    def output_dim(self) -> int:
        return layer_dims(self.specs, self.d_y)[-1]

    @property
    def net_input_dim(self) -> int:
        return self.d_y

    def param_shapes(self) -> Tuple[Tuple[int, ...], ...]:
        return param_shapes(self.specs, self.d_y)

    def forward(self, w: FnnParams, y: np.ndarray) -> Tuple[np.ndarray, FnnTape]:
        y = np.asarray(y, dtype=np.float64)
        out, tape = fnn_forward(self.specs, w, y)
        if not np.all(np.isfinite(out)):
            raise DivergenceError("non-finite baseline output")
        return out, tape

    def backward(self, w: FnnParams, tape: FnnTape, residual: np.ndarray) -> FnnParams:
        return fnn_backward(tape, w, residual)[0]


def fnn_baseline_predict(specs: Sequence[LayerSpec], w: FnnParams, y: np.ndarray) -> np.ndarray:
    """Plain H_W(y)."""
    return fnn_forward(specs, w, y)[0]
