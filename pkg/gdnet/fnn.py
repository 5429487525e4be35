"""
Learned proximal map H_W: layered forward pass, reverse-mode gradient,
sparsity masks and the exact elastic-net prox network.

Inputs are 1-D vectors or 2-D batches with samples on rows. Parameters live
in one flat float64 buffer (``FnnParams``); each parametric layer owns one
row-major block of it:

    dense      (out, in [+1 bias column])
    conv2d     (k*k*C + 1, F)   rows ordered (ki, kj, c), last row = bias
    separable  (coords, out_per_coord, in_per_coord [+1 bias column])
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, List, Optional, Sequence, Tuple
import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigValidationError, DimensionError, StaleTapeError
from .numerics import RngState


logger = logging.getLogger(__name__)


# ============= Layer specifications =============

class LayerKind(str, Enum):
    """Layer types of H_W."""
    DENSE = "dense"
    CONV2D = "conv2d"
    RELU = "relu"
    LAYERNORM = "layernorm"
    SEPARABLE = "separable"


PARAMETRIC = (LayerKind.DENSE, LayerKind.CONV2D, LayerKind.SEPARABLE)


@dataclass(frozen=True)
class LayerSpec:
    """One layer of H_W; only the fields of its kind are meaningful."""
    kind: LayerKind
    out_dim: int = 0
    augment_bias: bool = False
    kernel_size: int = 0
    filters: int = 0
    height: int = 0
    width: int = 0
    channels: int = 0
    epsilon: float = 1e-5
    coords: int = 0
    in_per_coord: int = 0
    out_per_coord: int = 0

    @classmethod
    def dense(cls, out_dim: int, augment_bias: bool = False) -> "LayerSpec":
        return cls(LayerKind.DENSE, out_dim=out_dim, augment_bias=augment_bias)

    @classmethod
    def conv2d(cls, kernel_size: int, filters: int, height: int, width: int, channels: int) -> "LayerSpec":
        return cls(
            LayerKind.CONV2D,
            kernel_size=kernel_size,
            filters=filters,
            height=height,
            width=width,
            channels=channels,
        )

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @classmethod
    def layernorm(cls, epsilon: float = 1e-5) -> "LayerSpec":
        return cls(LayerKind.LAYERNORM, epsilon=epsilon)

    @classmethod
    def separable(
        cls, coords: int, in_per_coord: int, out_per_coord: int, augment_bias: bool = False
    ) -> "LayerSpec":
        return cls(
            LayerKind.SEPARABLE,
            coords=coords,
            in_per_coord=in_per_coord,
            out_per_coord=out_per_coord,
            augment_bias=augment_bias,
        )

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC


def _layer_io(spec: LayerSpec, in_dim: int, index: int) -> Tuple[int, Optional[Tuple[int, ...]]]:
    """Output dim and parameter block shape of one layer."""
    if spec.kind == LayerKind.DENSE:
        if spec.out_dim < 1:
            raise ConfigValidationError(f"layer {index}: dense out_dim must be >= 1")
        return spec.out_dim, (spec.out_dim, in_dim + int(spec.augment_bias))
    if spec.kind == LayerKind.CONV2D:
        expected = spec.height * spec.width * spec.channels
        if expected != in_dim:
            raise DimensionError(
                f"layer {index}: conv2d expects {spec.height}x{spec.width}x{spec.channels}={expected} inputs, got {in_dim}",
                {"layer": index},
            )
        if spec.kernel_size < 1 or spec.filters < 1:
            raise ConfigValidationError(f"layer {index}: conv2d needs kernel_size >= 1 and filters >= 1")
        rows = spec.kernel_size * spec.kernel_size * spec.channels + 1
        return spec.height * spec.width * spec.filters, (rows, spec.filters)
    if spec.kind == LayerKind.SEPARABLE:
        expected = spec.coords * spec.in_per_coord
        if expected != in_dim:
            raise DimensionError(
                f"layer {index}: separable expects {spec.coords}x{spec.in_per_coord}={expected} inputs, got {in_dim}",
                {"layer": index},
            )
        shape = (spec.coords, spec.out_per_coord, spec.in_per_coord + int(spec.augment_bias))
        return spec.coords * spec.out_per_coord, shape
    return in_dim, None


def layer_dims(specs: Sequence[LayerSpec], input_dim: int) -> List[int]:
    """Dimensions p_0, p_1, ..., p_D of the activations."""
    dims = [input_dim]
    for i, spec in enumerate(specs):
        out, _ = _layer_io(spec, dims[-1], i)
        dims.append(out)
    return dims


def param_shapes(specs: Sequence[LayerSpec], input_dim: int) -> Tuple[Tuple[int, ...], ...]:
    """Block shapes of the parametric layers, in layer order."""
    shapes = []
    dim = input_dim
    for i, spec in enumerate(specs):
        dim_out, shape = _layer_io(spec, dim, i)
        if shape is not None:
            shapes.append(shape)
        dim = dim_out
    return tuple(shapes)


# ============= Parameter containers =============

class _BlockVector:
    """Flat buffer with a block view per parametric layer."""

    dtype: Any = np.float64

    def __init__(self, flat: np.ndarray, shapes: Sequence[Tuple[int, ...]]):
        shapes = tuple(tuple(int(s) for s in shape) for shape in shapes)
        total = sum(int(np.prod(s)) for s in shapes)
        flat = np.array(flat, dtype=self.dtype).ravel()
        if flat.size != total:
            raise DimensionError(
                f"{type(self).__name__} buffer has {flat.size} entries, shapes need {total}",
                {"size": flat.size, "expected": total},
            )
        flat.setflags(write=False)
        self.flat = flat
        self.shapes = shapes

    @classmethod
    def zeros(cls, shapes: Sequence[Tuple[int, ...]]):
        total = sum(int(np.prod(s)) for s in shapes)
        return cls(np.zeros(total, dtype=cls.dtype), shapes)

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]):
        shapes = [np.shape(b) for b in blocks]
        flat = np.concatenate([np.asarray(b, dtype=cls.dtype).ravel() for b in blocks]) if blocks else np.zeros(0)
        return cls(flat, shapes)

    @property
    def total_count(self) -> int:
        return int(self.flat.size)

    @property
    def blocks(self) -> List[np.ndarray]:
        out = []
        start = 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(self.flat[start:start + size].reshape(shape))
            start += size
        return out

    def with_flat(self, flat: np.ndarray):
        """Same shapes, new buffer."""
        return type(self)(flat, self.shapes)

    def zeros_like(self):
        return type(self).zeros(self.shapes)

    def congruent(self, other: "_BlockVector") -> bool:
        return self.shapes == other.shapes


class FnnParams(_BlockVector):
    """Weights W, one float64 block per parametric layer."""

    dtype = np.float64


class Mask(_BlockVector):
    """Binary sparsity structure Lambda, congruent to FnnParams."""

    dtype = np.uint8

    @classmethod
    def ones(cls, shapes: Sequence[Tuple[int, ...]]) -> "Mask":
        total = sum(int(np.prod(s)) for s in shapes)
        return cls(np.ones(total, dtype=np.uint8), shapes)

    @property
    def active_count(self) -> int:
        """||Lambda||_0."""
        return int(np.count_nonzero(self.flat))


def apply_mask(w: FnnParams, m: Mask) -> FnnParams:
    """Elementwise product W * Lambda."""
    if not w.congruent(m):
        raise DimensionError(
            f"mask shapes {m.shapes} do not match parameter shapes {w.shapes}",
            {"param_shapes": [list(s) for s in w.shapes], "mask_shapes": [list(s) for s in m.shapes]},
        )
    return w.with_flat(w.flat * m.flat)


# ============= Forward / backward =============

@dataclass
class FnnTape:
    """Activation cache of one forward call."""
    params: FnnParams
    specs: Tuple[LayerSpec, ...]
    caches: List[Any]
    batched: bool
    input_dim: int
    inputs: List[np.ndarray] = field(default_factory=list)


def _conv_pads(k: int) -> Tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def _conv_forward(spec: LayerSpec, block: np.ndarray, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    b = x.shape[0]
    H, W, C, k = spec.height, spec.width, spec.channels, spec.kernel_size
    img = x.reshape(b, H, W, C)
    before, after = _conv_pads(k)
    padded = np.pad(img, ((0, 0), (before, after), (before, after), (0, 0)))
    windows = sliding_window_view(padded, (k, k), axis=(1, 2))  # (b, H, W, C, k, k)
    patches = np.ascontiguousarray(windows.transpose(0, 1, 2, 4, 5, 3)).reshape(b * H * W, k * k * C)
    out = patches @ block[:-1] + block[-1]
    return out.reshape(b, H * W * spec.filters), patches


def _conv_backward(
    spec: LayerSpec, block: np.ndarray, patches: np.ndarray, g: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    b = g.shape[0]
    H, W, C, k, F = spec.height, spec.width, spec.channels, spec.kernel_size, spec.filters
    gz = g.reshape(b * H * W, F)
    grad_block = np.empty_like(block)
    grad_block[:-1] = patches.T @ gz
    grad_block[-1] = gz.sum(axis=0)
    gpatch = (gz @ block[:-1].T).reshape(b, H, W, k, k, C)
    before, _ = _conv_pads(k)
    gpad = np.zeros((b, H + k - 1, W + k - 1, C))
    for ki in range(k):
        for kj in range(k):
            gpad[:, ki:ki + H, kj:kj + W, :] += gpatch[:, :, :, ki, kj, :]
    gx = gpad[:, before:before + H, before:before + W, :]
    return grad_block, gx.reshape(b, H * W * C)


def fnn_forward(specs: Sequence[LayerSpec], w: FnnParams, x: np.ndarray) -> Tuple[np.ndarray, FnnTape]:
    """
    Evaluate H_W(x) = Psi_D o ... o Psi_1 (x).

    Args:
        specs: Layer specifications
        w: Parameters (one block per parametric layer)
        x: Input vector or (batch, p_0) matrix

    Returns:
        Output (same batching as x) and the tape for ``fnn_backward``

    Raises:
        DimensionError: On shape mismatch, naming the layer index
    """
    specs = tuple(specs)
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    shapes = param_shapes(specs, h.shape[1])
    if shapes != w.shapes:
        raise DimensionError(
            f"parameter shapes {w.shapes} do not match the layer stack {shapes}",
            {"expected": [list(s) for s in shapes], "got": [list(s) for s in w.shapes]},
        )
    blocks = w.blocks
    caches: List[Any] = []
    inputs: List[np.ndarray] = []
    bi = 0
    for spec in specs:
        inputs.append(h)
        if spec.kind == LayerKind.DENSE:
            block = blocks[bi]
            bi += 1
            xa = np.hstack([h, np.ones((h.shape[0], 1))]) if spec.augment_bias else h
            caches.append(xa)
            h = xa @ block.T
        elif spec.kind == LayerKind.CONV2D:
            block = blocks[bi]
            bi += 1
            h, patches = _conv_forward(spec, block, h)
            caches.append(patches)
        elif spec.kind == LayerKind.SEPARABLE:
            block = blocks[bi]
            bi += 1
            xr = h.reshape(h.shape[0], spec.coords, spec.in_per_coord)
            if spec.augment_bias:
                xr = np.concatenate([xr, np.ones((h.shape[0], spec.coords, 1))], axis=2)
            caches.append(xr)
            h = np.einsum("dok,bdk->bdo", block, xr).reshape(h.shape[0], -1)
        elif spec.kind == LayerKind.RELU:
            active = h > 0.0
            caches.append(active)
            h = np.where(active, h, 0.0)
        elif spec.kind == LayerKind.LAYERNORM:
            mean = h.mean(axis=1, keepdims=True)
            centered = h - mean
            inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + spec.epsilon)
            h = centered * inv_std
            caches.append((h, inv_std))
        else:
            raise ConfigValidationError(f"unknown layer kind {spec.kind!r}")
    tape = FnnTape(params=w, specs=specs, caches=caches, batched=batched, input_dim=x.shape[-1], inputs=inputs)
    return (h if batched else h[0]), tape


def fnn_backward(tape: FnnTape, w: FnnParams, upstream: np.ndarray) -> Tuple[FnnParams, np.ndarray]:
    """
    Reverse-mode gradients of <upstream, H_W(x)> with respect to W and x.

    Parameter gradients are summed over the batch; the input gradient keeps
    the batching of the forward call.

    Raises:
        StaleTapeError: If the tape was not produced with ``w``
    """
    if tape.params is not w:
        raise StaleTapeError("tape was recorded with different parameters")
    g = np.asarray(upstream, dtype=np.float64)
    g = g if tape.batched else g[None, :]
    blocks = w.blocks
    grads: List[np.ndarray] = [np.zeros_like(b) for b in blocks]
    bi = len(blocks)
    for spec, cache in zip(reversed(tape.specs), reversed(tape.caches)):
        if spec.kind == LayerKind.DENSE:
            bi -= 1
            grads[bi] = g.T @ cache
            g = g @ blocks[bi]
            if spec.augment_bias:
                g = g[:, :-1]
        elif spec.kind == LayerKind.CONV2D:
            bi -= 1
            grads[bi], g = _conv_backward(spec, blocks[bi], cache, g)
        elif spec.kind == LayerKind.SEPARABLE:
            bi -= 1
            gr = g.reshape(g.shape[0], spec.coords, spec.out_per_coord)
            grads[bi] = np.einsum("bdo,bdk->dok", gr, cache)
            gx = np.einsum("bdo,dok->bdk", gr, blocks[bi])
            if spec.augment_bias:
                gx = gx[:, :, :-1]
            g = gx.reshape(g.shape[0], -1)
        elif spec.kind == LayerKind.RELU:
            g = np.where(cache, g, 0.0)
        elif spec.kind == LayerKind.LAYERNORM:
            xhat, inv_std = cache
            n = g.shape[1]
            g = inv_std * (g - g.sum(axis=1, keepdims=True) / n - xhat * (g * xhat).sum(axis=1, keepdims=True) / n)
    grad_w = FnnParams.from_blocks(grads) if grads else FnnParams.zeros(w.shapes)
    return grad_w, (g if tape.batched else g[0])


# ============= Constructors =============

class InitScheme(str, Enum):
    """Weight initialization schemes."""
    HE_NORMAL = "he_normal"
    ZEROS = "zeros"
    EXACT_PROX = "exact_prox"


EXACT_PROX_LAYOUTS = ("dense", "separable", "ortho")


def exact_prox_specs(d: int, layout: str = "dense") -> Tuple[LayerSpec, ...]:
    """
    Layer stack of the ReLU network representing Prox^{gamma R}.

    ``dense`` and ``separable`` hold the 2-layer shrinkage net s_gamma;
    ``ortho`` wraps it between linear layers B and B^T for R(x) = R0(Bx).
    """
    if layout == "dense":
        return (LayerSpec.dense(2 * d, augment_bias=True), LayerSpec.relu(), LayerSpec.dense(d))
    if layout == "separable":
        return (
            LayerSpec.separable(d, 1, 2, augment_bias=True),
            LayerSpec.relu(),
            LayerSpec.separable(d, 2, 1, augment_bias=True),
        )
    if layout == "ortho":
        return (LayerSpec.dense(d), *exact_prox_specs(d, "dense"), LayerSpec.dense(d))
    raise ConfigValidationError(f"unknown exact-prox layout {layout!r}")


def match_exact_prox_layout(specs: Sequence[LayerSpec], d: int) -> Optional[str]:
    """Layout whose exact-prox stack equals ``specs``, or None."""
    specs = tuple(specs)
    return next((lay for lay in EXACT_PROX_LAYOUTS if specs == exact_prox_specs(d, lay)), None)


def _shrinkage_blocks(scale: float, shift: float, d: int) -> List[np.ndarray]:
    first = np.zeros((2 * d, d + 1))
    idx = np.arange(d)
    first[idx, idx] = scale
    first[d + idx, idx] = -scale
    first[:, d] = shift
    return [first, np.hstack([np.eye(d), -np.eye(d)])]


def build_exact_prox_net(
    gamma: float,
    lambda1: float,
    lambda2: float,
    d: int,
    layout: str = "dense",
    basis: Optional[np.ndarray] = None,
) -> Tuple[Tuple[LayerSpec, ...], FnnParams]:
    """
    ReLU network with H_{W*} equal to Prox^{gamma R}.

    Hidden unit i computes relu((x_i - gamma lambda1) / (1 + gamma lambda2)),
    unit d+i computes relu((-x_i - gamma lambda1) / (1 + gamma lambda2)), and
    the output layer takes their difference. The separable layout groups the
    two hidden units of each coordinate together. The ortho layout maps x to
    Bx first and the shrunk coefficients back through B^T.

    Args:
        gamma: Step size (> 0)
        lambda1: l1 weight
        lambda2: l2 weight
        d: Dimension
        layout: "dense", "separable" or "ortho"
        basis: Orthogonal B of R(x) = R0(Bx); only the ortho layout accepts
            one, and it defaults to the identity there

    Returns:
        (specs, w_star)

    Raises:
        ConfigValidationError: If a non-identity basis is given to a
            shrinkage-only layout
    """
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    specs = exact_prox_specs(d, layout)
    if basis is not None and layout != "ortho":
        raise ConfigValidationError(
            f"the {layout} exact-prox layout represents R0 only; use the ortho layout for R0(Bx)",
            {"field": "model.layers", "layout": layout},
        )
    scale = 1.0 / (1.0 + gamma * lambda2)
    shift = -gamma * lambda1 * scale
    if layout == "dense":
        return specs, FnnParams.from_blocks(_shrinkage_blocks(scale, shift, d))
    if layout == "ortho":
        B = np.eye(d) if basis is None else np.asarray(basis, dtype=np.float64)
        if B.shape != (d, d):
            raise DimensionError(f"basis must have shape ({d}, {d}), got {B.shape}")
        return specs, FnnParams.from_blocks([B, *_shrinkage_blocks(scale, shift, d), B.T])
    first = np.empty((d, 2, 2))
    first[:, 0, :] = (scale, shift)
    first[:, 1, :] = (-scale, shift)
    second = np.empty((d, 1, 3))
    second[:, 0, :] = (1.0, -1.0, 0.0)
    return specs, FnnParams.from_blocks([first, second])


def _fan_in(shape: Tuple[int, ...], spec: LayerSpec) -> int:
    # inputs feeding one output unit, bias entry included
    if spec.kind == LayerKind.CONV2D:
        return shape[0]
    return shape[-1]


def init_weights(
    specs: Sequence[LayerSpec],
    scheme: InitScheme | str,
    rng: Optional[RngState],
    input_dim: int,
    prox_params: Optional[Tuple[float, float, float]] = None,
    basis: Optional[np.ndarray] = None,
) -> FnnParams:
    """
    Initial parameters for a layer stack.

    Args:
        specs: Layer specifications
        scheme: he_normal (N(0, 2/fan_in) per entry), zeros, or exact_prox
        rng: Random generator (he_normal only)
        input_dim: Dimension p_0 of the network input
        prox_params: (gamma, lambda1, lambda2) for exact_prox
        basis: Orthogonal B of the regularizer for exact_prox (None: identity)

    Raises:
        ConfigValidationError: If exact_prox is requested for an incompatible stack
    """
    scheme = InitScheme(scheme)
    specs = tuple(specs)
    shapes = param_shapes(specs, input_dim)
    if scheme == InitScheme.ZEROS:
        return FnnParams.zeros(shapes)
    if scheme == InitScheme.EXACT_PROX:
        if prox_params is None:
            raise ConfigValidationError("exact_prox initialization needs (gamma, lambda1, lambda2)")
        layout = match_exact_prox_layout(specs, input_dim)
        if layout is None:
            raise ConfigValidationError(
                "exact_prox initialization needs the stack dense(2d, bias) -> relu -> dense(d), "
                "its separable counterpart, or dense(d) -> dense(2d, bias) -> relu -> dense(d) -> dense(d)",
                {"input_dim": input_dim},
            )
        gamma, lambda1, lambda2 = prox_params
        return build_exact_prox_net(gamma, lambda1, lambda2, input_dim, layout, basis)[1]
    if rng is None:
        raise ValueError("he_normal initialization needs a random generator")
    param_specs = [s for s in specs if s.parametric]
    blocks = [
        rng.normal(0.0, np.sqrt(2.0 / _fan_in(shape, spec)), size=shape)
        for shape, spec in zip(shapes, param_specs)
    ]
    return FnnParams.from_blocks(blocks)
