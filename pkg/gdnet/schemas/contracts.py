"""
Experiment configuration contracts.

Every experiment is described by one ``ExperimentConfig``. Configs are strict:
unknown fields and inconsistent dimensions are rejected before any
computation starts. Named presets live in ``PRESETS``.
"""
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Tuple, Union
import hashlib
import json

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigValidationError, DimensionError
from ..fnn import InitScheme, LayerSpec, layer_dims


# ============= Enums =============

class DataKind(str, Enum):
    """Latent sample generator."""
    ELASTIC_NET = "elastic_net"
    BLOCK_IMAGES = "block_images"


class GammaMode(str, Enum):
    """How the unrolling step size is chosen."""
    AUTO = "auto"
    AUTO_MULTIPLIER = "auto_multiplier"
    EXPLICIT = "explicit"


class EvalTarget(str, Enum):
    """Reference the test error is measured against."""
    ORACLE = "oracle"
    TRUTH = "truth"


class Likelihood(str, Enum):
    """Whether the posterior sees the training data."""
    DATA = "data"
    NONE = "none"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ============= Data =============

class BlockImageConfig(_Strict):
    """Block-image generator parameters; Gaussians as (mean, variance)."""
    size: int = Field(default=16, ge=2, description="Image side length (even)")
    ul_mean: float = 20.0
    ul_var: float = Field(default=0.5, ge=0)
    lr_mean: float = -10.0
    lr_var: float = Field(default=0.1, ge=0)
    ur_mean: float = 10.0
    ur_var: float = Field(default=0.1, ge=0)
    ll_mean: float = -10.0
    ll_var: float = Field(default=5.0, ge=0)


class DataConfig(_Strict):
    """Forward model, regularizer and sample sizes."""
    kind: DataKind = Field(default=DataKind.ELASTIC_NET, description="Latent sample generator")
    n_train: int = Field(..., ge=1, description="Training pairs")
    n_test: int = Field(..., ge=1, description="Test pairs")
    d_x: int = Field(..., ge=1, description="Latent dimension")
    d_y: int = Field(..., ge=1, description="Observation dimension")
    v2: float = Field(..., gt=0, description="Observation noise variance")
    lambda1: float = Field(default=1.0, ge=0, description="l1 weight of the regularizer")
    lambda2: float = Field(default=1.0, ge=0, description="l2 weight of the regularizer")
    ortho_B: bool = Field(default=False, description="Random orthogonal B instead of the identity")
    blur: bool = Field(default=False, description="Gaussian blur operator instead of a Gaussian design")
    blur_variance: float = Field(default=3.0, gt=0, description="Isotropic blur kernel variance")
    image_height: Optional[int] = Field(None, ge=1)
    image_width: Optional[int] = Field(None, ge=1)
    blocks: BlockImageConfig = Field(default_factory=BlockImageConfig)

    @model_validator(mode="after")
    def _check_dims(self) -> "DataConfig":
        if self.blur:
            if self.image_height is None or self.image_width is None:
                raise ValueError("blur needs image_height and image_width")
            pixels = self.image_height * self.image_width
            if self.d_x != pixels or self.d_y != pixels:
                raise ValueError(f"d_x and d_y must equal image_height*image_width = {pixels} when blur is set")
        if self.kind == DataKind.BLOCK_IMAGES:
            if self.blocks.size % 2:
                raise ValueError("blocks.size must be even")
            if self.d_x != self.blocks.size ** 2:
                raise ValueError(f"d_x must equal blocks.size^2 = {self.blocks.size ** 2} for block images")
        elif self.lambda1 == 0 and self.lambda2 == 0:
            raise ValueError("lambda1 and lambda2 cannot both be 0 for the elastic-net marginal")
        return self


# ============= Model =============

class DenseLayerConfig(_Strict):
    kind: Literal["dense"] = "dense"
    out_dim: int = Field(..., ge=1)
    bias: bool = False

    def to_spec(self) -> LayerSpec:
        return LayerSpec.dense(self.out_dim, self.bias)


class Conv2dLayerConfig(_Strict):
    kind: Literal["conv2d"] = "conv2d"
    kernel_size: int = Field(..., ge=1)
    filters: int = Field(..., ge=1)
    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    channels: int = Field(default=1, ge=1)

    def to_spec(self) -> LayerSpec:
        return LayerSpec.conv2d(self.kernel_size, self.filters, self.height, self.width, self.channels)


class ReluLayerConfig(_Strict):
    kind: Literal["relu"] = "relu"

    def to_spec(self) -> LayerSpec:
        return LayerSpec.relu()


class LayerNormLayerConfig(_Strict):
    kind: Literal["layernorm"] = "layernorm"
    epsilon: float = Field(default=1e-5, gt=0)

    def to_spec(self) -> LayerSpec:
        return LayerSpec.layernorm(self.epsilon)


class SeparableLayerConfig(_Strict):
    kind: Literal["separable"] = "separable"
    coords: int = Field(..., ge=1)
    in_per_coord: int = Field(..., ge=1)
    out_per_coord: int = Field(..., ge=1)
    bias: bool = False

    def to_spec(self) -> LayerSpec:
        return LayerSpec.separable(self.coords, self.in_per_coord, self.out_per_coord, self.bias)


LayerConfig = Annotated[
    Union[DenseLayerConfig, Conv2dLayerConfig, ReluLayerConfig, LayerNormLayerConfig, SeparableLayerConfig],
    Field(discriminator="kind"),
]


class ModelConfig(_Strict):
    """Architecture of H_W and the unrolling."""
    layers: List[LayerConfig] = Field(..., min_length=1, description="Layer stack of H_W")
    baseline_layers: Optional[List[LayerConfig]] = Field(
        None, description="Layer stack of the no-physics baseline (defaults to layers)"
    )
    depth_unroll: int = Field(..., ge=1, description="Unrolling depth D'")
    gamma_mode: GammaMode = Field(default=GammaMode.AUTO)
    gamma_multiplier: float = Field(default=1.0, gt=0, description="gamma = multiplier / M in auto_multiplier mode")
    gamma: Optional[float] = Field(None, gt=0, description="Explicit step size")
    x0: Optional[List[float]] = Field(None, description="Starting point (zeros when omitted)")
    init: InitScheme = Field(default=InitScheme.HE_NORMAL)

    @model_validator(mode="after")
    def _check_gamma(self) -> "ModelConfig":
        if self.gamma_mode == GammaMode.EXPLICIT and self.gamma is None:
            raise ValueError("gamma_mode 'explicit' needs gamma")
        if self.gamma_mode != GammaMode.EXPLICIT and self.gamma is not None:
            raise ValueError(f"gamma is only used with gamma_mode 'explicit', got '{self.gamma_mode.value}'")
        return self

    def specs(self) -> Tuple[LayerSpec, ...]:
        return tuple(layer.to_spec() for layer in self.layers)

    def baseline_specs(self) -> Tuple[LayerSpec, ...]:
        return tuple(layer.to_spec() for layer in (self.baseline_layers or self.layers))


# ============= Prior / sampler / evaluation =============

class PriorConfig(_Strict):
    """Spike-and-slab prior; rho0 defaults to n_train."""
    u: float = Field(default=1.0, ge=1)
    rho0: Optional[float] = Field(None, gt=0)
    rho1: float = Field(default=1.0, gt=0)


class SamplerConfig(_Strict):
    """SA-SGLD settings."""
    sigma2: float = Field(..., gt=0, description="Likelihood variance")
    step_h: float = Field(..., gt=0, description="Constant SGLD step size")
    batch_size: int = Field(..., ge=1)
    iters: int = Field(..., ge=0)
    thin: int = Field(default=1, ge=1, description="Retain every thin-th state")
    flip_fraction: float = Field(default=0.05, ge=0, le=1, description="Fraction of Lambda proposed per iteration")
    init_active: float = Field(default=1.0, ge=0, le=1)
    checkpoint_every: int = Field(default=1000, ge=1)
    likelihood: Likelihood = Field(default=Likelihood.DATA)
    metrics_test_rows: Optional[int] = Field(
        None, ge=1, description="Test rows used for the running test error (all when omitted)"
    )


class EvalConfig(_Strict):
    """Evaluation and depth sweep settings."""
    last_k: int = Field(default=500, ge=1, description="Retained samples evaluated")
    target: EvalTarget = Field(default=EvalTarget.ORACLE)
    oracle_tol: float = Field(default=1e-10, gt=0)
    oracle_max_iter: int = Field(default=100_000, ge=1)
    contraction_horizon: int = Field(default=200, ge=2)
    depth_rule_c: float = Field(default=1.0, gt=0)
    depths: List[int] = Field(default_factory=lambda: [1, 5, 10, 20], min_length=1)


class ExperimentConfig(_Strict):
    """Complete experiment description."""
    name: str = Field(..., min_length=1)
    seed: int = Field(default=0, ge=0, lt=2 ** 64)
    data: DataConfig
    model: ModelConfig
    prior: PriorConfig = Field(default_factory=PriorConfig)
    sampler: SamplerConfig
    eval: EvalConfig = Field(default_factory=EvalConfig)
    output_dir: str = Field(default="runs")

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        try:
            dims = layer_dims(self.model.specs(), self.data.d_x)
        except (DimensionError, ConfigValidationError) as e:
            raise ValueError(f"model.layers: {e.message}") from e
        if dims[-1] != self.data.d_x:
            raise ValueError(f"model.layers: H_W must end at d_x={self.data.d_x}, ends at {dims[-1]}")
        if self.model.baseline_layers is not None:
            try:
                base = layer_dims(self.model.baseline_specs(), self.data.d_y)
            except (DimensionError, ConfigValidationError) as e:
                raise ValueError(f"model.baseline_layers: {e.message}") from e
            if base[-1] != self.data.d_x:
                raise ValueError(f"model.baseline_layers: must end at d_x={self.data.d_x}, ends at {base[-1]}")
        if self.model.x0 is not None and len(self.model.x0) != self.data.d_x:
            raise ValueError(f"model.x0 must have d_x={self.data.d_x} entries")
        if self.sampler.likelihood == Likelihood.DATA and self.sampler.batch_size > self.data.n_train:
            raise ValueError(f"sampler.batch_size {self.sampler.batch_size} exceeds data.n_train {self.data.n_train}")
        return self

    def rho0(self) -> float:
        """Spike precision, n_train when not set."""
        return float(self.prior.rho0 if self.prior.rho0 is not None else self.data.n_train)

    def with_seed(self, seed: Optional[int]) -> "ExperimentConfig":
        """Copy under another seed, revalidated (None keeps this config)."""
        if seed is None:
            return self
        return validate_config({**self.model_dump(mode="json"), "seed": seed})

    def with_depth(self, depth: int) -> "ExperimentConfig":
        """Copy with another unrolling depth, revalidated."""
        raw = self.model_dump(mode="json")
        raw["model"]["depth_unroll"] = depth
        return validate_config(raw)


# ============= Loading and hashing =============

def _first_error(e: ValidationError) -> Tuple[str, str]:
    err = e.errors()[0]
    loc = ".".join(str(p) for p in err.get("loc", ()))
    return loc, err.get("msg", str(e))


def validate_config(data: Dict[str, Any]) -> ExperimentConfig:
    """
    Validate a raw config dict.

    Raises:
        ConfigValidationError: Naming the first offending field
    """
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        loc, msg = _first_error(e)
        raise ConfigValidationError(
            f"invalid config field '{loc or '<root>'}': {msg}",
            {"field": loc, "errors": len(e.errors())},
        ) from e


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a UTF-8 JSON config file."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigValidationError(f"cannot read config {path}: {e}", {"path": str(path)}) from e
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"config {path} is not valid JSON: {e}", {"path": str(path)}) from e
    if not isinstance(raw, dict):
        raise ConfigValidationError(f"config {path} must hold a JSON object")
    return validate_config(raw)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(cfg: ExperimentConfig, scope: Literal["full", "run", "data"] = "full") -> str:
    """
    sha256 of the canonical JSON of (part of) a config.

    ``data`` covers the seed and data block (what the dataset depends on);
    ``run`` adds model, prior and sampler (what a chain depends on);
    ``full`` is the whole config.
    """
    dumped = cfg.model_dump(mode="json")
    if scope == "data":
        dumped = {"seed": dumped["seed"], "data": dumped["data"]}
    elif scope == "run":
        dumped = {k: dumped[k] for k in ("seed", "data", "model", "prior", "sampler")}
    return hashlib.sha256(canonical_json(dumped).encode("utf-8")).hexdigest()


# ============= Presets =============

def _separable_prox_layers(d: int) -> List[Dict[str, Any]]:
    return [
        {"kind": "separable", "coords": d, "in_per_coord": 1, "out_per_coord": 2, "bias": True},
        {"kind": "relu"},
        {"kind": "separable", "coords": d, "in_per_coord": 2, "out_per_coord": 1, "bias": True},
    ]


def _conv_stack(size: int) -> List[Dict[str, Any]]:
    conv = {"kind": "conv2d", "height": size, "width": size}
    return [
        {**conv, "kernel_size": 3, "filters": 32, "channels": 1},
        {"kind": "layernorm"},
        {"kind": "relu"},
        {**conv, "kernel_size": 3, "filters": 64, "channels": 32},
        {"kind": "layernorm"},
        {"kind": "relu"},
        {**conv, "kernel_size": 1, "filters": 1, "channels": 64},
    ]


PRESETS: Dict[str, Dict[str, Any]] = {
    "en100": {
        "name": "en100",
        "seed": 0,
        "data": {
            "kind": "elastic_net", "n_train": 200, "n_test": 1000, "d_x": 100, "d_y": 100,
            "v2": 0.001, "lambda1": 1.0, "lambda2": 1.0,
        },
        "model": {
            "layers": _separable_prox_layers(100),
            "depth_unroll": 10,
            "gamma_mode": "auto_multiplier",
            "gamma_multiplier": 2.0,
        },
        "prior": {"u": 1.0, "rho1": 1.0},
        "sampler": {
            "sigma2": 1e-6, "step_h": 2e-6, "batch_size": 100, "iters": 10_000, "thin": 20,
            "flip_fraction": 0.05, "checkpoint_every": 1000,
        },
        "eval": {"last_k": 500, "target": "oracle", "depths": [1, 5, 10, 20]},
    },
    "deblur16": {
        "name": "deblur16",
        "seed": 0,
        "data": {
            "kind": "block_images", "n_train": 500, "n_test": 500, "d_x": 256, "d_y": 256,
            "v2": 0.01, "lambda1": 1.0, "lambda2": 1.0,
            "blur": True, "blur_variance": 3.0, "image_height": 16, "image_width": 16,
        },
        "model": {"layers": _conv_stack(16), "depth_unroll": 4},
        "prior": {"u": 8000.0, "rho1": 1.0},
        "sampler": {
            "sigma2": 0.01, "step_h": 2e-8, "batch_size": 50, "iters": 10_000, "thin": 5,
            "flip_fraction": 0.01, "checkpoint_every": 1000, "metrics_test_rows": 50,
        },
        "eval": {"last_k": 2000, "target": "truth", "depths": [2, 4, 12, 24]},
    },
    "deblur16-smoke": {
        "name": "deblur16-smoke",
        "seed": 0,
        "data": {
            "kind": "block_images", "n_train": 100, "n_test": 100, "d_x": 256, "d_y": 256,
            "v2": 0.01, "lambda1": 1.0, "lambda2": 1.0,
            "blur": True, "blur_variance": 3.0, "image_height": 16, "image_width": 16,
        },
        "model": {
            "layers": [
                {"kind": "dense", "out_dim": 256, "bias": True},
                {"kind": "relu"},
                {"kind": "dense", "out_dim": 256, "bias": True},
            ],
            "depth_unroll": 4,
        },
        "prior": {"u": 1.0, "rho1": 1.0},
        "sampler": {
            "sigma2": 0.01, "step_h": 1e-7, "batch_size": 50, "iters": 2000, "thin": 10,
            "flip_fraction": 0.0, "checkpoint_every": 500,
        },
        "eval": {"last_k": 50, "target": "truth", "depths": [1, 2, 4, 8]},
    },
    "prior-calibration": {
        "name": "prior-calibration",
        "seed": 0,
        "data": {"kind": "elastic_net", "n_train": 1, "n_test": 1, "d_x": 3, "d_y": 3, "v2": 1.0},
        "model": {
            "layers": [
                {"kind": "dense", "out_dim": 6, "bias": True},
                {"kind": "relu"},
                {"kind": "dense", "out_dim": 3, "bias": True},
            ],
            "depth_unroll": 1,
        },
        "prior": {"u": 1.0, "rho0": 64.0, "rho1": 1.0},
        "sampler": {
            "sigma2": 1.0, "step_h": 1e-4, "batch_size": 1, "iters": 200_000, "thin": 100,
            "flip_fraction": 1.0, "likelihood": "none", "checkpoint_every": 50_000,
        },
        "eval": {"last_k": 2000, "target": "truth", "depths": [1]},
    },
}


def get_preset(name: str) -> ExperimentConfig:
    """Validated copy of a named preset."""
    raw = PRESETS.get(name)
    if raw is None:
        raise ConfigValidationError(
            f"unknown preset '{name}'", {"field": "preset", "available": sorted(PRESETS)}
        )
    return validate_config(json.loads(json.dumps(raw)))
