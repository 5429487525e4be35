"""
Schemas package - experiment configuration contracts.
"""
from .contracts import (
    PRESETS,
    BlockImageConfig,
    DataConfig,
    DataKind,
    EvalConfig,
    EvalTarget,
    ExperimentConfig,
    GammaMode,
    Likelihood,
    ModelConfig,
    PriorConfig,
    SamplerConfig,
    config_hash,
    get_preset,
    load_config,
    validate_config,
)

__all__ = [
    "PRESETS",
    "BlockImageConfig",
    "DataConfig",
    "DataKind",
    "EvalConfig",
    "EvalTarget",
    "ExperimentConfig",
    "GammaMode",
    "Likelihood",
    "ModelConfig",
    "PriorConfig",
    "SamplerConfig",
    "config_hash",
    "get_preset",
    "load_config",
    "validate_config",
]
