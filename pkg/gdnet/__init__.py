"""
gdnet - unrolled proximal-gradient networks for linear inverse problems,
trained by sparse Bayesian sampling.
"""

__version__ = "0.1.0"

from .errors import (
    ArtifactError,
    ConfigValidationError,
    ConvergenceError,
    DimensionError,
    DivergenceError,
    GdnError,
    ProvenanceError,
    StaleTapeError,
)
from .forward_model import GaussianLinearModel, default_step
from .regularizer import ElasticNet, OrthoRegularizer
from .pgd_oracle import depth_rule, estimate_contraction, solve_g
from .fnn import FnnParams, LayerSpec, Mask, build_exact_prox_net, fnn_backward, fnn_forward
from .gdn import FnnBaseline, GdnModel, gdn_backward, gdn_forward
from .sampler import ChainState, PosteriorSpec, SpikeSlabPrior, run_chain, sasgld_step
from .datagen import Dataset, generate_block_images, generate_dataset

__all__ = [
    "__version__",
    "ArtifactError",
    "ConfigValidationError",
    "ConvergenceError",
    "DimensionError",
    "DivergenceError",
    "GdnError",
    "ProvenanceError",
    "StaleTapeError",
    "GaussianLinearModel",
    "default_step",
    "ElasticNet",
    "OrthoRegularizer",
    "depth_rule",
    "estimate_contraction",
    "solve_g",
    "FnnParams",
    "LayerSpec",
    "Mask",
    "build_exact_prox_net",
    "fnn_backward",
    "fnn_forward",
    "FnnBaseline",
    "GdnModel",
    "gdn_backward",
    "gdn_forward",
    "ChainState",
    "PosteriorSpec",
    "SpikeSlabPrior",
    "run_chain",
    "sasgld_step",
    "Dataset",
    "generate_block_images",
    "generate_dataset",
]
