"""
Shared pytest fixtures: seeded generators and a tiny experiment config.
"""
import copy

import pytest

from gdnet.numerics import make_rng
from gdnet.schemas import validate_config


@pytest.fixture
def rng():
    return make_rng(12345)


TINY_CONFIG = {
    "name": "tiny",
    "seed": 3,
    "data": {"kind": "elastic_net", "n_train": 20, "n_test": 10, "d_x": 4, "d_y": 6, "v2": 0.1},
    "model": {
        "layers": [
            {"kind": "dense", "out_dim": 8, "bias": True},
            {"kind": "relu"},
            {"kind": "dense", "out_dim": 4},
        ],
        "depth_unroll": 3,
    },
    "prior": {"u": 1.0},
    "sampler": {
        "sigma2": 0.1, "step_h": 1e-5, "batch_size": 5, "iters": 30, "thin": 5,
        "flip_fraction": 0.1, "checkpoint_every": 10,
    },
    "eval": {"last_k": 4, "target": "oracle", "depths": [1, 2], "contraction_horizon": 50},
}


@pytest.fixture
def tiny_raw():
    """Raw dict of a config small enough to train in well under a second."""
    return copy.deepcopy(TINY_CONFIG)


@pytest.fixture
def tiny_cfg(tiny_raw):
    return validate_config(tiny_raw)
