"""shotmeta: from-scratch gradient-based meta-learning (MAML, FoMAML, ANIL, BOIL) with
a penalty that keeps a one-step adaptation close to a multi-step one, suppressing the
effect of curvature along the inner optimization trajectory."""

from __future__ import annotations

from .config import ExperimentConfig, build_config, load_config
from .engine import InnerConfig, MetaState, ShotConfig, evaluate, inner_adapt
from .errors import (
    ConfigError,
    GraphError,
    InnerLoopError,
    NonFiniteError,
    ShapeError,
    ShotMetaError,
    TaskError,
)
from .experiment import run_experiment
from .models import InnerMask, init_linear, init_model, init_projector
from .params import ParamVector
from .tasks import PoolSpec, make_pool, sample_episode
from .tensor import Tensor, backward, grad

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ExperimentConfig", "GraphError", "InnerConfig", "InnerLoopError",
    "InnerMask", "MetaState", "NonFiniteError", "ParamVector", "PoolSpec", "ShapeError",
    "ShotConfig", "ShotMetaError", "TaskError", "Tensor", "backward", "build_config",
    "evaluate", "grad", "init_linear", "init_model", "init_projector", "inner_adapt",
    "load_config", "make_pool", "run_experiment", "sample_episode",
]
