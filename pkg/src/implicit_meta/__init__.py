"""Implicit meta-learning of L2 regularizers with IFT hypergradients."""

from .hypergrad import ApproxSpec, hypergradient
from .metaopt import MetaConfig, MlpProblem, QuadraticToy, RunMetrics, run
from .model import HyperMode, HyperSet, MlpParams

__version__ = "0.1.0"

__all__ = [
    "ApproxSpec",
    "HyperMode",
    "HyperSet",
    "MetaConfig",
    "MlpParams",
    "MlpProblem",
    "QuadraticToy",
    "RunMetrics",
    "hypergradient",
    "run",
]
