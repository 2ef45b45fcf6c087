"""Two-layer HMM situation recognition and Monte-Carlo scene prediction for ramp merging."""

from . import baselines, gmm, hmm, scenario, scene, tlhmm
from ._stats import COV_FLOOR, EmConfig, FitReport

__version__ = "0.1.0"

__all__ = [
    "COV_FLOOR",
    "EmConfig",
    "FitReport",
    "baselines",
    "gmm",
    "hmm",
    "scenario",
    "scene",
    "tlhmm",
]
