"""Zero-shot Bayesian fusion of gridded and scattered observations with a score-based prior."""

__version__ = "0.1.0"

from .fields import Grid, NormStats, StateTensor, load_field, save_field
from .guidance import GuidanceConfig, GuidanceTerm, clip_gradient, fuse_scores, likelihood_score
from .measure import CoarsenOp, IdentityOp, PointOp, PointSet, coarsen, sample_points
from .sampler import (
    EnsembleResult,
    SamplerConfig,
    build_time_grid,
    generate_ensemble,
    heun_step,
    posterior_sample,
)

__all__ = [
    "CoarsenOp", "EnsembleResult", "Grid", "GuidanceConfig", "GuidanceTerm", "IdentityOp", "NormStats",
    "PointOp", "PointSet", "SamplerConfig", "StateTensor", "build_time_grid", "clip_gradient", "coarsen",
    "fuse_scores", "generate_ensemble", "heun_step", "likelihood_score", "load_field", "posterior_sample",
    "sample_points", "save_field",
]
