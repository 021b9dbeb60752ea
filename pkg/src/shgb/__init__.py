"""Surface hopping Gaussian beams for weakly coupled semiclassical systems.

Quick start::

    from shgb import SurfaceHoppingGaussianBeam
    est = SurfaceHoppingGaussianBeam("ex1", epsilon=0.1, n_traj=20000).fit()
    est.field_.surface(0)        # grid estimate of the first component
"""

__version__ = "0.1.0"

from .beam import FieldGrid, GaussianBeam, accumulate_beam, accumulate_beams, beam_l2_norm, eval_beam
from .dynamics import IntegrationError, default_dt, rk3_step
from .estimator import (
    ErrorReport,
    EstimatorConfig,
    SurfaceHoppingGaussianBeam,
    convergence_study,
    estimate,
    l2_error,
    relative_l2_error,
)
from .hopping import InitialSampler, TrajectoryError, default_sampler, initial_field, run_trajectory
from .problems import CoefficientBundle, ExtendedIndex, as_doubled, get_problem
from .refsolver import ReferenceSolver, reference_solve

__all__ = [
    "__version__",
    "FieldGrid",
    "GaussianBeam",
    "accumulate_beam",
    "accumulate_beams",
    "beam_l2_norm",
    "eval_beam",
    "IntegrationError",
    "default_dt",
    "rk3_step",
    "ErrorReport",
    "EstimatorConfig",
    "SurfaceHoppingGaussianBeam",
    "convergence_study",
    "estimate",
    "l2_error",
    "relative_l2_error",
    "InitialSampler",
    "TrajectoryError",
    "default_sampler",
    "initial_field",
    "run_trajectory",
    "CoefficientBundle",
    "ExtendedIndex",
    "as_doubled",
    "get_problem",
    "ReferenceSolver",
    "reference_solve",
]
