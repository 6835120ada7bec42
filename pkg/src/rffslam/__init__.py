"""Continuous-time trajectory estimation and mapping with random Fourier
feature Gaussian processes."""

__version__ = "0.1.0"

from .errors import (
    DegenerateGeometry,
    InvalidArgument,
    NumericalFailure,
    ParseError,
    RffSlamError,
    ValidationError,
)
from .features import FeatureBasis, approx_kernel, feature_map, rbf_kernel, sample_frequencies
from .observation import Landmark2D, Measurement, Pose2D, Trajectory, observe, observe_jacobian, wrap_angle
from .estimator import (
    PoseAnchor,
    RffSlam,
    SolverConfig,
    StateBases,
    WeightState,
    assemble_system,
    heading_from_motion,
    interpolate_state,
    lm_solve,
    make_objective,
    objective,
    update_state,
)
from .priors import MotionPrior, OdometryControl, SplinePrior, SplinePriorConfig, motion_prior, spline_prior
from .metrics import EvalReport, Pose3D, ape, evaluate, lift_to_se3, rpe
from .sim import Scenario, ScenarioConfig, simulate
from .dataio import Dataset, load_dataset, save_dataset, save_results
from .pipeline import RunOptions, RunResult, run_estimation

__all__ = [name for name in dir() if not name.startswith("_")]
