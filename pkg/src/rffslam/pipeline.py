"""Dataset-level estimation runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset
from .errors import ValidationError
from .estimator import RffSlam, SolverConfig, heading_from_motion
from .metrics import EvalReport, evaluate, relative_errors
from .observation import KIND_ROWS, Pose2D, Trajectory, select_kind
from .priors import MotionPrior, SplinePrior, SplinePriorConfig
from .sim import Scenario

log = logging.getLogger(__name__)

PRIORS = ("motion", "spline")


@dataclass
class RunOptions:
    solver: SolverConfig = field(default_factory=SolverConfig)
    prior: str = "spline"
    kind: str | None = None
    batch_size: int = 5
    spline: SplinePriorConfig = field(default_factory=SplinePriorConfig)

    def __post_init__(self):
        if self.prior not in PRIORS:
            raise ValidationError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")


@dataclass(eq=False)
class RunResult:
    trajectory: Trajectory
    landmarks: list
    estimator: RffSlam
    evaluation: EvalReport | None = None
    relative: dict | None = None

    @property
    def final_objective(self) -> float:
        return self.estimator.reports[-1].final_objective if self.estimator.reports else 0.0

    def convergence_log(self) -> list:
        return [dict(batch=i, **r.to_dict()) for i, r in enumerate(self.estimator.reports)]


def scenario_dataset(scenario: Scenario) -> Dataset:
    meta = {"scenario_seed": str(scenario.config.seed), "generator": "rffslam.sim"}
    return Dataset(
        measurements=list(scenario.measurements),
        ground_truth=scenario.ground_truth,
        odometry=list(scenario.odometry),
        landmarks=list(scenario.landmarks),
        metadata=meta,
    )


def _initial_pose(dataset: Dataset, t0: float) -> Pose2D:
    gt = dataset.ground_truth
    if gt is None or len(gt) == 0:
        return Pose2D(0.0, 0.0, 0.0)
    heading = np.unwrap(gt.headings)
    pose = [np.interp(t0, gt.times, gt.poses[:, 0]), np.interp(t0, gt.times, gt.poses[:, 1]), np.interp(t0, gt.times, heading)]
    return Pose2D.from_array(pose)


def output_times(dataset: Dataset, measurements) -> np.ndarray:
    """Ground-truth times inside the measured span, else the measurement times."""
    mt = np.unique([m.time for m in measurements])
    gt = dataset.ground_truth
    if gt is not None and len(gt) and len(mt):
        inside = gt.times[(gt.times >= mt[0]) & (gt.times <= mt[-1])]
        if len(inside):
            return inside
    return mt


def run_estimation(dataset: Dataset, options: RunOptions = RunOptions()) -> RunResult:
    measurements = dataset.measurements
    if options.kind is not None:
        measurements = select_kind(measurements, options.kind)
    if not measurements:
        raise ValidationError("dataset has no usable measurements")
    t0 = dataset.initial_time
    pose0 = _initial_pose(dataset, t0)
    if options.prior == "motion":
        if not dataset.odometry:
            raise ValidationError("the motion prior needs odometry, but the dataset has none")
        prior = MotionPrior(dataset.odometry, pose0, t0)
    else:
        prior = SplinePrior(pose0, t0, options.spline)

    slam = RffSlam(options.solver, prior, time_origin=t0, landmark_priors=dataset.landmark_priors, initial_pose=pose0)
    slam.incremental_update(measurements, options.batch_size)
    slam.flush()
    if slam.pending:
        log.warning("%d measurements of uninitialized landmarks were never used", len(slam.pending))

    traj = slam.trajectory(output_times(dataset, measurements))
    has_bearing = any(1 in KIND_ROWS[m.kind] for m in measurements)
    if not has_bearing and len(traj) >= 2:
        traj = heading_from_motion(traj)
    result = RunResult(traj, slam.landmarks(), slam)
    if dataset.ground_truth is not None:
        result.evaluation = evaluate(traj, dataset.ground_truth)
        result.relative = relative_errors(traj, dataset.ground_truth, result.landmarks, dataset.landmarks or None)
        result.evaluation.extra["final_objective"] = result.final_objective
        result.evaluation.extra["relative_errors"] = result.relative
    return result
