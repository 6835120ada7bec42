"""Synthetic 2D scenarios: random smooth trajectories, landmark fields and
noisy range/bearing streams.

Trajectories are generated by a seeded random walk of waypoints inside a
square box, joined by a chord-length parameterized cubic spline and
traversed at constant speed. Headings are the chord directions between
consecutive samples, so Euler integration of the generated odometry
reproduces the sampled poses exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InvalidArgument
from .estimator import heading_from_motion
from .observation import KIND_ROWS, KINDS, Landmark2D, Measurement, Trajectory, observe_batch, wrap_angle
from .priors import OdometryControl

# Noise std used for R_i when the simulated noise is zero (R must be invertible).
NOISE_FLOOR = 1e-3
# waypoint turn distribution; the clip keeps the path smooth at the default lengthscale
TURN_STD = math.radians(30.0)
MAX_TURN = math.radians(60.0)


@dataclass
class ScenarioConfig:
    seed: int = 0
    num_landmarks: int = 20
    duration: float = 10.0
    cadence: float = 0.1
    range_noise_std: float = 2.0
    bearing_noise_std: float = math.radians(3.0)
    measurement_kind: str = "range_bearing"
    sensor_max_range: float | None = None
    box_size: float = 100.0
    max_speed: float = 2.0
    waypoint_step: float = 8.0
    landmark_margin: float = 20.0
    odometry_v_std: float = 0.0
    odometry_w_std: float = 0.0

    def __post_init__(self):
        if self.num_landmarks < 1:
            raise InvalidArgument("num_landmarks must be >= 1")
        for name in ("range_noise_std", "bearing_noise_std", "odometry_v_std", "odometry_w_std"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidArgument(f"{name} must be a finite value >= 0, got {value}")
        for name in ("duration", "cadence", "box_size", "max_speed", "waypoint_step"):
            if not getattr(self, name) > 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.landmark_margin < 0:
            raise InvalidArgument("landmark_margin must be >= 0")
        if self.measurement_kind not in KINDS:
            raise InvalidArgument(f"unknown measurement kind {self.measurement_kind!r}")
        if self.sensor_max_range is not None and not self.sensor_max_range > 0:
            raise InvalidArgument("sensor_max_range must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        return cls(**data)


@dataclass(eq=False)
class Scenario:
    config: ScenarioConfig
    ground_truth: Trajectory
    landmarks: list
    measurements: list
    odometry: list
    metadata: dict = field(default_factory=dict)


def _rng(seed: int, stream: int) -> np.random.Generator:
    # independent streams so changing e.g. the noise never alters the trajectory
    return np.random.default_rng([int(seed), stream])


def generate_trajectory(
    seed: int,
    duration: float,
    cadence: float,
    box_size: float = 100.0,
    max_speed: float = 2.0,
    waypoint_step: float = 8.0,
) -> Trajectory:
    if not duration > 0 or not cadence > 0:
        raise InvalidArgument("duration and cadence must be positive")
    rng = _rng(seed, 0)
    half = box_size / 2.0
    inner = half - min(waypoint_step, 0.25 * box_size)
    speed = rng.uniform(0.5, 1.0) * max_speed
    length = speed * duration
    n_way = int(math.ceil(length / waypoint_step)) + 3
    times = np.arange(int(round(duration / cadence)) + 1) * cadence

    for _ in range(1000):
        pts = [rng.uniform(-inner, inner, size=2)]
        heading = rng.uniform(-math.pi, math.pi)
        while len(pts) < n_way:
            heading += np.clip(rng.normal(0.0, TURN_STD), -MAX_TURN, MAX_TURN)
            nxt = pts[-1] + waypoint_step * np.array([math.cos(heading), math.sin(heading)])
            if not np.all(np.abs(nxt) <= inner):
                # steer toward the box center by at most MAX_TURN
                to_center = math.atan2(-pts[-1][1], -pts[-1][0])
                heading += np.clip(wrap_angle(to_center - heading), -MAX_TURN, MAX_TURN)
                nxt = pts[-1] + waypoint_step * np.array([math.cos(heading), math.sin(heading)])
                if not np.all(np.abs(nxt) <= inner):
                    continue
            pts.append(nxt)
        pts = np.array(pts)
        chord = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        # natural ends avoid the hooks not-a-knot can put at the first segment
        curve = CubicSpline(chord, pts, axis=0, bc_type="natural")
        # arc length of the spline on a fine grid, then constant-speed traversal
        fine = np.linspace(0.0, chord[-1], 20 * len(chord) * 50)
        seg = np.linalg.norm(np.diff(curve(fine), axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        if arc[-1] < length:
            continue
        u = np.interp(speed * times, arc, fine)
        xy = curve(u)
        if np.all(np.abs(xy) <= half):
            traj = heading_from_motion(Trajectory(times, np.column_stack([xy, np.zeros(len(xy))])))
            traj.meta.update({"seed": seed, "speed": speed, "box_size": box_size})
            return traj
    raise InvalidArgument("could not generate a trajectory inside the box")


def generate_landmarks(seed: int, num_landmarks: int, trajectory: Trajectory, box_size: float, margin: float) -> list:
    """Uniform landmarks over the trajectory's bounding box grown by ``margin``."""
    rng = _rng(seed, 1)
    half = box_size / 2.0
    lo = np.maximum(trajectory.xy.min(axis=0) - margin, -half)
    hi = np.minimum(trajectory.xy.max(axis=0) + margin, half)
    out = []
    while len(out) < num_landmarks:
        p = rng.uniform(lo, hi)
        # keep landmarks off the path so every range is well defined
        if np.min(np.linalg.norm(trajectory.xy - p, axis=1)) < 0.5:
            continue
        out.append(Landmark2D(len(out), float(p[0]), float(p[1])))
    return out


def generate_measurements(trajectory: Trajectory, landmarks, config: ScenarioConfig) -> tuple:
    """Noisy observations of every visible landmark at every trajectory time.

    Returns ``(measurements, times_without_measurements)``.
    """
    rng = _rng(config.seed, 2)
    rows = list(KIND_ROWS[config.measurement_kind])
    stds = np.array([config.range_noise_std, config.bearing_noise_std])
    cov = np.diag(np.maximum(stds, NOISE_FLOOR)[rows] ** 2)
    L = np.array([lm.as_array() for lm in landmarks])
    out, silent = [], []
    for t, pose in zip(trajectory.times, trajectory.poses):
        h = observe_batch(np.tile(pose, (len(L), 1)), L)
        visible = np.ones(len(L), dtype=bool)
        if config.sensor_max_range is not None:
            visible = h[:, 0] <= config.sensor_max_range
        if not np.any(visible):
            silent.append(float(t))
            continue
        noise = rng.standard_normal((len(L), 2)) * stds
        z = h + noise
        z[:, 1] = wrap_angle(z[:, 1])
        for j in np.flatnonzero(visible):
            out.append(Measurement(float(t), landmarks[j].id, config.measurement_kind, z[j, rows], cov))
    return out, silent


def generate_odometry(trajectory: Trajectory, config: ScenarioConfig) -> list:
    """Unicycle controls; control k drives the step from t_{k-1} to t_k."""
    rng = _rng(config.seed, 3)
    t = trajectory.times
    dt = np.diff(t)
    v = np.linalg.norm(np.diff(trajectory.xy, axis=0), axis=1) / dt
    w = wrap_angle(np.diff(trajectory.headings)) / dt
    v = v + rng.normal(0.0, 1.0, len(v)) * config.odometry_v_std
    w = w + rng.normal(0.0, 1.0, len(w)) * config.odometry_w_std
    return [OdometryControl(float(tk), float(vk), float(wk)) for tk, vk, wk in zip(t[1:], v, w)]


def simulate(config: ScenarioConfig) -> Scenario:
    traj = generate_trajectory(
        config.seed, config.duration, config.cadence, config.box_size, config.max_speed, config.waypoint_step
    )
    landmarks = generate_landmarks(config.seed, config.num_landmarks, traj, config.box_size, config.landmark_margin)
    measurements, silent = generate_measurements(traj, landmarks, config)
    odometry = generate_odometry(traj, config)
    meta = {"times_without_measurements": silent, "num_measurements": len(measurements)}
    return Scenario(config, traj, landmarks, measurements, odometry, meta)
