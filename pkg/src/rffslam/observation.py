"""2D poses, landmarks, and the range/bearing measurement model."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateGeometry, InvalidArgument

RANGE = "range"
BEARING = "bearing"
RANGE_BEARING = "range_bearing"
KINDS = (RANGE, BEARING, RANGE_BEARING)

# Rows of the full [range, bearing] observation selected by each kind.
KIND_ROWS = {RANGE: (0,), BEARING: (1,), RANGE_BEARING: (0, 1)}

MIN_RANGE = 1e-9


def wrap_angle(theta):
    """Map angles onto (-pi, pi]. Accepts scalars or arrays."""
    arr = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument("cannot wrap a non-finite angle")
    out = np.pi - np.mod(np.pi - arr, 2.0 * np.pi)
    out = np.where(out <= -np.pi, np.pi, out)
    # angles already in range pass through untouched
    out = np.where((arr > -np.pi) & (arr <= np.pi), arr, out)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidArgument("pose coordinates must be finite")
        object.__setattr__(self, "alpha", wrap_angle(self.alpha))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.alpha])

    @classmethod
    def from_array(cls, a) -> "Pose2D":
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class Landmark2D:
    id: int
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidArgument(f"landmark {self.id} has non-finite coordinates")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(eq=False)
class Measurement:
    """One timestamped observation of a landmark.

    ``value`` and ``noise_cov`` follow the row order [range, bearing]
    restricted to ``kind``.
    """

    time: float
    landmark_id: int
    kind: str
    value: np.ndarray
    noise_cov: np.ndarray
    weight: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgument(f"unknown measurement kind {self.kind!r}")
        dim = len(KIND_ROWS[self.kind])
        value = np.atleast_1d(np.asarray(self.value, dtype=float))
        cov = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        if value.shape != (dim,):
            raise InvalidArgument(f"{self.kind} measurement needs {dim} value(s), got {value.shape}")
        if cov.shape != (dim, dim):
            raise InvalidArgument(f"noise_cov must be {dim}x{dim}, got {cov.shape}")
        if not np.allclose(cov, cov.T) or np.any(np.linalg.eigvalsh(cov) <= 0):
            raise InvalidArgument(f"noise_cov of measurement at t={self.time} is not SPD")
        if self.kind != RANGE:
            value[-1] = wrap_angle(value[-1])
        self.value = value
        self.noise_cov = cov
        self.time = float(self.time)
        self.landmark_id = int(self.landmark_id)

    @property
    def sigmas(self) -> np.ndarray:
        return np.sqrt(np.diag(self.noise_cov))

    def full_rows(self):
        """Values, mask and information matrix padded to the [range, bearing] layout."""
        rows = KIND_ROWS[self.kind]
        value = np.zeros(2)
        mask = np.zeros(2, dtype=bool)
        info = np.zeros((2, 2))
        value[list(rows)] = self.value
        mask[list(rows)] = True
        info[np.ix_(rows, rows)] = np.linalg.inv(self.noise_cov)
        return value, mask, info


@dataclass(eq=False)
class Trajectory:
    """Timestamped poses; ``poses`` columns are (x, y, alpha)."""

    times: np.ndarray
    poses: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.poses = np.asarray(self.poses, dtype=float).reshape(-1, 3)
        if len(self.times) != len(self.poses):
            raise InvalidArgument(f"{len(self.times)} times but {len(self.poses)} poses")

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i) -> Pose2D:
        return Pose2D.from_array(self.poses[i])

    @property
    def xy(self) -> np.ndarray:
        return self.poses[:, :2]

    @property
    def headings(self) -> np.ndarray:
        return self.poses[:, 2]

    def copy(self) -> "Trajectory":
        return Trajectory(self.times.copy(), self.poses.copy(), dict(self.meta))


def observe_batch(poses, landmarks) -> np.ndarray:
    """Full [range, bearing] rows for paired arrays poses (N, 3), landmarks (N, 2)."""
    poses = np.atleast_2d(poses)
    landmarks = np.atleast_2d(landmarks)
    dx = landmarks[:, 0] - poses[:, 0]
    dy = landmarks[:, 1] - poses[:, 1]
    r = np.hypot(dx, dy)
    if np.any(r < MIN_RANGE):
        raise DegenerateGeometry("pose coincides with landmark; bearing is undefined")
    bearing = wrap_angle(np.arctan2(dy, dx) - poses[:, 2])
    return np.column_stack([r, np.atleast_1d(bearing)])


def jacobian_batch(poses, landmarks) -> np.ndarray:
    """(N, 2, 5) Jacobians of [range, bearing] w.r.t. (x, y, alpha, x_j, y_j)."""
    poses = np.atleast_2d(poses)
    landmarks = np.atleast_2d(landmarks)
    dx = landmarks[:, 0] - poses[:, 0]
    dy = landmarks[:, 1] - poses[:, 1]
    r2 = dx * dx + dy * dy
    r = np.sqrt(r2)
    if np.any(r < MIN_RANGE):
        raise DegenerateGeometry("pose coincides with landmark; Jacobian is undefined")
    J = np.zeros((len(r), 2, 5))
    J[:, 0, 0] = -dx / r
    J[:, 0, 1] = -dy / r
    J[:, 0, 3] = dx / r
    J[:, 0, 4] = dy / r
    J[:, 1, 0] = dy / r2
    J[:, 1, 1] = -dx / r2
    J[:, 1, 2] = -1.0
    J[:, 1, 3] = -dy / r2
    J[:, 1, 4] = dx / r2
    return J


def _check_kind(kind):
    if kind not in KINDS:
        raise InvalidArgument(f"unknown measurement kind {kind!r}")
    return list(KIND_ROWS[kind])


def observe(pose: Pose2D, landmark: Landmark2D, kind: str = RANGE_BEARING) -> np.ndarray:
    rows = _check_kind(kind)
    return observe_batch(pose.as_array()[None], landmark.as_array()[None])[0, rows]


def observe_jacobian(pose: Pose2D, landmark: Landmark2D, kind: str = RANGE_BEARING) -> np.ndarray:
    rows = _check_kind(kind)
    return jacobian_batch(pose.as_array()[None], landmark.as_array()[None])[0, rows]


def select_kind(measurements: Sequence[Measurement], kind: str) -> list[Measurement]:
    """Restrict measurements to the rows of ``kind``, dropping those lacking them."""
    want = _check_kind(kind)
    out = []
    for m in measurements:
        have = KIND_ROWS[m.kind]
        if not set(want) <= set(have):
            continue
        idx = [have.index(r) for r in want]
        out.append(
            Measurement(
                m.time, m.landmark_id, kind, m.value[idx], m.noise_cov[np.ix_(idx, idx)], m.weight
            )
        )
    return out
