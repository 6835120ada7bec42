"""Prior-mean models for the trajectory.

Two models are provided:

* :class:`MotionPrior` integrates odometry with a unicycle model,
  predicting each pose one step ahead of the current estimate.
* :class:`SplinePrior` refits weighted cubic smoothing splines (De Boor's
  ``p``-parameterization) to the current estimate.

Both are vectorized callables ``times -> (n, 3)`` whose heading column is
continuous (unwrapped); callers wrap when producing poses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import spsolve

from .errors import InvalidArgument
from .observation import Pose2D, Trajectory, wrap_angle


@dataclass(frozen=True)
class OdometryControl:
    """Velocities driving the motion over the interval that ends at ``time``."""

    time: float
    linear_velocity: float
    angular_velocity: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.time, self.linear_velocity, self.angular_velocity)):
            raise InvalidArgument("odometry values must be finite")


@dataclass(frozen=True)
class SplinePriorConfig:
    smoothing_parameter: float = 0.98
    weight_floor: float = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.smoothing_parameter <= 1.0:
            raise InvalidArgument("smoothing_parameter must lie in [0, 1]")
        if not self.weight_floor > 0:
            raise InvalidArgument("weight_floor must be positive")


def motion_prior(prev_pose: Pose2D, control: OdometryControl, dt: float) -> Pose2D:
    """One Euler step of the unicycle model."""
    if not dt > 0:
        raise InvalidArgument(f"dt must be positive, got {dt}")
    v, w = control.linear_velocity, control.angular_velocity
    return Pose2D(
        prev_pose.x + v * dt * math.cos(prev_pose.alpha),
        prev_pose.y + v * dt * math.sin(prev_pose.alpha),
        prev_pose.alpha + w * dt,
    )


def _integrate(base, v, w, dt):
    """Chain unicycle steps from ``base``; returns the (k, 3) poses after each step."""
    headings = base[2] + np.concatenate([[0.0], np.cumsum(w * dt)])
    step = v * dt
    x = base[0] + np.cumsum(step * np.cos(headings[:-1]))
    y = base[1] + np.cumsum(step * np.sin(headings[:-1]))
    return np.column_stack([x, y, headings[1:]])


class MotionPrior:
    """Odometry-driven prior mean on the grid of control timestamps.

    Before any estimate exists the grid is the dead-reckoned trajectory from
    ``initial_pose``. :meth:`refresh` replaces each grid pose whose predecessor
    has been estimated by the one-step prediction from that estimate.
    Between grid points the mean is interpolated linearly; past the last
    control the last velocities are extrapolated.
    """

    def __init__(self, odometry: Sequence[OdometryControl], initial_pose: Pose2D, initial_time: float):
        controls = sorted((c for c in odometry if c.time > initial_time), key=lambda c: c.time)
        self.initial_pose = initial_pose
        self.times = np.array([initial_time] + [c.time for c in controls])
        if np.any(np.diff(self.times) <= 0):
            raise InvalidArgument("odometry timestamps must be strictly increasing")
        self._v = np.array([c.linear_velocity for c in controls])
        self._w = np.array([c.angular_velocity for c in controls])
        self._dt = np.diff(self.times)
        self.grid = np.vstack(
            [initial_pose.as_array(), _integrate(initial_pose.as_array(), self._v, self._w, self._dt)]
        )

    def refresh(self, estimate_fn: Callable[[np.ndarray], np.ndarray], times, residuals=None) -> None:
        """Re-predict the grid from the estimate over the span of ``times``."""
        n = len(self.times)
        horizon = float(np.max(times)) if len(times) else -np.inf
        if n < 2:
            return
        known = self.times[:-1] <= horizon
        grid = self.grid.copy()
        if np.any(known):
            idx = np.flatnonzero(known)
            est = np.asarray(estimate_fn(self.times[idx]))
            v, w, dt = self._v[idx], self._w[idx], self._dt[idx]
            grid[idx + 1, 0] = est[:, 0] + v * dt * np.cos(est[:, 2])
            grid[idx + 1, 1] = est[:, 1] + v * dt * np.sin(est[:, 2])
            grid[idx + 1, 2] = est[:, 2] + w * dt
            last = idx[-1] + 1
        else:
            last = 0
        if last < n - 1:
            grid[last + 1 :] = _integrate(grid[last], self._v[last:], self._w[last:], self._dt[last:])
        # keep headings continuous so interpolation never crosses the branch cut
        grid[:, 2] = np.unwrap(grid[:, 2])
        self.grid = grid

    def __call__(self, times) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.column_stack([np.interp(t, self.times, self.grid[:, k]) for k in range(3)])
        after = t > self.times[-1]
        if np.any(after) and len(self._v):
            dt = t[after] - self.times[-1]
            end = self.grid[-1]
            v, w = self._v[-1], self._w[-1]
            out[after, 0] = end[0] + v * dt * np.cos(end[2])
            out[after, 1] = end[1] + v * dt * np.sin(end[2])
            out[after, 2] = end[2] + w * dt
        return out


def _weighted_line(t, y, w):
    A = np.column_stack([np.ones_like(t), t]) * np.sqrt(w)[:, None]
    coef, *_ = np.linalg.lstsq(A, y * np.sqrt(w), rcond=None)
    return coef


class SmoothingSpline:
    """Cubic smoothing spline minimizing

        p * sum_i w_i (y_i - s(t_i))**2 + (1 - p) * integral(s''(t)**2 dt)

    solved with Reinsch's banded system. The result is a natural spline and
    is extended linearly outside the data range.
    """

    def __init__(self, t, y, p: float, w=None):
        t = np.asarray(t, dtype=float)
        y = np.asarray(y, dtype=float)
        w = np.ones_like(t) if w is None else np.asarray(w, dtype=float)
        if len(t) < 2 or np.any(np.diff(t) <= 0):
            raise InvalidArgument("smoothing spline needs >= 2 strictly increasing knots")
        if not 0.0 <= p <= 1.0:
            raise InvalidArgument("p must lie in [0, 1]")
        if np.any(w <= 0):
            raise InvalidArgument("weights must be positive")
        self.t = t
        if p == 0.0 or len(t) == 2:
            c0, c1 = _weighted_line(t, y, w)
            values = c0 + c1 * t
        elif p == 1.0:
            values = y.copy()
        else:
            values = self._reinsch(t, y, w, (1.0 - p) / p)
        self.values = values
        self._cs = CubicSpline(t, values, bc_type="natural")
        self._slopes = (self._cs(t[0], 1), self._cs(t[-1], 1))

    @staticmethod
    def _reinsch(t, y, w, alpha):
        h = np.diff(t)
        n = len(t)
        m = n - 2
        cols = np.arange(m)
        Q = sparse.csc_matrix(
            (
                np.concatenate([1.0 / h[:-1], -1.0 / h[:-1] - 1.0 / h[1:], 1.0 / h[1:]]),
                (np.concatenate([cols, cols + 1, cols + 2]), np.concatenate([cols, cols, cols])),
            ),
            shape=(n, m),
        )
        R = sparse.diags(
            [h[1:-1] / 6.0, (h[:-1] + h[1:]) / 3.0, h[1:-1] / 6.0], [-1, 0, 1], shape=(m, m)
        )
        Winv = sparse.diags(1.0 / w)
        gamma = spsolve(sparse.csc_matrix(R + alpha * (Q.T @ Winv @ Q)), Q.T @ y)
        return y - alpha * (Winv @ (Q @ np.atleast_1d(gamma)))

    def __call__(self, x, nu: int = 0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.asarray(self._cs(x, nu), dtype=float)
        lo, hi = x < self.t[0], x > self.t[-1]
        if np.any(lo) or np.any(hi):
            out = np.array(out, copy=True)
            if nu == 0:
                out[lo] = self.values[0] + self._slopes[0] * (x[lo] - self.t[0])
                out[hi] = self.values[-1] + self._slopes[1] * (x[hi] - self.t[-1])
            elif nu == 1:
                out[lo], out[hi] = self._slopes[0], self._slopes[1]
            else:
                out[lo] = out[hi] = 0.0
        return out


def residual_weights(residuals, weight_floor: float) -> np.ndarray:
    """Weights inversely proportional to the data-fit error, normalized to mean 1."""
    r = np.asarray(residuals, dtype=float)
    if np.any(r < 0) or not np.all(np.isfinite(r)):
        raise InvalidArgument("residuals must be finite and non-negative")
    w = 1.0 / np.maximum(r, weight_floor)
    return w / w.mean()


class SmoothedTrajectory:
    """Per-coordinate smoothing splines; heading is smoothed unwrapped."""

    def __init__(self, splines):
        self.splines = splines

    def evaluate(self, times, wrap: bool = False) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        out = np.column_stack([s(t) for s in self.splines])
        if wrap:
            out[:, 2] = wrap_angle(out[:, 2])
        return out

    def __call__(self, t) -> Pose2D:
        return Pose2D.from_array(self.evaluate([t])[0])


def spline_prior(
    trajectory: Trajectory, residuals, config: SplinePriorConfig = SplinePriorConfig()
) -> SmoothedTrajectory:
    """Fit the weighted smoothing-spline prior to an estimated trajectory."""
    if len(trajectory) < 4:
        raise InvalidArgument("spline prior needs at least 4 trajectory points")
    order = np.argsort(trajectory.times, kind="stable")
    t = trajectory.times[order]
    poses = trajectory.poses[order]
    w = residual_weights(np.asarray(residuals, dtype=float)[order], config.weight_floor)
    heading = np.unwrap(poses[:, 2])
    p = config.smoothing_parameter
    return SmoothedTrajectory(
        [SmoothingSpline(t, poses[:, 0], p, w), SmoothingSpline(t, poses[:, 1], p, w), SmoothingSpline(t, heading, p, w)]
    )


class SplinePrior:
    """Prior mean refitted from the estimate with :func:`spline_prior`.

    The known initial pose is kept in every fit as a point with the
    smallest admissible residual, which pins the start of the trajectory.
    With fewer than four points a weighted straight line is used instead.
    """

    def __init__(self, initial_pose: Pose2D, initial_time: float, config: SplinePriorConfig = SplinePriorConfig()):
        self.initial_pose = initial_pose
        self.initial_time = float(initial_time)
        self.config = config
        self._fit: SmoothedTrajectory | None = None
        self._line = None

    def refresh(self, estimate_fn: Callable[[np.ndarray], np.ndarray], times, residuals) -> None:
        """Refit to the estimate at ``times`` weighted by per-time ``residuals``."""
        times = np.asarray(times, dtype=float)
        poses = np.asarray(estimate_fn(times), dtype=float).reshape(-1, 3)
        residuals = np.asarray(residuals, dtype=float)
        keep = times > self.initial_time
        t = np.concatenate([[self.initial_time], times[keep]])
        p = np.vstack([self.initial_pose.as_array(), poses[keep]])
        r = np.concatenate([[0.0], residuals[keep]])
        # continuous heading across the sequence, anchored at the initial heading
        p[:, 2] = np.unwrap(p[:, 2])
        if len(t) >= 4:
            self._fit = spline_prior(Trajectory(t, p), r, self.config)
            self._line = None
        elif len(t) >= 2:
            w = residual_weights(r, self.config.weight_floor)
            self._line = [_weighted_line(t, p[:, k], w) for k in range(3)]
            self._fit = None

    def __call__(self, times) -> np.ndarray:
        t = np.atleast_1d(np.asarray(times, dtype=float))
        if self._fit is not None:
            return self._fit.evaluate(t)
        if self._line is not None:
            return np.column_stack([c[0] + c[1] * t for c in self._line])
        return np.tile(self.initial_pose.as_array(), (len(t), 1))
