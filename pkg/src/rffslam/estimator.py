"""Weight-space MAP estimator for continuous-time trajectories and landmarks.

The trajectory is modeled per state dimension m (x, y, heading) as

    x_m(t) = mu_m(t) + phi_m(t)^T b_m,      b_m ~ N(0, K_m)

and landmarks as l ~ N(mu_l, L). The stacked unknown is
``b = [b_x, b_y, b_alpha, l]``. Given range/bearing measurements the
negative log posterior

    J(b) = 1/2 * (sum_i ||z_i - h_i(b)||^2_{R_i^-1} + ||b - mu||^2_{P^-1})

is minimized with Levenberg-Marquardt. The damped normal equations are
solved by block-Jacobi preconditioned conjugate gradients using only
matrix-vector products with ``A = sum_i J_i^T R_i^-1 J_i + P^-1``; the
product costs O(N (D + M)) per call and A is never formed.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.sparse.linalg import LinearOperator, cg

from .errors import InvalidArgument, NumericalFailure
from .features import FeatureBasis, sample_frequencies
from .observation import (
    KIND_ROWS,
    Landmark2D,
    Measurement,
    Pose2D,
    Trajectory,
    jacobian_batch,
    observe_batch,
    wrap_angle,
)

log = logging.getLogger(__name__)

STATE_DIM = 3
PRECONDITIONERS = ("jacobi", "block_jacobi")
PriorMeanFn = Callable[[np.ndarray], np.ndarray]


@dataclass
class SolverConfig:
    num_features: int = 100
    lengthscale: float = 3.0
    seed: int = 0
    # separate basis for the heading dimension; None shares the position basis
    heading_num_features: int | None = None
    heading_lengthscale: float | None = None
    weight_prior_var: float = 1.0
    landmark_prior_var: float = 1e4
    lm_lambda_init: float = 1e-3
    lm_up: float = 10.0
    lm_down: float = 0.1
    tolerance: float = 1e-6
    step_tolerance: float = 1e-10
    max_iterations: int = 50
    cg_tolerance: float = 1e-8
    cg_max_iter: int | None = None
    time_scale: float = 1.0
    preconditioner: str = "block_jacobi"
    # pose-anchor stds at the initial time; they fix the global frame
    anchor_position_std: float = 1e-3
    anchor_heading_std: float = 1e-3

    def __post_init__(self):
        positive = {
            "num_features": self.num_features,
            "lengthscale": self.lengthscale,
            "weight_prior_var": self.weight_prior_var,
            "landmark_prior_var": self.landmark_prior_var,
            "lm_lambda_init": self.lm_lambda_init,
            "tolerance": self.tolerance,
            "step_tolerance": self.step_tolerance,
            "max_iterations": self.max_iterations,
            "cg_tolerance": self.cg_tolerance,
            "time_scale": self.time_scale,
            "anchor_position_std": self.anchor_position_std,
            "anchor_heading_std": self.anchor_heading_std,
        }
        for name, value in positive.items():
            if not value > 0:
                raise InvalidArgument(f"{name} must be positive, got {value}")
        if not self.lm_up > 1:
            raise InvalidArgument("lm_up must exceed 1")
        if not 0 < self.lm_down < 1:
            raise InvalidArgument("lm_down must lie in (0, 1)")
        if self.preconditioner not in PRECONDITIONERS:
            raise InvalidArgument(f"preconditioner must be one of {PRECONDITIONERS}, got {self.preconditioner!r}")
        if self.cg_max_iter is not None and self.cg_max_iter < 1:
            raise InvalidArgument("cg_max_iter must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class StateBases:
    """Feature bases for (x, y, heading) plus the time normalization.

    Features are evaluated at ``(t - time_origin) * time_scale``; the origin
    keeps the phases small for absolute (e.g. Unix) timestamps.
    """

    bases: tuple
    time_origin: float = 0.0
    time_scale: float = 1.0

    @classmethod
    def from_config(cls, config: SolverConfig, time_origin: float = 0.0) -> "StateBases":
        pos = sample_frequencies(config.num_features, config.lengthscale, 1, config.seed)
        if config.heading_num_features is None and config.heading_lengthscale is None:
            head = pos
        else:
            head = sample_frequencies(
                config.heading_num_features or config.num_features,
                config.heading_lengthscale or config.lengthscale,
                1,
                config.seed + 1,
            )
        return cls((pos, pos, head), float(time_origin), config.time_scale)

    @property
    def sizes(self) -> tuple:
        return tuple(b.num_features for b in self.bases)

    def features(self, times) -> list:
        s = (np.atleast_1d(np.asarray(times, dtype=float)) - self.time_origin) * self.time_scale
        cache = {}
        out = []
        for b in self.bases:
            if id(b) not in cache:
                cache[id(b)] = b.matrix(s)
            out.append(cache[id(b)])
        return out

    def to_dict(self) -> dict:
        return {
            "time_origin": self.time_origin,
            "time_scale": self.time_scale,
            "bases": [b.to_dict() for b in self.bases],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StateBases":
        return cls(
            tuple(FeatureBasis.from_dict(b) for b in data["bases"]),
            float(data["time_origin"]),
            float(data["time_scale"]),
        )


@dataclass(eq=False)
class WeightState:
    """Stacked unknowns ``[b_x, b_y, b_alpha, l]`` with their Gaussian prior.

    ``weight_cov`` holds the D_m x D_m blocks K_m; landmarks are a priori
    independent so L is stored as one 2 x 2 block per landmark.
    """

    vector: np.ndarray
    prior_mean: np.ndarray
    block_sizes: tuple
    weight_cov: list
    landmark_ids: list = field(default_factory=list)
    landmark_cov: np.ndarray = field(default_factory=lambda: np.zeros((0, 2, 2)))

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float)
        self.prior_mean = np.asarray(self.prior_mean, dtype=float)
        self.landmark_cov = np.asarray(self.landmark_cov, dtype=float).reshape(-1, 2, 2)
        expected = sum(self.block_sizes) + 2 * len(self.landmark_ids)
        if self.vector.shape != (expected,) or self.prior_mean.shape != (expected,):
            raise InvalidArgument(f"state vectors must have length {expected}")
        if len(self.landmark_cov) != len(self.landmark_ids):
            raise InvalidArgument("one landmark covariance block per landmark is required")
        if len(set(self.landmark_ids)) != len(self.landmark_ids):
            raise InvalidArgument("landmark ids must be unique")
        self._index = {lid: k for k, lid in enumerate(self.landmark_ids)}
        self._weight_prec = [_spd_inverse(K, "weight prior") for K in self.weight_cov]
        # isotropic blocks (the default) apply as a scalar multiple
        self._weight_scale = [_isotropic_scale(P) for P in self._weight_prec]
        self._landmark_prec = np.array([_spd_inverse(C, "landmark prior") for C in self.landmark_cov]).reshape(-1, 2, 2)
        offsets = np.concatenate([[0], np.cumsum(self.block_sizes)])
        self._slices = [slice(int(a), int(b)) for a, b in zip(offsets[:-1], offsets[1:])]
        self._nw = int(offsets[-1])

    @classmethod
    def empty(cls, block_sizes, weight_prior_var: float = 1.0) -> "WeightState":
        n = sum(block_sizes)
        return cls(
            np.zeros(n),
            np.zeros(n),
            tuple(block_sizes),
            [weight_prior_var * np.eye(d) for d in block_sizes],
        )

    @property
    def size(self) -> int:
        return len(self.vector)

    @property
    def num_weights(self) -> int:
        return self._nw

    @property
    def num_landmarks(self) -> int:
        return len(self.landmark_ids)

    def weights(self, m: int) -> np.ndarray:
        return self.vector[self._slices[m]]

    @property
    def landmarks(self) -> np.ndarray:
        return self.vector[self._nw :].reshape(-1, 2)

    def has_landmark(self, lid: int) -> bool:
        return lid in self._index

    def landmark_index(self, ids) -> np.ndarray:
        try:
            return np.array([self._index[int(i)] for i in ids], dtype=int)
        except KeyError as exc:
            raise InvalidArgument(f"measurement references unknown landmark id {exc.args[0]}") from None

    def with_vector(self, vector) -> "WeightState":
        out = self.copy()
        out.vector = np.asarray(vector, dtype=float).copy()
        return out

    def copy(self) -> "WeightState":
        return WeightState(
            self.vector.copy(),
            self.prior_mean.copy(),
            self.block_sizes,
            [K.copy() for K in self.weight_cov],
            list(self.landmark_ids),
            self.landmark_cov.copy(),
        )

    def add_landmark(self, lid: int, mean, cov) -> "WeightState":
        """Return a new state with landmark ``lid`` appended (initialized at its prior mean)."""
        if lid in self._index:
            raise InvalidArgument(f"landmark {lid} already present")
        mean = np.asarray(mean, dtype=float).reshape(2)
        return WeightState(
            np.concatenate([self.vector, mean]),
            np.concatenate([self.prior_mean, mean]),
            self.block_sizes,
            self.weight_cov,
            self.landmark_ids + [int(lid)],
            np.concatenate([self.landmark_cov, np.asarray(cov, dtype=float).reshape(1, 2, 2)]),
        )

    def reset_weights(self) -> None:
        """Zero the trajectory weights (after the prior mean absorbed them)."""
        self.vector[: self._nw] = self.prior_mean[: self._nw]

    def apply_prior_precision(self, v) -> np.ndarray:
        out = np.empty_like(v)
        for s, prec, scale in zip(self._slices, self._weight_prec, self._weight_scale):
            out[s] = scale * v[s] if scale is not None else prec @ v[s]
        out[self._nw :] = np.einsum("mij,mj->mi", self._landmark_prec, v[self._nw :].reshape(-1, 2)).reshape(-1)
        return out

    def prior_precision_diagonal(self) -> np.ndarray:
        parts = [np.diag(p) for p in self._weight_prec]
        parts.append(np.einsum("mii->mi", self._landmark_prec).reshape(-1))
        return np.concatenate(parts)

    def to_dict(self) -> dict:
        return {
            "vector": self.vector.tolist(),
            "prior_mean": self.prior_mean.tolist(),
            "block_sizes": list(self.block_sizes),
            "weight_cov": [K.tolist() for K in self.weight_cov],
            "landmark_ids": list(self.landmark_ids),
            "landmark_cov": self.landmark_cov.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WeightState":
        return cls(
            np.asarray(data["vector"], dtype=float),
            np.asarray(data["prior_mean"], dtype=float),
            tuple(data["block_sizes"]),
            [np.asarray(K, dtype=float) for K in data["weight_cov"]],
            [int(i) for i in data["landmark_ids"]],
            np.asarray(data["landmark_cov"], dtype=float).reshape(-1, 2, 2),
        )


def _spd_inverse(M, what):
    M = np.asarray(M, dtype=float)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise InvalidArgument(f"{what} covariance is not positive definite") from None
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def _isotropic_scale(P):
    c = P[0, 0]
    if np.count_nonzero(P - np.diag(np.diag(P))) == 0 and np.all(np.diag(P) == c):
        return float(c)
    return None


def save_checkpoint(path, state: WeightState, bases: StateBases) -> None:
    with open(path, "w") as fh:
        json.dump({"state": state.to_dict(), "bases": bases.to_dict()}, fh)


def load_checkpoint(path):
    with open(path) as fh:
        data = json.load(fh)
    return WeightState.from_dict(data["state"]), StateBases.from_dict(data["bases"])


@dataclass(frozen=True, eq=False)
class PoseAnchor:
    """Known pose at one time, entering the objective as a tight Gaussian.

    Range and bearing are invariant to moving the whole scene rigidly, so
    without an anchor the frame is held only by the weight prior and can
    drift between batches.
    """

    time: float
    pose: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=float).reshape(3)
        std = np.broadcast_to(np.asarray(self.std, dtype=float), (3,)).copy()
        if not (np.isfinite(self.time) and np.all(np.isfinite(pose))):
            raise InvalidArgument("anchor time and pose must be finite")
        if not np.all(std > 0):
            raise InvalidArgument("anchor stds must be positive")
        object.__setattr__(self, "pose", pose)
        object.__setattr__(self, "std", std)

    @classmethod
    def from_config(cls, time: float, pose, config: SolverConfig) -> "PoseAnchor":
        p = config.anchor_position_std
        return cls(float(time), np.asarray(pose, dtype=float), np.array([p, p, config.anchor_heading_std]))


@dataclass(eq=False)
class MeasurementArrays:
    """Measurements padded to the [range, bearing] row layout.

    Missing rows carry zero value and zero information, so they drop out of
    every sum without branching on the measurement kind.
    """

    times: np.ndarray
    landmark_ids: np.ndarray
    values: np.ndarray  # (N, 2)
    mask: np.ndarray  # (N, 2)
    info: np.ndarray  # (N, 2, 2), R^-1 embedded

    @classmethod
    def from_measurements(cls, measurements: Sequence[Measurement]) -> "MeasurementArrays":
        n = len(measurements)
        values = np.zeros((n, 2))
        mask = np.zeros((n, 2), dtype=bool)
        info = np.zeros((n, 2, 2))
        for i, m in enumerate(measurements):
            values[i], mask[i], info[i] = m.full_rows()
        return cls(
            np.array([m.time for m in measurements], dtype=float),
            np.array([m.landmark_id for m in measurements], dtype=int),
            values,
            mask,
            info,
        )

    def __len__(self):
        return len(self.times)


def _as_arrays(measurements) -> MeasurementArrays:
    if isinstance(measurements, MeasurementArrays):
        return measurements
    return MeasurementArrays.from_measurements(list(measurements))


@dataclass(eq=False)
class LinearizedSystem:
    """Gauss-Newton normal equations ``A delta = g`` at a linearization point.

    ``g`` is the negative gradient of the objective, so ``delta = A^-1 g``
    is a descent step. ``weight_blocks`` (one ``(slice, D_m x D_m)`` pair
    per trajectory dimension) and ``landmark_blocks`` (M, 2, 2) are the
    diagonal blocks of A, used for block-Jacobi preconditioning.
    """

    matvec: Callable[[np.ndarray], np.ndarray]
    diagonal: np.ndarray
    rhs: np.ndarray
    objective: float
    weight_blocks: list | None = None
    landmark_blocks: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.rhs)


class _Problem:
    """Fixed measurement set with its time features cached across iterations."""

    def __init__(
        self,
        state: WeightState,
        measurements,
        bases: StateBases,
        prior_mean_fn: PriorMeanFn,
        anchor: PoseAnchor | None = None,
    ):
        self.arrays = _as_arrays(measurements)
        self.state = state
        n = len(self.arrays)
        # features depend on time only; many measurements share a timestamp
        self.times, tidx = np.unique(self.arrays.times, return_inverse=True)
        self.feats = bases.features(self.times) if n else [np.zeros((0, d)) for d in state.block_sizes]
        mu = np.asarray(prior_mean_fn(self.times)).reshape(-1, 3) if n else np.zeros((0, 3))
        # per-time sums run as reduceat over measurements grouped by time
        self.tidx = tidx
        self.order = None if np.all(np.diff(tidx) >= 0) else np.argsort(tidx, kind="stable")
        sorted_idx = tidx if self.order is None else tidx[self.order]
        self.starts = np.flatnonzero(np.r_[True, np.diff(sorted_idx) != 0]) if n else np.zeros(0, dtype=int)
        self.mu = mu[tidx]
        self.idx = state.landmark_index(self.arrays.landmark_ids)
        self.M = state.num_landmarks
        self.nw = state.num_weights
        self.slices = state._slices
        # blocks sharing one basis are multiplied together in a single GEMM
        groups = {}
        for m, F in enumerate(self.feats):
            groups.setdefault(id(F), (F, []))[1].append(m)
        self.groups = list(groups.values())
        self.anchor = anchor
        if anchor is not None:
            self.anchor_feats = [F[0] for F in bases.features([anchor.time])]
            self.anchor_mu = np.asarray(prior_mean_fn(np.array([anchor.time]))).reshape(3)
            self.anchor_prec = 1.0 / anchor.std**2

    def anchor_residual(self, b) -> np.ndarray:
        pose = self.anchor_mu + np.array([f @ b[s] for f, s in zip(self.anchor_feats, self.slices)])
        r = self.anchor.pose - pose
        r[2] = wrap_angle(r[2])
        return r

    def _forward(self, v) -> np.ndarray:
        """(N, 3) trajectory corrections ``phi_m(t_i)^T v_m``."""
        out = np.empty((len(self.times), STATE_DIM))
        for F, ms in self.groups:
            out[:, ms] = F @ np.column_stack([v[self.slices[m]] for m in ms])
        return out[self.tidx]

    def _per_time(self, x) -> np.ndarray:
        """Sum (N, k) per-measurement rows into (T, k) per-time rows."""
        if len(x) == 0:
            return np.zeros((0,) + x.shape[1:])
        return np.add.reduceat(x if self.order is None else x[self.order], self.starts, axis=0)

    def _per_landmark(self, x) -> np.ndarray:
        """Sum (N, k) per-measurement rows into (M, k) per-landmark rows."""
        return np.column_stack([np.bincount(self.idx, weights=x[:, c], minlength=self.M) for c in range(x.shape[1])])

    def poses(self, b) -> np.ndarray:
        return self.mu + self._forward(b)

    def landmarks(self, b) -> np.ndarray:
        return b[self.nw :].reshape(-1, 2)[self.idx]

    def residuals(self, b, poses=None) -> np.ndarray:
        if len(self.arrays) == 0:
            return np.zeros((0, 2))
        poses = self.poses(b) if poses is None else poses
        r = self.arrays.values - observe_batch(poses, self.landmarks(b))
        r[:, 1] = wrap_angle(r[:, 1])
        r[~self.arrays.mask] = 0.0
        return r

    def objective(self, b, r=None) -> float:
        r = self.residuals(b) if r is None else r
        data = float(np.einsum("ni,nij,nj->", r, self.arrays.info, r))
        if self.anchor is not None:
            ra = self.anchor_residual(b)
            data += float(ra @ (self.anchor_prec * ra))
        db = b - self.state.prior_mean
        return 0.5 * (data + float(db @ self.state.apply_prior_precision(db)))

    def _back(self, per_meas) -> np.ndarray:
        """Map (N, 5) per-measurement [pose, landmark] terms back to state space."""
        out = np.empty(self.nw + 2 * self.M)
        per_time = self._per_time(per_meas[:, :3])
        for F, ms in self.groups:
            block = F.T @ per_time[:, ms]
            for j, m in enumerate(ms):
                out[self.slices[m]] = block[:, j]
        out[self.nw :] = self._per_landmark(per_meas[:, 3:]).reshape(-1)
        return out

    def linearize(self, b) -> LinearizedSystem:
        state = self.state
        info = self.arrays.info
        n = len(self.arrays)
        if n:
            poses = self.poses(b)
            J = jacobian_batch(poses, self.landmarks(b))
            r = self.residuals(b, poses)
        else:
            J = np.zeros((0, 2, 5))
            r = np.zeros((0, 2))
        # per-measurement 5 x 5 blocks J_i^T R_i^-1 J_i over [pose, landmark]
        G = np.einsum("nrs,nsk->nrk", info, J)
        H = np.einsum("nrj,nrk->njk", J, G)
        slices, nw = self.slices, self.nw
        idx = self.idx
        anchored = self.anchor is not None

        def matvec(v):
            v = np.asarray(v, dtype=float).reshape(-1)
            dz = np.empty((n, 5))
            dz[:, :3] = self._forward(v)
            dz[:, 3:] = v[nw:].reshape(-1, 2)[idx]
            out = self._back(np.einsum("njk,nk->nj", H, dz)) + state.apply_prior_precision(v)
            if anchored:
                for m, (f, s) in enumerate(zip(self.anchor_feats, slices)):
                    out[s] += f * (self.anchor_prec[m] * (f @ v[s]))
            return out

        C = np.einsum("njj->nj", H)
        Ct = self._per_time(C[:, :3])
        diag = np.empty(nw + 2 * self.M)
        for m, (F, s) in enumerate(zip(self.feats, slices)):
            diag[s] = (F * F).T @ Ct[:, m]
        diag[nw:] = self._per_landmark(C[:, 3:]).reshape(-1)
        diag += state.prior_precision_diagonal()
        if anchored:
            ra = self.anchor_residual(b)
            for m, (f, s) in enumerate(zip(self.anchor_feats, slices)):
                diag[s] += self.anchor_prec[m] * f * f

        blocks = []
        for m, (F, s) in enumerate(zip(self.feats, slices)):
            B = F.T @ (Ct[:, m, None] * F) + state._weight_prec[m]
            if anchored:
                f = self.anchor_feats[m]
                B += self.anchor_prec[m] * np.outer(f, f)
            blocks.append((s, B))
        lm_blocks = self._per_landmark(H[:, 3:, 3:].reshape(n, 4)).reshape(-1, 2, 2) + state._landmark_prec

        g = self._back(np.einsum("nrk,nr->nk", G, r))
        # negative gradient of the prior term: P^-1 (mu - b)
        g += state.apply_prior_precision(state.prior_mean - b)
        if anchored:
            for m, (f, s) in enumerate(zip(self.anchor_feats, slices)):
                g[s] += f * (self.anchor_prec[m] * ra[m])
        return LinearizedSystem(matvec, diag, g, self.objective(b, r), blocks, lm_blocks)


def objective(
    state: WeightState, measurements, bases: StateBases, prior_mean_fn: PriorMeanFn, anchor: PoseAnchor | None = None
) -> float:
    """MAP objective (negative log posterior up to a constant)."""
    return _Problem(state, measurements, bases, prior_mean_fn, anchor).objective(state.vector)


def make_objective(
    state: WeightState, measurements, bases: StateBases, prior_mean_fn: PriorMeanFn, anchor: PoseAnchor | None = None
) -> Callable[[np.ndarray], float]:
    """The MAP objective as a function of the state vector, with the
    measurement features computed once (for repeated evaluation)."""
    problem = _Problem(state, measurements, bases, prior_mean_fn, anchor)
    return lambda vector: problem.objective(np.asarray(vector, dtype=float))


def data_residuals(state: WeightState, measurements, bases: StateBases, prior_mean_fn: PriorMeanFn) -> np.ndarray:
    """Per-measurement Mahalanobis norms ``||z_i - h_i||_{R_i^-1}``."""
    p = _Problem(state, measurements, bases, prior_mean_fn)
    r = p.residuals(state.vector)
    return np.sqrt(np.einsum("ni,nij,nj->n", r, p.arrays.info, r))


def assemble_system(
    state: WeightState, measurements, bases: StateBases, prior_mean_fn: PriorMeanFn, anchor: PoseAnchor | None = None
) -> LinearizedSystem:
    return _Problem(state, measurements, bases, prior_mean_fn, anchor).linearize(state.vector)


def _block_preconditioner(system: LinearizedSystem, lam: float):
    """Inverse of the block diagonal of ``A + lam * diag(A)``."""
    nw = sum(s.stop - s.start for s, _ in system.weight_blocks)
    factors = []
    for s, B in system.weight_blocks:
        damped = B + lam * np.diag(system.diagonal[s])
        try:
            factors.append((s, cho_factor(damped)))
        except np.linalg.LinAlgError:
            raise NumericalFailure("weight block of the system is not positive definite") from None
    lm = system.landmark_blocks + lam * system.diagonal[nw:].reshape(-1, 2)[:, :, None] * np.eye(2)
    lm_inv = np.linalg.inv(lm) if len(lm) else lm

    def apply(v):
        v = np.ravel(v)
        out = np.empty_like(v)
        for s, f in factors:
            out[s] = cho_solve(f, v[s])
        out[nw:] = np.einsum("mij,mj->mi", lm_inv, v[nw:].reshape(-1, 2)).reshape(-1)
        return out

    return apply


def lm_solve(
    system: LinearizedSystem,
    lam: float,
    cg_tolerance: float = 1e-8,
    cg_max_iter: int | None = None,
    preconditioner: str = "block_jacobi",
) -> np.ndarray:
    """Solve ``(A + lam * diag(A)) delta = g`` by preconditioned CG.

    ``preconditioner`` is ``"jacobi"`` (the damped diagonal) or
    ``"block_jacobi"`` (the damped per-dimension weight blocks and 2 x 2
    landmark blocks; falls back to Jacobi when the system carries no blocks).
    """
    if lam < 0:
        raise InvalidArgument("damping must be non-negative")
    if preconditioner not in PRECONDITIONERS:
        raise InvalidArgument(f"unknown preconditioner {preconditioner!r}")
    g = system.rhs
    gnorm = np.linalg.norm(g)
    if gnorm == 0.0:
        return np.zeros_like(g)
    n = system.size
    d = system.diagonal
    if np.any(d <= 0):
        raise NumericalFailure("system diagonal has non-positive entries")
    damped = d * (1.0 + lam)
    op = LinearOperator((n, n), matvec=lambda v: system.matvec(v) + lam * d * np.ravel(v), dtype=float)
    if preconditioner == "block_jacobi" and system.weight_blocks is not None:
        pre = LinearOperator((n, n), matvec=_block_preconditioner(system, lam), dtype=float)
    else:
        pre = LinearOperator((n, n), matvec=lambda v: np.ravel(v) / damped, dtype=float)
    maxiter = cg_max_iter or n
    x = None
    rel = np.inf
    # scipy tracks the residual recursively; confirm against the true residual
    for _ in range(3):
        x, _info = cg(op, g, x0=x, rtol=cg_tolerance, atol=0.0, maxiter=maxiter, M=pre)
        rel = np.linalg.norm(op.matvec(x) - g) / gnorm
        if rel <= cg_tolerance:
            return x
    raise NumericalFailure(
        f"conjugate gradients did not reach relative residual {cg_tolerance:g} "
        f"in {maxiter} iterations (achieved {rel:.3g})",
        residual=rel,
    )


@dataclass
class ConvergenceReport:
    iterations: int = 0
    converged: bool = False
    objective_history: list = field(default_factory=list)
    rejected_steps: int = 0
    final_lambda: float = 0.0
    num_measurements: int = 0

    @property
    def initial_objective(self) -> float:
        return self.objective_history[0]

    @property
    def final_objective(self) -> float:
        return self.objective_history[-1]

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "converged": self.converged,
            "initial_objective": self.initial_objective,
            "final_objective": self.final_objective,
            "rejected_steps": self.rejected_steps,
            "final_lambda": self.final_lambda,
            "num_measurements": self.num_measurements,
        }


_LAMBDA_MAX = 1e16


def update_state(
    state: WeightState,
    measurements,
    bases: StateBases,
    prior_mean_fn: PriorMeanFn,
    config: SolverConfig,
    anchor: PoseAnchor | None = None,
) -> tuple:
    """Levenberg-Marquardt iterations on the MAP objective.

    A step is kept only if it lowers the objective; the damping then shrinks
    by ``lm_down``, otherwise it grows by ``lm_up`` and the step is retried.
    A CG solve that misses its tolerance is treated like a rejected step;
    the failure propagates only if it persists up to the largest damping.
    Stops when the relative objective decrease drops below ``tolerance``,
    the step is negligible against ``step_tolerance``, or after
    ``max_iterations`` linearizations.
    """
    problem = _Problem(state, measurements, bases, prior_mean_fn, anchor)
    b = state.vector.copy()
    lam = config.lm_lambda_init
    obj = problem.objective(b)
    report = ConvergenceReport(objective_history=[obj], num_measurements=len(problem.arrays))
    for _ in range(config.max_iterations):
        if obj <= 1e-300:
            report.converged = True
            break
        system = problem.linearize(b)
        report.iterations += 1
        accepted = False
        failure = None
        while lam <= _LAMBDA_MAX:
            try:
                delta = lm_solve(system, lam, config.cg_tolerance, config.cg_max_iter, config.preconditioner)
            except NumericalFailure as exc:
                # heavier damping improves the conditioning; retry like a rejected step
                failure = exc
                report.rejected_steps += 1
                lam *= config.lm_up
                continue
            failure = None
            new_obj = problem.objective(b + delta)
            if new_obj < obj:
                accepted = True
                break
            report.rejected_steps += 1
            lam *= config.lm_up
        if not accepted:
            if failure is not None:
                raise failure
            # no descent direction left at machine precision
            report.converged = True
            break
        small_step = np.linalg.norm(delta) <= config.step_tolerance * (np.linalg.norm(b) + config.step_tolerance)
        b = b + delta
        rel = (obj - new_obj) / max(abs(obj), 1e-300)
        obj = new_obj
        report.objective_history.append(obj)
        lam = max(lam * config.lm_down, 1e-12)
        if rel < config.tolerance or small_step:
            report.converged = True
            break
    report.final_lambda = lam
    log.debug(
        "LM: %d iterations, objective %.6g -> %.6g, converged=%s",
        report.iterations,
        report.initial_objective,
        obj,
        report.converged,
    )
    return state.with_vector(b), report


def state_poses(state: WeightState, bases: StateBases, prior_mean_fn: PriorMeanFn, times) -> np.ndarray:
    """(n, 3) poses at ``times``; heading left unwrapped."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    feats = bases.features(t)
    corr = np.column_stack([F @ state.weights(m) for m, F in enumerate(feats)])
    return np.asarray(prior_mean_fn(t)).reshape(-1, 3) + corr


def interpolate_state(state: WeightState, bases: StateBases, prior_mean_fn: PriorMeanFn, t: float) -> Pose2D:
    if not np.isfinite(t):
        raise InvalidArgument("query time must be finite")
    return Pose2D.from_array(state_poses(state, bases, prior_mean_fn, [t])[0])


def heading_from_motion(trajectory: Trajectory) -> Trajectory:
    """Replace headings by the direction of travel to the next pose."""
    if len(trajectory) < 2:
        raise InvalidArgument("heading from motion needs at least two poses")
    xy = trajectory.xy
    d = np.diff(xy, axis=0)
    heading = np.arctan2(d[:, 1], d[:, 0])
    heading = np.append(heading, heading[-1])
    poses = np.column_stack([xy, wrap_angle(heading)])
    return Trajectory(trajectory.times.copy(), poses, dict(trajectory.meta))


# --- landmark initialization -------------------------------------------------

MIN_PARALLAX = np.deg2rad(5.0)
MIN_RANGE_SPREAD = 0.5
# chi-square margin by which the mirrored range-only fix must lose
MIRROR_CHI2 = 25.0


def initialize_landmark(poses, measurements: Sequence[Measurement]):
    """Initial landmark position from measurements taken at ``poses``.

    Range-bearing: average back-projection of the first two measurements.
    Bearing-only: least-squares ray intersection once the ray origins
    subtend at least 5 degrees at the point. Range-only: multilateration
    once the poses spread at least 0.5 m off a line and the mirrored
    solution is clearly worse. Returns None when the geometry does not yet
    determine the landmark.
    """
    poses = np.asarray(poses, dtype=float).reshape(-1, 3)
    full = [(p, m) for p, m in zip(poses, measurements) if m.kind == "range_bearing"]
    if full:
        pts = []
        for p, m in full[:2]:
            r, beta = m.value
            a = p[2] + beta
            pts.append(p[:2] + r * np.array([np.cos(a), np.sin(a)]))
        return np.mean(pts, axis=0)

    rays = [(p, p[2] + m.value[0]) for p, m in zip(poses, measurements) if m.kind == "bearing"]
    if len(rays) >= 2:
        angles = np.array([a for _, a in rays])
        normals = np.column_stack([-np.sin(angles), np.cos(angles)])
        origins = np.array([p[:2] for p, _ in rays])
        A = normals.T @ normals
        if np.linalg.cond(A) >= 1e8:
            return None
        point = np.linalg.solve(A, normals.T @ np.einsum("ij,ij->i", normals, origins))
        dirs = np.column_stack([np.cos(angles), np.sin(angles)])
        if not np.all(np.einsum("ij,ij->i", point - origins, dirs) > 0):
            return None
        # parallax is the angle the ray origins subtend at the point; rays
        # from one position that differ only through heading give none
        seen = point - origins
        view = np.arctan2(seen[:, 1], seen[:, 0])
        if np.abs(wrap_angle(view[:, None] - view[None, :])).max() >= MIN_PARALLAX:
            return point
        return None

    ranges = [(p, m.value[0], m.sigmas[0]) for p, m in zip(poses, measurements) if m.kind == "range"]
    if len(ranges) >= 3:
        P = np.array([p[:2] for p, _, _ in ranges])
        r = np.array([v for _, v, _ in ranges])
        sigma = np.array([s for _, _, s in ranges])
        return _multilaterate(P, r, sigma)
    return None


def _refine_range_fix(P, r, sigma, point, iterations=20):
    """Gauss-Newton on weighted range residuals; returns (point, chi2)."""
    for _ in range(iterations):
        d = point - P
        rho = np.maximum(np.linalg.norm(d, axis=1), MIN_RANGE_SPREAD)
        J = d / rho[:, None] / sigma[:, None]
        res = (r - rho) / sigma
        step, *_ = np.linalg.lstsq(J, res, rcond=None)
        point = point + step
        if np.linalg.norm(step) < 1e-9:
            break
    rho = np.linalg.norm(point - P, axis=1)
    return point, float(np.sum(((r - rho) / sigma) ** 2))


def _multilaterate(P, r, sigma):
    """Range-only fix that waits until the mirror ambiguity is resolved.

    Near-straight paths cannot tell a landmark from its reflection across
    the path; committing to the wrong side leaves the joint solve in a local
    minimum. Both candidates are refined and the fix is accepted only when
    they coincide or the reflection is worse by ``MIRROR_CHI2``.
    """
    center = P.mean(axis=0)
    _, sv, Vt = np.linalg.svd(P - center, full_matrices=False)
    if sv[-1] / np.sqrt(len(P)) < MIN_RANGE_SPREAD:
        return None
    A = 2.0 * (P[1:] - P[0])
    rhs = r[0] ** 2 - r[1:] ** 2 + np.sum(P[1:] ** 2, axis=1) - np.sum(P[0] ** 2)
    guess, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    axis = Vt[0]
    rel = guess - center
    mirror = center + 2.0 * (rel @ axis) * axis - rel
    (p1, c1), (p2, c2) = sorted(
        (_refine_range_fix(P, r, sigma, guess), _refine_range_fix(P, r, sigma, mirror)), key=lambda pc: pc[1]
    )
    if not np.isfinite(c1):
        return None
    if np.linalg.norm(p1 - p2) <= np.median(sigma) or c2 - c1 >= MIRROR_CHI2:
        return p1
    return None


class RffSlam:
    """Incremental driver: buffers measurements, initializes landmarks,
    refreshes the prior mean and re-solves the whole trajectory per batch.

    ``prior`` is a :class:`~rffslam.priors.MotionPrior` or
    :class:`~rffslam.priors.SplinePrior` (anything with ``__call__`` and
    ``refresh(estimate_fn, times, residuals)``). ``initial_pose``, when
    given, anchors the pose at ``time_origin`` and with it the map frame.
    """

    def __init__(
        self,
        config: SolverConfig,
        prior,
        time_origin: float = 0.0,
        landmark_priors: dict | None = None,
        initial_pose: Pose2D | None = None,
    ):
        self.config = config
        self.prior = prior
        self.bases = StateBases.from_config(config, time_origin)
        self.state = WeightState.empty(self.bases.sizes, config.weight_prior_var)
        self.landmark_priors = dict(landmark_priors or {})
        self.anchor = None
        if initial_pose is not None:
            self.anchor = PoseAnchor.from_config(time_origin, initial_pose.as_array(), config)
        self.measurements: list = []
        self.pending: list = []
        self.reports: list = []
        self._buffer: list = []

    # current estimate -------------------------------------------------------
    def poses(self, times) -> np.ndarray:
        return state_poses(self.state, self.bases, self.prior, times)

    def trajectory(self, times) -> Trajectory:
        t = np.asarray(times, dtype=float)
        p = self.poses(t)
        p[:, 2] = wrap_angle(p[:, 2])
        return Trajectory(t, p)

    def landmarks(self) -> list:
        return [Landmark2D(lid, float(x), float(y)) for lid, (x, y) in zip(self.state.landmark_ids, self.state.landmarks)]

    def objective(self) -> float:
        return objective(self.state, self.measurements, self.bases, self.prior, self.anchor)

    @property
    def measurement_times(self) -> np.ndarray:
        return np.unique([m.time for m in self.measurements])

    # updates ------------------------------------------------------------------
    def incremental_update(self, new_measurements: Sequence[Measurement], batch_size: int) -> WeightState:
        """Queue measurements; every ``batch_size`` of them triggers a full re-solve."""
        if batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        self._buffer.extend(sorted(new_measurements, key=lambda m: m.time))
        while len(self._buffer) >= batch_size:
            batch, self._buffer = self._buffer[:batch_size], self._buffer[batch_size:]
            self._process(batch)
        return self.state

    def flush(self) -> WeightState:
        """Process buffered measurements that did not fill a batch."""
        if self._buffer:
            batch, self._buffer = self._buffer, []
            self._process(batch)
        return self.state

    def _process(self, batch) -> None:
        if self.measurements:
            self._refresh_prior()
        accepted = self._admit(self.pending + list(batch))
        if accepted:
            self.measurements.extend(accepted)
            self.measurements.sort(key=lambda m: m.time)
        if not self.measurements:
            return
        self.state, report = update_state(self.state, self.measurements, self.bases, self.prior, self.config, self.anchor)
        self.reports.append(report)

    def _refresh_prior(self) -> None:
        times = self.measurement_times
        res = data_residuals(self.state, self.measurements, self.bases, self.prior)
        mt = np.array([m.time for m in self.measurements])
        # per-time RMS of the Mahalanobis residuals
        _, inv = np.unique(mt, return_inverse=True)
        per_time = np.sqrt(np.bincount(inv, res**2) / np.bincount(inv))
        frozen_state = self.state.copy()
        frozen_prior = copy.deepcopy(self.prior)

        def estimate(t):
            return state_poses(frozen_state, self.bases, frozen_prior, t)

        self.prior.refresh(estimate, times, per_time)
        self.state.reset_weights()

    def _admit(self, candidates) -> list:
        """Add landmarks that can be initialized; keep the rest pending."""
        accepted, pending = [], []
        unknown = {}
        for m in candidates:
            if self.state.has_landmark(m.landmark_id):
                accepted.append(m)
            else:
                unknown.setdefault(m.landmark_id, []).append(m)
        for lid in sorted(unknown):
            ms = unknown[lid]
            if lid in self.landmark_priors:
                mean, cov = self.landmark_priors[lid]
            else:
                mean = initialize_landmark(self.poses([m.time for m in ms]), ms)
                cov = self.config.landmark_prior_var * np.eye(2)
            if mean is None:
                pending.extend(ms)
                continue
            self.state = self.state.add_landmark(lid, mean, cov)
            accepted.extend(ms)
        self.pending = pending
        return accepted
