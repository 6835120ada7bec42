"""Absolute and relative pose error on SE(3)-lifted 2D trajectories."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .observation import Pose2D, Trajectory, wrap_angle

TIME_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class Pose3D:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-10) or abs(np.linalg.det(R) - 1.0) > 1e-10:
            raise InvalidArgument("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "Pose3D":
        Rt = self.rotation.T
        return Pose3D(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose3D") -> "Pose3D":
        return Pose3D(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)


def lift_to_se3(pose: Pose2D) -> Pose3D:
    c, s = np.cos(pose.alpha), np.sin(pose.alpha)
    R = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose3D(R, np.array([pose.x, pose.y, 0.0]))


def _lift_all(poses) -> np.ndarray:
    """(n, 4, 4) homogeneous matrices for (n, 3) planar poses."""
    poses = np.asarray(poses, dtype=float).reshape(-1, 3)
    n = len(poses)
    c, s = np.cos(poses[:, 2]), np.sin(poses[:, 2])
    T = np.zeros((n, 4, 4))
    T[:, 0, 0], T[:, 0, 1], T[:, 1, 0], T[:, 1, 1] = c, -s, s, c
    T[:, 2, 2] = T[:, 3, 3] = 1.0
    T[:, 0, 3], T[:, 1, 3] = poses[:, 0], poses[:, 1]
    return T


def rotation_angle(R) -> np.ndarray:
    """Geodesic angle in [0, pi] of one or many rotation matrices."""
    R = np.asarray(R, dtype=float)
    single = R.ndim == 2
    R = R.reshape(-1, 3, 3)
    cos = (np.trace(R, axis1=1, axis2=2) - 1.0) / 2.0
    skew = np.stack([R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]], axis=1)
    sin = np.linalg.norm(skew, axis=1) / 2.0
    angle = np.arctan2(sin, cos)
    return float(angle[0]) if single else angle


def _between(A, B):
    """Batched ``A^-1 B``; the translation is formed as ``R_A^T (t_B - t_A)``
    so identical poses give an exactly zero offset."""
    Rt = np.transpose(A[:, :3, :3], (0, 2, 1))
    out = np.zeros_like(B)
    out[:, :3, :3] = Rt @ B[:, :3, :3]
    out[:, :3, 3] = np.einsum("nij,nj->ni", Rt, B[:, :3, 3] - A[:, :3, 3])
    out[:, 3, 3] = 1.0
    return out


def _errors(E):
    return np.linalg.norm(E[:, :3, 3], axis=1), rotation_angle(E[:, :3, :3])


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x)))) if len(x) else 0.0


def associate(estimate: Trajectory, ground_truth: Trajectory, tolerance: float = TIME_TOLERANCE):
    """Pair every estimate pose with the ground-truth pose at the same time.

    Returns the index arrays ``(est_idx, gt_idx)``.
    """
    if len(estimate) == 0:
        raise InvalidArgument("estimate trajectory is empty")
    gt_t = ground_truth.times
    order = np.argsort(gt_t, kind="stable")
    pos = np.clip(np.searchsorted(gt_t[order], estimate.times), 1, max(len(gt_t) - 1, 1))
    cand = np.stack([order[np.clip(pos - 1, 0, len(gt_t) - 1)], order[np.clip(pos, 0, len(gt_t) - 1)]])
    gaps = np.abs(gt_t[cand] - estimate.times)
    best = cand[np.argmin(gaps, axis=0), np.arange(len(estimate))]
    ok = np.abs(gt_t[best] - estimate.times) <= tolerance
    if not np.all(ok):
        raise InvalidArgument(
            f"{int((~ok).sum())} of {len(estimate)} estimate poses have no ground-truth pose "
            f"within {tolerance:g} s"
        )
    return np.arange(len(estimate)), best


def ape(estimate: Trajectory, ground_truth: Trajectory):
    """Absolute pose error ``P_i^-1 * P_hat_i``; returns (trans_rms, rot_rms, series)."""
    ei, gi = associate(estimate, ground_truth)
    E = _between(_lift_all(ground_truth.poses[gi]), _lift_all(estimate.poses[ei]))
    trans, rot = _errors(E)
    return _rms(trans), _rms(rot), {"times": estimate.times[ei], "trans": trans, "rot": rot}


def rpe(estimate: Trajectory, ground_truth: Trajectory):
    """Relative pose error of consecutive deltas; RMS over the N - 1 deltas."""
    ei, gi = associate(estimate, ground_truth)
    if len(ei) < 2:
        raise InvalidArgument("relative pose error needs at least two poses")
    P = _lift_all(ground_truth.poses[gi])
    Q = _lift_all(estimate.poses[ei])
    E = _between(_between(P[:-1], P[1:]), _between(Q[:-1], Q[1:]))
    trans, rot = _errors(E)
    return _rms(trans), _rms(rot), {"times": estimate.times[ei][1:], "trans": trans, "rot": rot}


@dataclass
class EvalReport:
    ape_trans: float
    ape_rot: float
    rpe_trans: float
    rpe_rot: float
    ape_series: dict = field(default_factory=dict)
    rpe_series: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        out = {
            "ape_trans": self.ape_trans,
            "ape_rot": self.ape_rot,
            "rpe_trans": self.rpe_trans,
            "rpe_rot": self.rpe_rot,
            "num_poses": len(self.ape_series.get("trans", [])),
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        data = self.summary()
        data["ape_series"] = {k: np.asarray(v).tolist() for k, v in self.ape_series.items()}
        data["rpe_series"] = {k: np.asarray(v).tolist() for k, v in self.rpe_series.items()}
        return json.dumps(data, indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Per-step series: time, ape_trans, ape_rot, rpe_trans, rpe_rot (RPE blank at step 0)."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "ape_trans", "ape_rot", "rpe_trans", "rpe_rot"])
        a, r = self.ape_series, self.rpe_series
        for i, t in enumerate(a["times"]):
            row = [repr(float(t)), repr(float(a["trans"][i])), repr(float(a["rot"][i]))]
            if i >= 1 and len(r.get("trans", [])) >= i:
                row += [repr(float(r["trans"][i - 1])), repr(float(r["rot"][i - 1]))]
            else:
                row += ["", ""]
            w.writerow(row)
        return buf.getvalue()


def evaluate(estimate: Trajectory, ground_truth: Trajectory) -> EvalReport:
    at, ar, aser = ape(estimate, ground_truth)
    if len(estimate) >= 2:
        rt, rr, rser = rpe(estimate, ground_truth)
    else:
        rt, rr, rser = 0.0, 0.0, {"times": np.zeros(0), "trans": np.zeros(0), "rot": np.zeros(0)}
    return EvalReport(at, ar, rt, rr, aser, rser)


def relative_errors(estimate: Trajectory, ground_truth: Trajectory, est_landmarks=None, true_landmarks=None) -> dict:
    """Relative Frobenius errors ``||est - true|| / ||true||`` of positions,
    headings (wrapped differences) and landmark coordinates."""
    ei, gi = associate(estimate, ground_truth)
    e, g = estimate.poses[ei], ground_truth.poses[gi]
    out = {
        "position": float(np.linalg.norm(e[:, :2] - g[:, :2]) / max(np.linalg.norm(g[:, :2]), 1e-300)),
        "rotation": float(np.linalg.norm(wrap_angle(e[:, 2] - g[:, 2])) / max(np.linalg.norm(g[:, 2]), 1e-300)),
    }
    if est_landmarks is not None and true_landmarks is not None:
        truth = {lm.id: lm.as_array() for lm in true_landmarks}
        pairs = [(lm.as_array(), truth[lm.id]) for lm in est_landmarks if lm.id in truth]
        if pairs:
            a = np.array([p[0] for p in pairs])
            b = np.array([p[1] for p in pairs])
            out["landmarks"] = float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
            out["landmarks_found"] = len(pairs)
    return out
