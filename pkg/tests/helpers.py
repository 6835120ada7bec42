"""Small synthetic estimation problems shared by the estimator tests."""

import numpy as np

from rffslam.estimator import PoseAnchor, SolverConfig, StateBases, WeightState, state_poses
from rffslam.observation import Measurement, observe_batch, wrap_angle

SIGMAS = np.array([0.5, 0.05])


def linear_mean(t):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.column_stack([t, 0.5 * t, 0.1 * t])


def make_problem(rng, n=30, num_landmarks=5, d=20, kinds=("range", "bearing", "range_bearing"), noise=1.0,
                 weight_scale=0.3, landmark_var=4.0, duration=10.0):
    """Random state, and measurements of it, around the path (t, t/2).

    Returns ``(truth, measurements, bases, config)``; ``truth`` carries the
    generating weights and landmarks, with prior mean zero weights and
    landmarks at their true positions plus 1 m offsets.
    """
    config = SolverConfig(num_features=d, lengthscale=3.0)
    bases = StateBases.from_config(config)
    state = WeightState.empty(bases.sizes)
    lms = np.column_stack([rng.uniform(-5, 15, num_landmarks), rng.uniform(12, 25, num_landmarks)])
    for j, p in enumerate(lms):
        state = state.add_landmark(j, p + rng.uniform(-1, 1, 2), landmark_var * np.eye(2))
    truth = state.copy()
    truth.vector[: state.num_weights] = weight_scale * rng.standard_normal(state.num_weights)
    truth.vector[state.num_weights :] = lms.reshape(-1)
    times = np.sort(rng.uniform(0, duration, n))
    ids = rng.integers(0, num_landmarks, n)
    ids[:num_landmarks] = np.arange(num_landmarks)
    poses = state_poses(truth, bases, linear_mean, times)
    h = observe_batch(poses, lms[ids])
    z = h + noise * SIGMAS * rng.standard_normal((n, 2))
    measurements = []
    for i in range(n):
        kind = kinds[i % len(kinds)]
        rows = {"range": [0], "bearing": [1], "range_bearing": [0, 1]}[kind]
        value = z[i, rows]
        if kind != "range":
            value[-1] = wrap_angle(value[-1])
        measurements.append(Measurement(times[i], int(ids[i]), kind, value, np.diag(SIGMAS[rows] ** 2)))
    return truth, measurements, bases, config


def make_anchor(truth, bases, config, time=0.0):
    pose = state_poses(truth, bases, linear_mean, [time])[0]
    return PoseAnchor.from_config(time, pose, config)


def dense_system(state, measurements, bases, mean_fn, anchor=None):
    """Explicit A and g of the Gauss-Newton normal equations."""
    nw = state.num_weights
    size = state.size
    b = state.vector
    A = np.zeros((size, size))
    g = np.zeros(size)
    offsets = np.concatenate([[0], np.cumsum(state.block_sizes)])
    for m in measurements:
        phis = [F[0] for F in bases.features([m.time])]
        # Jacobian of the pose at time t with respect to the stacked vector
        dpose = np.zeros((3, size))
        for k in range(3):
            dpose[k, offsets[k] : offsets[k + 1]] = phis[k]
        pose = linear_mean([m.time])[0] + dpose @ b
        j = state.landmark_ids.index(m.landmark_id)
        dl = np.zeros((2, size))
        dl[:, nw + 2 * j : nw + 2 * j + 2] = np.eye(2)
        lm = b[nw + 2 * j : nw + 2 * j + 2]
        diff = lm - pose[:2]
        q = diff @ diff
        rho = np.sqrt(q)
        # analytic partials written out for this oracle
        H = np.array(
            [
                [-diff[0] / rho, -diff[1] / rho, 0.0, diff[0] / rho, diff[1] / rho],
                [diff[1] / q, -diff[0] / q, -1.0, -diff[1] / q, diff[0] / q],
            ]
        )
        h = np.array([rho, np.arctan2(diff[1], diff[0]) - pose[2]])
        rows = {"range": [0], "bearing": [1], "range_bearing": [0, 1]}[m.kind]
        J = H[rows] @ np.vstack([dpose, dl])
        r = m.value - h[rows]
        if m.kind != "range":
            r[-1] = wrap_angle(r[-1])
        Rinv = np.linalg.inv(m.noise_cov)
        A += J.T @ Rinv @ J
        g += J.T @ Rinv @ r
    P_inv = np.zeros((size, size))
    for k in range(3):
        P_inv[offsets[k] : offsets[k + 1], offsets[k] : offsets[k + 1]] = np.linalg.inv(state.weight_cov[k])
    for j, C in enumerate(state.landmark_cov):
        P_inv[nw + 2 * j : nw + 2 * j + 2, nw + 2 * j : nw + 2 * j + 2] = np.linalg.inv(C)
    A += P_inv
    g += P_inv @ (state.prior_mean - b)
    if anchor is not None:
        phis = [F[0] for F in bases.features([anchor.time])]
        for k in range(3):
            e = np.zeros(size)
            e[offsets[k] : offsets[k + 1]] = phis[k]
            ra = anchor.pose[k] - (linear_mean([anchor.time])[0, k] + e @ b)
            if k == 2:
                ra = wrap_angle(ra)
            A += np.outer(e, e) / anchor.std[k] ** 2
            g += e * ra / anchor.std[k] ** 2
    return A, g
