"""Reference GP regression: the dense function-space posterior and the
low-rank weight-space counterpart built on random Fourier features.

These routines validate the feature machinery on small problems; the SLAM
estimator never forms an N x N kernel matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import InvalidArgument, NumericalFailure

_JITTERS = (1e-10, 1e-9, 1e-8, 1e-7, 1e-6)


@dataclass
class GpDataset:
    inputs: np.ndarray  # (N, d)
    outputs: np.ndarray  # (N,)
    noise_variance: float

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if x.shape[0] != y.shape[0]:
            raise InvalidArgument(f"{x.shape[0]} inputs but {y.shape[0]} outputs")
        if self.noise_variance < 0:
            raise InvalidArgument("noise_variance must be >= 0")
        self.inputs, self.outputs = x, y


@dataclass(frozen=True)
class GpPosterior:
    mean: float
    variance: float


def _gram(kernel, a, b):
    return np.array([[kernel(ai, bj) for bj in b] for ai in a]).reshape(len(a), len(b))


def _cholesky_with_jitter(K):
    try:
        return linalg.cho_factor(K, lower=True)
    except linalg.LinAlgError:
        pass
    scale = max(float(np.mean(np.diag(K))), 1.0)
    for jitter in _JITTERS:
        try:
            factor = linalg.cho_factor(K + jitter * scale * np.eye(len(K)), lower=True)
        except linalg.LinAlgError:
            continue
        warnings.warn(f"kernel matrix needed jitter {jitter:g} to factorize", RuntimeWarning)
        return factor
    raise NumericalFailure(
        f"kernel matrix of size {len(K)} is not positive definite even with jitter {_JITTERS[-1]:g}"
    )


def exact_posterior(
    data: GpDataset,
    kernel: Callable,
    mean_fn: Callable,
    query,
) -> GpPosterior:
    """Closed-form GP posterior mean and variance at ``query``.

    ``kernel(a, b)`` and ``mean_fn(a)`` take single input vectors.
    """
    q = np.atleast_1d(np.asarray(query, dtype=float))
    prior_var = float(kernel(q, q))
    n = len(data.outputs)
    if n == 0:
        return GpPosterior(float(mean_fn(q)), prior_var)

    X = data.inputs
    if data.noise_variance == 0.0 and len(np.unique(X, axis=0)) < n:
        raise NumericalFailure(
            "kernel matrix is singular: duplicate inputs with zero noise variance"
        )
    K = _gram(kernel, X, X) + data.noise_variance * np.eye(n)
    factor = _cholesky_with_jitter(K)
    k_star = _gram(kernel, [q], X)[0]
    mu = np.array([mean_fn(x) for x in X], dtype=float)
    alpha = linalg.cho_solve(factor, data.outputs - mu)
    v = linalg.cho_solve(factor, k_star)
    mean = float(mean_fn(q)) + float(k_star @ alpha)
    variance = max(prior_var - float(k_star @ v), 0.0)
    return GpPosterior(mean, variance)


def woodbury_apply(feature_matrix, noise_variance: float, v) -> np.ndarray:
    """Return (Psi Psi^T + s2 I)^{-1} v through the D x D inner system."""
    if not noise_variance > 0:
        raise InvalidArgument("noise_variance must be positive for the Woodbury identity")
    psi = np.asarray(feature_matrix, dtype=float)
    v = np.asarray(v, dtype=float)
    inner = noise_variance * np.eye(psi.shape[1]) + psi.T @ psi
    correction = psi @ linalg.solve(inner, psi.T @ v, assume_a="pos")
    return (v - correction) / noise_variance


def feature_posterior(data: GpDataset, basis, mean_fn: Callable, query) -> GpPosterior:
    """Weight-space posterior with weights ~ N(0, I) on the features of ``basis``.

    Equals :func:`exact_posterior` with the kernel ``phi(x)^T phi(y)``.
    """
    q = np.atleast_1d(np.asarray(query, dtype=float))
    phi_q = basis.matrix(q[None, :])[0]
    if len(data.outputs) == 0:
        return GpPosterior(float(mean_fn(q)), float(phi_q @ phi_q))
    if not data.noise_variance > 0:
        raise InvalidArgument("weight-space posterior needs a positive noise variance")
    psi = basis.matrix(data.inputs)
    mu = np.array([mean_fn(x) for x in data.inputs], dtype=float)
    s2 = data.noise_variance
    inner = psi.T @ psi + s2 * np.eye(psi.shape[1])
    factor = linalg.cho_factor(inner, lower=True)
    w_mean = linalg.cho_solve(factor, psi.T @ (data.outputs - mu))
    mean = float(mean_fn(q)) + float(phi_q @ w_mean)
    variance = s2 * float(phi_q @ linalg.cho_solve(factor, phi_q))
    return GpPosterior(mean, variance)
