"""Random Fourier features for the RBF kernel.

Frequencies are drawn from the RBF spectral density N(0, I / lengthscale**2)
with ``numpy.random.default_rng(seed)`` (PCG64), so a basis is fully
determined by ``(num_features, lengthscale, input_dim, seed)``.

The feature map pairs each frequency with a cosine and a sine entry::

    phi(x) = sqrt(2 / D) * [cos(w_1 x), sin(w_1 x), ..., cos(w_{D/2} x), sin(w_{D/2} x)]

which gives ``||phi(x)||^2 == 1`` for every input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument


@dataclass(frozen=True, eq=False)
class FeatureBasis:
    frequencies: np.ndarray  # (D/2, input_dim)
    num_features: int
    lengthscale: float
    seed: int

    def __post_init__(self):
        freqs = np.atleast_2d(np.asarray(self.frequencies, dtype=float))
        if self.num_features < 2 or self.num_features % 2:
            raise InvalidArgument(f"num_features must be even and >= 2, got {self.num_features}")
        if freqs.shape[0] != self.num_features // 2:
            raise InvalidArgument(
                f"expected {self.num_features // 2} frequency rows, got {freqs.shape[0]}"
            )
        freqs.setflags(write=False)
        object.__setattr__(self, "frequencies", freqs)

    @property
    def input_dim(self) -> int:
        return self.frequencies.shape[1]

    def __call__(self, inputs) -> np.ndarray:
        return self.matrix(inputs)

    def matrix(self, inputs) -> np.ndarray:
        """Stack feature vectors for a batch of inputs.

        ``inputs`` of shape (N,) is read as N scalar inputs when the basis is
        one-dimensional; otherwise shape (N, input_dim) is required.
        Returns an (N, D) array.
        """
        x = np.asarray(inputs, dtype=float)
        if x.ndim == 0:
            x = x.reshape(1, 1)
        elif x.ndim == 1:
            x = x[:, None] if self.input_dim == 1 else x[None, :]
        if x.shape[1] != self.input_dim:
            raise InvalidArgument(
                f"input dimension {x.shape[1]} does not match basis dimension {self.input_dim}"
            )
        phase = x @ self.frequencies.T
        out = np.empty((x.shape[0], self.num_features))
        out[:, 0::2] = np.cos(phase)
        out[:, 1::2] = np.sin(phase)
        out *= np.sqrt(2.0 / self.num_features)
        return out

    def to_dict(self) -> dict:
        return {
            "num_features": self.num_features,
            "lengthscale": self.lengthscale,
            "seed": self.seed,
            "frequencies": self.frequencies.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "FeatureBasis":
        return cls(
            frequencies=np.asarray(data["frequencies"], dtype=float),
            num_features=int(data["num_features"]),
            lengthscale=float(data["lengthscale"]),
            seed=int(data["seed"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "FeatureBasis":
        return cls.from_dict(json.loads(text))


def sample_frequencies(num_features: int, lengthscale: float, input_dim: int = 1, seed: int = 0) -> FeatureBasis:
    """Draw ``num_features / 2`` frequency vectors from N(0, I / lengthscale**2)."""
    if int(num_features) != num_features or num_features < 2 or num_features % 2:
        raise InvalidArgument(f"num_features must be an even integer >= 2, got {num_features}")
    if not np.isfinite(lengthscale) or lengthscale <= 0:
        raise InvalidArgument(f"lengthscale must be positive, got {lengthscale}")
    if input_dim < 1:
        raise InvalidArgument(f"input_dim must be positive, got {input_dim}")
    rng = np.random.default_rng(seed)
    freqs = rng.standard_normal((int(num_features) // 2, int(input_dim))) / lengthscale
    return FeatureBasis(freqs, int(num_features), float(lengthscale), int(seed))


def feature_map(x, basis: FeatureBasis) -> np.ndarray:
    """Feature vector of a single input (length D)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1 or x.shape[0] != basis.input_dim:
        raise InvalidArgument(
            f"input of shape {x.shape} does not match basis dimension {basis.input_dim}"
        )
    return basis.matrix(x[None, :])[0]


def approx_kernel(x, y, basis: FeatureBasis) -> float:
    return float(feature_map(x, basis) @ feature_map(y, basis))


def rbf_kernel(x, y, lengthscale: float) -> float:
    """Closed-form unit-variance RBF kernel (reference for the approximation)."""
    diff = np.atleast_1d(np.asarray(x, dtype=float)) - np.atleast_1d(np.asarray(y, dtype=float))
    return float(np.exp(-0.5 * np.dot(diff, diff) / lengthscale**2))
