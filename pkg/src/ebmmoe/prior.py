"""Exponentially tilted latent prior ``exp(f(z)) p0(z) / Z``."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nets import EnergyNet, energy_forward
from .tensor import Tensor

REFERENCE_KINDS = ("standard_gaussian", "standard_laplace")
_LOG2 = float(np.log(2.0))


@dataclass(frozen=True)
class ReferenceDistribution:
    kind: str
    dim: int

    def __post_init__(self):
        if self.kind not in REFERENCE_KINDS:
            raise ValueError(f"unknown reference distribution {self.kind!r}")
        if self.dim < 1:
            raise ValueError("reference dimension must be positive")

    def log_density(self, z) -> Tensor:
        z = T.as_tensor(z)
        self._check(z)
        if self.kind == "standard_gaussian":
            zeros = Tensor._wrap(np.zeros(z.shape))
            ones = Tensor._wrap(np.ones(z.shape))
            return T.gaussian_log_density(z, zeros, ones)
        # |z| = relu(z) + relu(-z); the kink at 0 gets subgradient 0
        absz = T.add(T.relu(z), T.relu(T.mul(z, -1.0)))
        return T.sub(-self.dim * _LOG2, T.sum(absz, axis=-1))

    def grad_log_density(self, z: np.ndarray) -> np.ndarray:
        if self.kind == "standard_gaussian":
            return -z
        return -np.sign(z)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "standard_gaussian":
            return rng.standard_normal((n, self.dim))
        return rng.laplace(0.0, 1.0, size=(n, self.dim))

    def _check(self, z: Tensor) -> None:
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise DimensionError(f"expected latents [batch x {self.dim}], got {z.shape}")


def _fingerprint(energy: EnergyNet) -> str:
    h = hashlib.sha256()
    for _, p in energy.named_parameters():
        h.update(p.values.tobytes())
    return h.hexdigest()


@dataclass
class EbmPrior:
    energy: EnergyNet
    reference: ReferenceDistribution
    _partition: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.energy.in_dim != self.reference.dim:
            raise DimensionError(
                f"energy input extent {self.energy.in_dim} != reference dim {self.reference.dim}"
            )

    @property
    def dim(self) -> int:
        return self.reference.dim

    @property
    def log_partition_estimate(self) -> tuple[float, int] | None:
        """Cached ``(log Z, sample count)``, or ``None`` once the energy has changed."""
        if self._partition is None:
            return None
        value, n, stamp = self._partition
        if stamp != _fingerprint(self.energy):
            self._partition = None
            return None
        return value, n


def log_unnormalized_density(prior: EbmPrior, z) -> Tensor:
    """``f(z) + log p0(z)`` per row, i.e. ``log p(z) + log Z``."""
    z = T.as_tensor(z)
    prior.reference._check(z)
    f = T.reshape(energy_forward(prior.energy, z), (z.shape[0],))
    return T.add(f, prior.reference.log_density(z))


def grad_log_density_wrt_z(prior: EbmPrior, z) -> np.ndarray:
    """Gradient of the log prior density in ``z`` (log Z is constant and drops out)."""
    zv = T.as_tensor(z).values
    prior.reference._check(Tensor._wrap(zv))
    return prior.energy.input_gradient(zv) + prior.reference.grad_log_density(zv)


def grad_log_density_wrt_z_tape(prior: EbmPrior, z) -> np.ndarray:
    """Same gradient, obtained by differentiating ``log_unnormalized_density`` on a tape."""
    zt = Tensor(T.as_tensor(z).values, requires_grad=True)
    with T.Tape() as tape:
        total = T.sum(log_unnormalized_density(prior, zt))
    return tape.grad(total, [zt])[0]


def estimate_log_partition(prior: EbmPrior, n_samples: int, rng: np.random.Generator, chunk: int = 65536) -> float:
    """Monte-Carlo ``log E_p0[exp f(z)]`` with a running, rescaled log-sum-exp."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    top, scaled = -np.inf, 0.0
    done = 0
    with T.no_grad():
        while done < n_samples:
            k = min(chunk, n_samples - done)
            z = prior.reference.sample(k, rng)
            f = energy_forward(prior.energy, Tensor._wrap(z)).values[:, 0]
            new_top = max(top, float(f.max()))
            scaled = scaled * np.exp(top - new_top) + np.exp(f - new_top).sum()
            top = new_top
            done += k
    value = float(top + np.log(scaled) - np.log(n_samples))
    prior._partition = (value, n_samples, _fingerprint(prior.energy))
    return value
