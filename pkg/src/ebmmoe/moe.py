"""Uniform mixture of per-modality Gaussian experts as the joint posterior."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


@dataclass
class PosteriorBundle:
    means: list
    logvars: list

    def __post_init__(self):
        shapes = {m.shape for m in self.means} | {v.shape for v in self.logvars}
        if len(self.means) != len(self.logvars) or not self.means:
            raise DimensionError("need one (mean, logvar) pair per expert")
        if len(shapes) != 1:
            raise DimensionError(f"experts disagree on [batch x d]: {sorted(shapes)}")

    @property
    def m(self) -> int:
        return len(self.means)

    @property
    def batch(self) -> int:
        return self.means[0].shape[0]

    @property
    def dim(self) -> int:
        return self.means[0].shape[1]


def sample_per_expert(bundle: PosteriorBundle, rng: np.random.Generator, eps=None) -> list:
    """One reparameterized draw per expert: ``mu + exp(logvar / 2) * eps``.

    ``eps`` (a list of arrays) fixes the noise, for common-random-number checks.
    """
    draws = []
    for i, (mu, logvar) in enumerate(zip(bundle.means, bundle.logvars)):
        e = rng.standard_normal(mu.shape) if eps is None else eps[i]
        std = T.exp(T.mul(logvar, 0.5))
        draws.append(T.add(mu, T.mul(std, Tensor._wrap(np.asarray(e, dtype=np.float64)))))
    return draws


def expert_log_densities(bundle: PosteriorBundle, z) -> list:
    z = T.as_tensor(z)
    if z.shape != bundle.means[0].shape:
        raise DimensionError(f"latents {z.shape} do not match experts {bundle.means[0].shape}")
    return [T.gaussian_log_density(z, mu, T.exp(lv)) for mu, lv in zip(bundle.means, bundle.logvars)]


def mixture_log_density(bundle: PosteriorBundle, z) -> Tensor:
    """``log (1/m) sum_i N(z; mu_i, diag exp(logvar_i))`` per row."""
    parts = expert_log_densities(bundle, z)
    if len(parts) == 1:
        return parts[0]
    return T.logsumexp(T.stack(parts, axis=1), axis=1, average=True)
