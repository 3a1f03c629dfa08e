"""Short-run unadjusted Langevin dynamics on the latent prior."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NonFiniteError, SamplerDivergence
from .prior import EbmPrior, grad_log_density_wrt_z
from .tensor import Tensor


@dataclass
class LangevinConfig:
    steps: int = 50
    step_size: float = 0.1
    n_chains: int = 64
    snapshot_steps: tuple = ()
    seed: int = 0

    def __post_init__(self):
        self.snapshot_steps = tuple(int(s) for s in self.snapshot_steps)
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if not self.step_size > 0:
            raise ContractError("step_size must be positive")
        if self.n_chains < 1:
            raise ContractError("n_chains must be >= 1")
        snaps = self.snapshot_steps
        if any(b <= a for a, b in zip(snaps, snaps[1:])):
            raise ContractError("snapshot_steps must be strictly increasing")
        if snaps and (snaps[0] < 0 or snaps[-1] > self.steps):
            raise ContractError(f"snapshot_steps must lie in [0, {self.steps}]")


@dataclass
class ChainTrace:
    snapshots: list = field(default_factory=list)

    @property
    def steps(self) -> list[int]:
        return [t for t, _ in self.snapshots]

    def at(self, step: int) -> np.ndarray:
        for t, z in self.snapshots:
            if t == step:
                return z
        raise KeyError(step)


def _update(prior: EbmPrior, z: np.ndarray, s: float, eps: np.ndarray, step=None) -> np.ndarray:
    try:
        drift = grad_log_density_wrt_z(prior, z)
    except NonFiniteError as exc:
        raise SamplerDivergence(exc.row if exc.row is not None else 0, step) from exc
    with np.errstate(over="ignore", invalid="ignore"):
        out = z + 0.5 * s * s * drift + s * eps
    bad = ~np.isfinite(out).all(axis=1)
    if bad.any():
        raise SamplerDivergence(int(np.flatnonzero(bad)[0]), step)
    return out


def langevin_step(prior: EbmPrior, z, s: float, rng: np.random.Generator) -> Tensor:
    """One step ``z + (s^2/2) grad log p(z) + s * eps``; returns a new tensor."""
    if not s > 0:
        raise ContractError("step size must be positive")
    zv = z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    eps = rng.standard_normal(zv.shape)
    return Tensor._wrap(_update(prior, zv, s, eps))


def chain_streams(seed: int, chain_ids, steps: int, prior: EbmPrior):
    """Initial states and per-step noise; chain ``c`` draws only from stream ``(seed, c)``."""
    d = prior.dim
    z0 = np.empty((len(chain_ids), d))
    noise = np.empty((len(chain_ids), steps, d))
    for row, c in enumerate(chain_ids):
        g = np.random.default_rng([int(seed), int(c)])
        z0[row] = prior.reference.sample(1, g)[0]
        noise[row] = g.standard_normal((steps, d))
    return z0, noise


def run_chains(prior: EbmPrior, config: LangevinConfig, init=None, chain_ids=None):
    """Advance ``n_chains`` chains from p0 by ``config.steps`` Langevin updates.

    Returns the final untracked latents and the requested snapshots. Passing
    ``init`` and ``chain_ids`` overrides the starting states while keeping each
    chain's noise tied to its id.
    """
    if chain_ids is None:
        chain_ids = np.arange(config.n_chains if init is None else len(init))
    z, noise = chain_streams(config.seed, chain_ids, config.steps, prior)
    if init is not None:
        z = np.array(init.values if isinstance(init, Tensor) else init, dtype=np.float64)
    wanted = set(config.snapshot_steps)
    trace = ChainTrace()
    if 0 in wanted:
        trace.snapshots.append((0, z.copy()))
    s = config.step_size
    for t in range(config.steps):
        z = _update(prior, z, s, noise[:, t, :], step=t)
        if t + 1 in wanted:
            trace.snapshots.append((t + 1, z.copy()))
    return Tensor._wrap(z), trace
