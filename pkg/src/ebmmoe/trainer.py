"""Joint variational training of encoders, generators and the latent energy prior.

One iteration (:func:`train_step`) draws one reparameterized latent per expert,
draws fresh short-run Langevin samples from the prior, takes an Adam step on
the encoder/generator parameters against the negative objective, and then an
Adam step on the energy parameters along the two-phase gradient
``E_q[df] - E_prior[df]``.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import MultimodalDataset, minibatches
from .errors import ContractError, DimensionError, NonFiniteError, SamplerDivergence, TrainingDivergence
from .langevin import LangevinConfig, run_chains
from .moe import PosteriorBundle, mixture_log_density, sample_per_expert
from .nets import EncoderNet, EnergyNet, GeneratorNet, encoder_forward, energy_forward, make_encoder, make_energy, make_generator
from .optim import Adam
from .prior import EbmPrior, ReferenceDistribution, estimate_log_partition, log_unnormalized_density
from .tensor import Tensor

METRIC_COLUMNS = ("iter", "elbo", "recon_mean", "prior_term", "entropy_term", "grad_norm_model", "grad_norm_ebm", "wall_ms")


@dataclass
class ArchSpec:
    latent_dim: int = 2
    hidden: int = 64
    hidden_layers: int = 2
    activation: str = "tanh"
    energy_hidden: int = 64
    energy_layers: int = 4
    energy_activation: str = "softplus"
    energy_output_bound: float = 5.0
    observation_variance: float = 1.0
    reference: str = "standard_gaussian"
    w_dim: int = 0


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 64
    lr_model: float = 1e-3
    lr_ebm: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    langevin: LangevinConfig = field(default_factory=LangevinConfig)
    seed: int = 0
    extension_enabled: bool = False
    freeze_energy: bool = False
    checkpoint_every: int = 0
    partition_samples: int = 256
    record_wall_clock: bool = False

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.lr_model < 0 or self.lr_ebm < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass
class ModelBundle:
    prior: EbmPrior
    generators: list
    encoders: list
    w_encoders: list | None = None

    def __post_init__(self):
        if len(self.generators) != len(self.encoders) or not self.generators:
            raise DimensionError("need one generator and one encoder per modality")
        d = self.prior.dim
        for i, (g, e) in enumerate(zip(self.generators, self.encoders)):
            if e.latent_dim != d or g.in_dim != d + self.w_dim:
                raise DimensionError(f"modality {i}: latent extents disagree with the prior (d={d})")
            if g.out_dim != e.in_dim:
                raise DimensionError(f"modality {i}: generator emits {g.out_dim}, encoder reads {e.in_dim}")

    @property
    def m(self) -> int:
        return len(self.generators)

    @property
    def latent_dim(self) -> int:
        return self.prior.dim

    @property
    def w_dim(self) -> int:
        return self.w_encoders[0].latent_dim if self.w_encoders else 0

    def model_parameters(self) -> dict:
        out = {}
        for i, (g, e) in enumerate(zip(self.generators, self.encoders)):
            out.update(g.named_parameters(f"generator{i}."))
            out.update(e.named_parameters(f"encoder{i}."))
        for i, e in enumerate(self.w_encoders or []):
            out.update(e.named_parameters(f"w_encoder{i}."))
        return out

    def energy_parameters(self) -> dict:
        return dict(self.prior.energy.named_parameters("energy."))

    def parameters(self) -> dict:
        return {**self.energy_parameters(), **self.model_parameters()}


def build_model(dims, arch: ArchSpec, seed: int, freeze_energy: bool = False) -> ModelBundle:
    """Initialize a model for modalities of extents ``dims``.

    Every network draws from its own ``(seed, role, index)`` stream, so turning
    the extension on changes only the generators' first layers.
    """
    seed = int(seed)
    d, dw = arch.latent_dim, arch.w_dim
    stream = lambda *key: np.random.default_rng([seed, 11, *key])  # noqa: E731
    energy = make_energy(d, arch.energy_hidden, arch.energy_layers, stream(0), arch.energy_activation, arch.energy_output_bound)
    if freeze_energy:
        energy.zero_output()
    prior = EbmPrior(energy, ReferenceDistribution(arch.reference, d))
    encoders = [make_encoder(D, d, arch.hidden, arch.hidden_layers, stream(1, i), arch.activation) for i, D in enumerate(dims)]
    generators = [
        make_generator(d + dw, D, arch.hidden, arch.hidden_layers, stream(2, i), arch.activation, arch.observation_variance)
        for i, D in enumerate(dims)
    ]
    w_encoders = None
    if dw > 0:
        w_encoders = [make_encoder(D, dw, arch.hidden, arch.hidden_layers, stream(3, i), arch.activation) for i, D in enumerate(dims)]
    return ModelBundle(prior, generators, encoders, w_encoders)


# ------------------------------------------------------------------ objective


@dataclass
class ElboTerms:
    """Per-expert terms, each a ``[batch]`` tensor, plus the scalar objective.

    ``recon[i][j]`` is ``log p(x_j | z_i)`` (self-reconstruction when
    ``i == j``). ``w_prior`` and ``neg_logq_w`` are empty without the
    modality-specific extension.
    """

    draws: list
    recon: list
    prior_term: list
    neg_mixture_logq: list
    w_prior: list
    neg_logq_w: list
    objective: Tensor

    @property
    def m(self) -> int:
        return len(self.draws)

    def self_recon(self, i):
        return self.recon[i][i]

    def cross_recon(self, i):
        return {j: r for j, r in enumerate(self.recon[i]) if j != i}

    def summary(self) -> dict:
        m = self.m
        recon = sum(float(np.mean(sum(r.values for r in row))) for row in self.recon) / m
        prior = sum(float(p.values.mean()) for p in self.prior_term) / m
        ent = sum(float(q.values.mean()) for q in self.neg_mixture_logq) / m
        return {"elbo": float(self.objective.values), "recon_mean": recon, "prior_term": prior, "entropy_term": ent}


def _gauss_obs(x: np.ndarray, mean: Tensor, variance: float) -> Tensor:
    return T.gaussian_log_density(Tensor._wrap(x), mean, Tensor._wrap(np.full(x.shape, variance)))


def decode(model: ModelBundle, j: int, z, w=None) -> Tensor:
    """Generator mean for modality ``j``; ``w`` is required iff the extension is on."""
    z = T.as_tensor(z)
    if model.w_dim:
        if w is None:
            raise ContractError("extension enabled: decode needs a modality-specific factor")
        z = T.concat([z, T.as_tensor(w)], axis=1)
    return model.generators[j].mlp.forward(z)


def elbo_terms(model: ModelBundle, batch, rng: np.random.Generator, eps=None) -> ElboTerms:
    """Evaluate the per-expert objective terms on one batch.

    ``batch`` is a list of ``[n x D_i]`` arrays. ``eps`` optionally fixes the
    latent noise (list of arrays, one per expert) for common random numbers.
    """
    if len(batch) != model.m:
        raise DimensionError(f"batch has {len(batch)} modalities, model has {model.m}")
    xs = [np.asarray(x, dtype=np.float64) for x in batch]
    posts = [encoder_forward(e, Tensor._wrap(x)) for e, x in zip(model.encoders, xs)]
    bundle = PosteriorBundle([p[0] for p in posts], [p[1] for p in posts])
    draws = sample_per_expert(bundle, rng, eps)
    m, n, dw = model.m, xs[0].shape[0], model.w_dim

    w_self, w_prior, neg_logq_w = [None] * m, [], []
    if dw:
        wref = ReferenceDistribution("standard_gaussian", dw)
        for i, (enc, x) in enumerate(zip(model.w_encoders, xs)):
            mu, lv = encoder_forward(enc, Tensor._wrap(x))
            var = T.exp(lv)
            w = T.add(mu, T.mul(T.exp(T.mul(lv, 0.5)), Tensor._wrap(rng.standard_normal(mu.shape))))
            w_self[i] = w
            w_prior.append(wref.log_density(w))
            neg_logq_w.append(T.mul(T.gaussian_log_density(w, mu, var), -1.0))

    recon, prior_term, neg_q = [], [], []
    for i, z in enumerate(draws):
        row = []
        for j in range(m):
            if dw:
                w = w_self[i] if i == j else Tensor._wrap(rng.standard_normal((n, dw)))
            else:
                w = None
            mean = decode(model, j, z, w)
            row.append(_gauss_obs(xs[j], mean, model.generators[j].observation_variance))
        recon.append(row)
        prior_term.append(log_unnormalized_density(model.prior, z))
        neg_q.append(T.mul(mixture_log_density(bundle, z), -1.0))

    per_expert = []
    for i in range(m):
        parts = recon[i] + [prior_term[i], neg_q[i]]
        if dw:
            parts += [w_prior[i], neg_logq_w[i]]
        total = parts[0]
        for p in parts[1:]:
            total = T.add(total, p)
        per_expert.append(total)
    objective = T.mean(T.stack(per_expert, axis=0))
    if not np.isfinite(objective.values):
        raise NonFiniteError("objective")
    return ElboTerms(draws, recon, prior_term, neg_q, w_prior, neg_logq_w, objective)


def objective_forms(terms: ElboTerms) -> tuple[np.ndarray, np.ndarray]:
    """The per-sample objective in two groupings, as ``[batch]`` arrays.

    The first sums log joint minus log posterior inside each expert's
    expectation; the second is mean reconstruction minus the mean
    posterior-to-prior log ratio.
    """
    m = terms.m
    joint_form = 0.0
    recon_part = 0.0
    ratio_part = 0.0
    for i in range(m):
        log_joint = sum(r.values for r in terms.recon[i]) + terms.prior_term[i].values
        log_q = -terms.neg_mixture_logq[i].values
        joint_form = joint_form + (log_joint - log_q)
        recon_part = recon_part + sum(r.values for r in terms.recon[i])
        ratio_part = ratio_part + (log_q - terms.prior_term[i].values)
    return joint_form / m, recon_part / m - ratio_part / m


def grad_model(model: ModelBundle, batch, rng: np.random.Generator, eps=None) -> tuple[dict, ElboTerms]:
    """Gradients of the negative objective for every encoder/generator parameter."""
    params = model.model_parameters()
    with T.Tape() as tape:
        terms = elbo_terms(model, batch, rng, eps)
        loss = T.mul(terms.objective, -1.0)
    grads = tape.grad(loss, list(params.values()))
    out = {}
    for (name, _), g in zip(params.items(), grads):
        if not np.isfinite(g).all():
            raise NonFiniteError(f"gradient of {name}")
        out[name] = g
    return out, terms


def _energy_of(source) -> EnergyNet:
    if isinstance(source, ModelBundle):
        return source.prior.energy
    if isinstance(source, EbmPrior):
        return source.energy
    return source


def _stack_latents(z) -> np.ndarray:
    if isinstance(z, (list, tuple)):
        parts = [p.values if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64) for p in z]
        return np.concatenate(parts, axis=0) if parts else np.empty((0, 0))
    return z.values if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)


def grad_ebm(model, positive_z, negative_z) -> dict:
    """Ascent direction for the energy: mean df/dparam on posterior draws minus on prior draws.

    Sample coordinates are treated as constants.
    """
    energy = _energy_of(model)
    pos, neg = _stack_latents(positive_z), _stack_latents(negative_z)
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ContractError("grad_ebm needs non-empty positive and negative samples")
    params = dict(energy.named_parameters("energy."))
    with T.Tape() as tape:
        gain = T.sub(
            T.mean(energy_forward(energy, Tensor._wrap(pos))),
            T.mean(energy_forward(energy, Tensor._wrap(neg))),
        )
    grads = tape.grad(gain, list(params.values()))
    return dict(zip(params, grads))


# ---------------------------------------------------------------------- loop


@dataclass
class IterationRecord:
    iteration: int
    elbo: float
    recon_mean: float
    prior_term: float
    entropy_term: float
    grad_norm_model: float
    grad_norm_ebm: float
    wall_ms: float
    normalized_elbo: float | None = None

    def row(self) -> list:
        return [getattr(self, c if c != "iter" else "iteration") for c in METRIC_COLUMNS]


@dataclass
class RunMetrics:
    seed: int
    config_digest: str = ""
    records: list = field(default_factory=list)
    coherence: list = field(default_factory=list)

    def csv_lines(self, records=None) -> list[str]:
        out = []
        for r in self.records if records is None else records:
            vals = r.row()
            out.append(",".join([str(vals[0])] + [repr(float(v)) for v in vals[1:]]))
        return out


def make_optimizers(config: TrainConfig) -> dict:
    return {
        "model": Adam(config.lr_model, config.betas, config.eps),
        "ebm": Adam(config.lr_ebm, config.betas, config.eps),
    }


def _norm(grads: dict) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def _step(model, batch, optimizers, config, rng, iteration):
    start = time.perf_counter()
    try:
        grads, terms = grad_model(model, batch, rng)
        positive = [z.values for z in terms.draws]
        negative = None
        if not config.freeze_energy:
            seed = int(rng.integers(0, 2**63 - 1))
            lcfg = dataclasses.replace(config.langevin, seed=seed, snapshot_steps=())
            negative, _ = run_chains(model.prior, lcfg)
        optimizers["model"].step(model.model_parameters(), grads)
        ebm_norm = 0.0
        if negative is not None:
            ascent = grad_ebm(model, positive, negative)
            ebm_norm = _norm(ascent)
            optimizers["ebm"].step(model.energy_parameters(), {k: -g for k, g in ascent.items()})
    except (NonFiniteError, SamplerDivergence) as exc:
        raise TrainingDivergence(iteration, str(exc)) from exc
    for name, p in model.parameters().items():
        if not np.isfinite(p.values).all():
            raise TrainingDivergence(iteration, f"parameter {name} became non-finite")
    s = terms.summary()
    wall = (time.perf_counter() - start) * 1e3 if config.record_wall_clock else 0.0
    return IterationRecord(iteration, s["elbo"], s["recon_mean"], s["prior_term"], s["entropy_term"], _norm(grads), ebm_norm, wall)


def train_step(model: ModelBundle, batch, optimizers: dict, config: TrainConfig, rng, iteration: int = 0) -> IterationRecord:
    """Posterior sampling, prior sampling, encoder/generator update, energy update."""
    if model.w_dim:
        raise ContractError("model carries modality-specific factors; use train_step_extended")
    return _step(model, batch, optimizers, config, rng, iteration)


def train_step_extended(model: ModelBundle, batch, optimizers: dict, config: TrainConfig, rng, iteration: int = 0) -> IterationRecord:
    """:func:`train_step` for models whose generators also read a per-modality factor.

    Each modality's own factor is inferred by its factor encoder; factors for
    cross-reconstruction are drawn from the standard Gaussian factor prior.
    """
    if not config.extension_enabled:
        raise ContractError("train_step_extended needs extension_enabled")
    return _step(model, batch, optimizers, config, rng, iteration)


def train_loop(
    model: ModelBundle,
    dataset: MultimodalDataset,
    config: TrainConfig,
    start_iteration: int = 0,
    optimizers: dict | None = None,
    checkpoint_fn=None,
    on_record=None,
    metrics: RunMetrics | None = None,
):
    """Run iterations ``start_iteration .. config.iterations - 1``.

    Minibatches and per-iteration noise derive from ``(seed, iteration)``, so a
    run resumed from a checkpoint replays the uninterrupted run exactly.
    ``checkpoint_fn(iteration_done, optimizers)`` returns the checkpoint path.
    """
    if len(dataset) == 0:
        raise ContractError("dataset is empty")
    optimizers = optimizers or make_optimizers(config)
    metrics = metrics or RunMetrics(seed=config.seed)
    step = train_step_extended if config.extension_enabled else train_step
    n = len(dataset)
    per_epoch = max(n // config.batch_size, 1)
    epoch_batches, epoch_cached = None, -1
    last_checkpoint = None
    for t in range(start_iteration, config.iterations):
        epoch = t // per_epoch
        if epoch != epoch_cached:
            epoch_batches, epoch_cached = minibatches(n, config.batch_size, config.seed, epoch), epoch
        idx = epoch_batches[t % per_epoch]
        batch = [v[idx] for v in dataset.views]
        rng = np.random.default_rng([int(config.seed), t, 0])
        logz = 0.0
        if not config.freeze_energy:
            logz = estimate_log_partition(model.prior, config.partition_samples, np.random.default_rng([int(config.seed), t, 2]))
        try:
            record = step(model, batch, optimizers, config, rng, t)
        except TrainingDivergence as exc:
            raise TrainingDivergence(t, str(exc.__cause__ or exc), last_checkpoint) from exc
        record.normalized_elbo = record.elbo - logz
        metrics.records.append(record)
        if on_record is not None:
            on_record(record)
        if checkpoint_fn is not None and config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
            last_checkpoint = checkpoint_fn(t + 1, optimizers)
    return model, metrics, optimizers
