"""Coherence evaluation: per-modality classifiers, joint and cross coherence, chain dumps."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import MultimodalDataset, atomic_write
from .errors import ContractError
from .langevin import LangevinConfig, run_chains
from .nets import MlpParams, encoder_forward, init_params
from .optim import Adam
from .tensor import Tensor
from .trainer import ModelBundle, decode


@dataclass
class Classifier:
    """Softmax MLP for one modality, with its held-out accuracy."""

    mlp: MlpParams
    modality: int
    n_classes: int
    accuracy: float = float("nan")

    def logits(self, x) -> np.ndarray:
        with T.no_grad():
            return self.mlp.forward(Tensor._wrap(np.asarray(x, dtype=np.float64))).values

    def probabilities(self, x) -> np.ndarray:
        z = self.logits(x)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)


def _cross_entropy(mlp: MlpParams, x: np.ndarray, onehot: np.ndarray) -> Tensor:
    logits = mlp.forward(Tensor._wrap(x))
    picked = T.sum(T.mul(logits, Tensor._wrap(onehot)), axis=1)
    return T.mean(T.sub(T.logsumexp(logits, axis=1), picked))


def train_classifier(
    dataset: MultimodalDataset,
    modality: int,
    epochs: int,
    rng: np.random.Generator,
    heldout: MultimodalDataset | None = None,
    hidden: int = 32,
    lr: float = 1e-2,
    batch_size: int = 64,
) -> Classifier:
    """Fit a cross-entropy classifier on one modality of labeled data.

    Without ``heldout``, a fifth of ``dataset`` is set aside for the accuracy record.
    """
    if heldout is None:
        perm = rng.permutation(len(dataset))
        cut = max(1, len(dataset) // 5)
        heldout, dataset = dataset.subset(perm[:cut]), dataset.subset(perm[cut:])
    K = dataset.n_classes
    x = dataset.views[modality]
    mlp = init_params([x.shape[1], hidden, K], rng, "tanh")
    params = dict(mlp.named_parameters())
    opt = Adam(lr)
    onehot = np.eye(K)[dataset.labels]
    n = len(dataset)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for k in range(0, n, batch_size):
            idx = perm[k : k + batch_size]
            with T.Tape() as tape:
                loss = _cross_entropy(mlp, x[idx], onehot[idx])
            opt.step(params, dict(zip(params, tape.grad(loss, list(params.values())))))
    clf = Classifier(mlp, modality, K)
    clf.accuracy = float(np.mean(clf.predict(heldout.views[modality]) == heldout.labels)) if len(heldout) else float("nan")
    return clf


def train_classifiers(dataset, epochs, seed, heldout=None) -> list[Classifier]:
    return [
        train_classifier(dataset, i, epochs, np.random.default_rng([int(seed), i, 5]), heldout)
        for i in range(dataset.m)
    ]


def agreement_fraction(predictions) -> float:
    """Fraction of rows whose per-modality predicted classes all coincide."""
    p = np.asarray(predictions)
    if p.size == 0:
        return float("nan")
    if p.ndim == 1 or p.shape[1] == 1:
        return 1.0
    return float(np.mean((p == p[:, :1]).all(axis=1)))


def _factor_draws(model: ModelBundle, n: int, rng) -> list:
    if not model.w_dim:
        return [None] * model.m
    return [rng.standard_normal((n, model.w_dim)) for _ in range(model.m)]


def decode_all(model: ModelBundle, z: np.ndarray, factors=None) -> list[np.ndarray]:
    factors = factors if factors is not None else [None] * model.m
    with T.no_grad():
        return [decode(model, j, Tensor._wrap(z), factors[j]).values for j in range(model.m)]


def joint_coherence(model: ModelBundle, classifiers, n_samples: int, langevin: LangevinConfig, rng) -> float:
    """Share of prior samples whose decoded modalities all get the same predicted class."""
    if len(classifiers) != model.m:
        raise ContractError("need one classifier per modality")
    cfg = dataclasses.replace(langevin, n_chains=n_samples, seed=int(rng.integers(0, 2**63 - 1)), snapshot_steps=())
    z, _ = run_chains(model.prior, cfg)
    xs = decode_all(model, z.values, _factor_draws(model, n_samples, rng))
    preds = np.stack([c.predict(x) for c, x in zip(classifiers, xs)], axis=1)
    return agreement_fraction(preds)


def cross_coherence(model: ModelBundle, classifiers, dataset: MultimodalDataset, rng, sampled: bool = False):
    """Overall cross coherence and the ``[m x m]`` ordered-pair matrix (NaN diagonal).

    Entry ``(i, j)`` encodes modality ``i`` (posterior mean unless ``sampled``),
    decodes modality ``j`` and scores agreement with the true label.
    """
    m = model.m
    matrix = np.full((m, m), np.nan)
    n = len(dataset)
    with T.no_grad():
        for i in range(m):
            mu, lv = encoder_forward(model.encoders[i], Tensor._wrap(dataset.views[i]))
            z = mu.values
            if sampled:
                z = z + np.exp(0.5 * lv.values) * rng.standard_normal(z.shape)
            factors = _factor_draws(model, n, rng)
            for j in range(m):
                if j == i:
                    continue
                x = decode(model, j, Tensor._wrap(z), factors[j]).values
                matrix[i, j] = float(np.mean(classifiers[j].predict(x) == dataset.labels))
    off = matrix[~np.eye(m, dtype=bool)]
    return float(off.mean()), matrix


def mean_confidence(classifier: Classifier, x) -> float:
    """Mean top-class softmax probability."""
    return float(classifier.probabilities(x).max(axis=1).mean())


def chain_transition_dump(model: ModelBundle, langevin: LangevinConfig, path, rng, n_chains: int | None = None) -> dict:
    """Decode every modality at each snapshot of a Langevin run and write them out.

    Files are ``chain_s<step>_m<modality>.txt``: one decoded sample per line,
    space-separated. Returns ``{step: [array per modality]}``. Modality-specific
    factors, when present, are drawn once per chain and held fixed.
    """
    snaps = tuple(langevin.snapshot_steps)
    if not snaps or snaps[0] != 0 or snaps[-1] != langevin.steps:
        raise ContractError("snapshot_steps must start at 0 and end at the final step")
    n = n_chains or langevin.n_chains
    cfg = dataclasses.replace(langevin, n_chains=n, seed=int(rng.integers(0, 2**63 - 1)))
    _, trace = run_chains(model.prior, cfg)
    factors = _factor_draws(model, n, rng)
    out = {}
    for step, z in trace.snapshots:
        out[step] = decode_all(model, z, factors)
    if path is not None:
        root = Path(path)
        root.mkdir(parents=True, exist_ok=True)
        for step, views in out.items():
            for j, x in enumerate(views):
                text = "\n".join(" ".join("%.9g" % v for v in row) for row in x) + "\n"
                atomic_write(root / f"chain_s{step}_m{j}.txt", text)
    return out
