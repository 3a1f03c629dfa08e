"""Command-line entry points: ``gen-data``, ``train``, ``eval``, ``ablate``, ``chain-viz``.

Exit codes: 0 success, 2 config error, 3 IO error, 4 training divergence,
5 checkpoint or artifact mismatch.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .coherence import Classifier, chain_transition_dump, cross_coherence, joint_coherence, train_classifiers
from .config import ConfigError, RunConfig, load_config
from .data import MultimodalDataset, atomic_write, generate, load_dataset, save_dataset
from .errors import ArtifactMismatch, ContractError, DatasetParseError, TrainingDivergence
from .nets import MlpParams
from .prior import estimate_log_partition
from .tensor import Tensor
from .trainer import METRIC_COLUMNS, ModelBundle, RunMetrics, build_model, elbo_terms, make_optimizers, train_loop

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5
METRICS_FLUSH_EVERY = 50


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- helpers


def effective_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.eval.seed = args.seed
        cfg.ablation.seeds = (args.seed,)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.freeze_energy:
        cfg.train.freeze_energy = True
    if args.extension:
        cfg.train.extension_enabled = True
    if cfg.model.w_dim and not cfg.train.extension_enabled:
        raise ConfigError("model.w_dim > 0 needs train.extension_enabled (or --extension)")
    return cfg


def resume_digest(cfg: RunConfig) -> str:
    """Digest of everything that shapes a training trajectory.

    The iteration budget and output location are left out, so a run can be
    resumed into a longer budget or a copied directory.
    """
    d = cfg.to_dict()
    d["train"] = {k: v for k, v in d["train"].items() if k not in ("iterations", "checkpoint_every")}
    for key in ("out_dir", "eval", "ablation"):
        d.pop(key)
    d["langevin"] = {k: v for k, v in d["langevin"].items() if k != "snapshot_steps"}
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def load_splits(cfg: RunConfig) -> tuple[MultimodalDataset, MultimodalDataset]:
    root = cfg.data_dir()
    try:
        return load_dataset(root / "train.mmds"), load_dataset(root / "test.mmds")
    except FileNotFoundError:
        raise CliFailure(EXIT_IO, f"dataset not found under {root}; run gen-data first") from None
    except DatasetParseError as exc:
        raise CliFailure(EXIT_IO, f"dataset under {root} is malformed: {exc}") from None


def metrics_text(records) -> str:
    return ",".join(METRIC_COLUMNS) + "\n" + "".join(line + "\n" for line in RunMetrics(0).csv_lines(records))


def read_metric_records(path: Path, upto: int) -> list[str]:
    """Rows of an existing metrics CSV with iteration < ``upto`` (for resume)."""
    if not path.exists():
        return []
    lines = path.read_text(encoding="utf-8").splitlines()[1:]
    return [ln for ln in lines if ln and int(ln.split(",", 1)[0]) < upto]


def open_model(cfg: RunConfig, dims, path) -> tuple[ModelBundle, dict]:
    model = build_model(dims, cfg.model, cfg.train.seed)
    path = Path(path)
    if not (path / "manifest.json").exists() or not (path / "payload.bin").exists():
        raise CliFailure(EXIT_MISMATCH, f"no checkpoint at {path}")
    manifest = ckpt.load_checkpoint(path, model, None)
    return model, manifest


# ----------------------------------------------------------- classifiers


def _classifier_to_dict(c: Classifier) -> dict:
    return {
        "modality": c.modality,
        "n_classes": c.n_classes,
        "accuracy": c.accuracy,
        "hidden_activation": c.mlp.hidden_activation,
        "output_activation": c.mlp.output_activation,
        "layers": [[w.values.tolist(), b.values.tolist()] for w, b in c.mlp.layers],
    }


def _classifier_from_dict(d: dict) -> Classifier:
    layers = [
        (Tensor(np.array(w, dtype=np.float64), requires_grad=True), Tensor(np.array(b, dtype=np.float64), requires_grad=True))
        for w, b in d["layers"]
    ]
    mlp = MlpParams(layers, d["hidden_activation"], d["output_activation"])
    return Classifier(mlp, d["modality"], d["n_classes"], d["accuracy"])


def cached_classifiers(cfg: RunConfig, train: MultimodalDataset, test: MultimodalDataset) -> list[Classifier]:
    """Train per-modality classifiers once per (dataset, epochs, seed) and cache them as JSON."""
    key = hashlib.sha256(
        json.dumps({"data": cfg.to_dict()["data"], "epochs": cfg.eval.classifier_epochs, "seed": cfg.eval.seed}, sort_keys=True).encode()
    ).hexdigest()[:16]
    path = Path(cfg.out_dir) / "classifiers" / f"classifiers_{key}.json"
    if path.exists():
        try:
            return [_classifier_from_dict(d) for d in json.loads(path.read_text(encoding="utf-8"))]
        except (ValueError, KeyError, TypeError):
            pass  # corrupt cache: retrain and overwrite
    clfs = train_classifiers(train, cfg.eval.classifier_epochs, cfg.eval.seed, test)
    atomic_write(path, json.dumps([_classifier_to_dict(c) for c in clfs]) + "\n")
    return clfs


# ------------------------------------------------------------- evaluation


def normalized_elbo(model: ModelBundle, test: MultimodalDataset, cfg: RunConfig, rng) -> float:
    n = len(test)
    size = min(cfg.train.batch_size, n)
    total = 0.0
    with T.no_grad():
        for b in range(cfg.eval.elbo_batches):
            idx = rng.choice(n, size=size, replace=False)
            total += elbo_terms(model, [v[idx] for v in test.views], rng).summary()["elbo"]
    logz = estimate_log_partition(model.prior, 4096, rng)
    return total / cfg.eval.elbo_batches - logz


def score_model(model: ModelBundle, classifiers, test: MultimodalDataset, cfg: RunConfig) -> list[tuple]:
    """Rows ``(metric, value, n)`` of joint, cross (overall and per pair) and normalized ELBO."""
    rng = np.random.default_rng([cfg.eval.seed, 21])
    joint = joint_coherence(model, classifiers, cfg.eval.n_joint_samples, cfg.langevin, rng)
    cross, matrix = cross_coherence(model, classifiers, test, rng, cfg.eval.sampled_cross)
    rows = [("joint_coherence", joint, cfg.eval.n_joint_samples), ("cross_coherence", cross, len(test))]
    for i in range(model.m):
        for j in range(model.m):
            if i != j:
                rows.append((f"cross_{i}_to_{j}", matrix[i, j], len(test)))
    rows.append(("normalized_elbo", normalized_elbo(model, test, cfg, rng), cfg.eval.elbo_batches * min(cfg.train.batch_size, len(test))))
    for c in classifiers:
        rows.append((f"classifier_accuracy_{c.modality}", c.accuracy, len(test)))
    return rows


def _fmt(v) -> str:
    return repr(float(v))


# --------------------------------------------------------------- commands


def cmd_gen_data(cfg: RunConfig) -> int:
    spec = cfg.dataset_spec()
    train, test = generate(spec)
    root = cfg.data_dir()
    save_dataset(train, root / "train.mmds")
    save_dataset(test, root / "test.mmds")
    print(f"gen-data: {spec.family} K={spec.n_classes} m={spec.n_modalities} train={len(train)} test={len(test)} -> {root}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, resume: str | None = None) -> int:
    train, _ = load_splits(cfg)
    out = Path(cfg.out_dir)
    ck_root = out / "checkpoints"
    tcfg = cfg.train_config()
    digest = resume_digest(cfg)
    model = build_model(train.dims, cfg.model, cfg.train.seed, cfg.train.freeze_energy)
    optimizers = make_optimizers(tcfg)
    start = 0
    if resume:
        path = Path(resume)
        if not (path / "manifest.json").exists():
            raise CliFailure(EXIT_MISMATCH, f"no checkpoint at {path}")
        manifest = ckpt.load_checkpoint(path, model, optimizers, digest)
        start = int(manifest["iteration"])
    atomic_write(out / "config.json", cfg.dumps())
    metrics_path = out / "metrics.csv"
    header = ",".join(METRIC_COLUMNS) + "\n"
    kept = read_metric_records(metrics_path, start) if resume else []
    lines = list(kept)
    pending = []

    def flush():
        atomic_write(metrics_path, header + "".join(ln + "\n" for ln in lines))
        pending.clear()

    def on_record(record):
        (line,) = RunMetrics(0).csv_lines([record])
        lines.append(line)
        pending.append(line)
        if len(pending) >= METRICS_FLUSH_EVERY:
            flush()

    def save(iteration, opts):
        flush()
        return ckpt.save_checkpoint(ck_root / ckpt.checkpoint_name(iteration), model, opts, iteration, digest)

    try:
        train_loop(model, train, tcfg, start, optimizers, save, on_record)
    except TrainingDivergence as exc:
        flush()
        kept = "" if exc.checkpoint else " (no checkpoint written)"
        print(f"train: {exc}{kept}", file=sys.stderr)
        return EXIT_DIVERGED
    flush()
    ckpt.save_checkpoint(ck_root / "final", model, optimizers, tcfg.iterations, digest)
    print(f"train: {tcfg.iterations - start} iterations ({start}..{tcfg.iterations - 1}) -> {out}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> int:
    train, test = load_splits(cfg)
    path = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / "checkpoints" / "final"
    model, manifest = open_model(cfg, train.dims, path)
    classifiers = cached_classifiers(cfg, train, test)
    rows = score_model(model, classifiers, test, cfg)
    text = "metric,value,n,seed\n" + "".join(f"{name},{_fmt(v)},{n},{cfg.eval.seed}\n" for name, v, n in rows)
    atomic_write(Path(cfg.out_dir) / "scores.csv", text)
    joint, cross = rows[0][1], rows[1][1]
    print(f"eval: {path} iteration={manifest['iteration']} joint={joint:.4f} cross={cross:.4f}")
    return EXIT_OK


def ablation_cells(cfg: RunConfig) -> list[tuple[int, int, int, int]]:
    a = cfg.ablation
    return [(int(D), int(L), int(S), int(seed)) for D in a.hidden for L in a.layers for S in a.steps for seed in a.seeds]


def run_ablation_cell(cfg: RunConfig, cell, train, test, classifiers) -> tuple[float, float, str]:
    D, L, S, seed = cell
    c = dataclasses.replace(
        cfg,
        model=dataclasses.replace(cfg.model, energy_hidden=D, energy_layers=L),
        langevin=dataclasses.replace(cfg.langevin, steps=S, snapshot_steps=()),
        train=dataclasses.replace(cfg.train, seed=seed, checkpoint_every=0),
    )
    try:
        tcfg = c.train_config()
        model = build_model(train.dims, c.model, seed, c.train.freeze_energy)
        train_loop(model, train, tcfg)
        rng = np.random.default_rng([c.eval.seed, 21])
        joint = joint_coherence(model, classifiers, c.eval.n_joint_samples, c.langevin, rng)
        cross, _ = cross_coherence(model, classifiers, test, rng, c.eval.sampled_cross)
        return joint, cross, "ok"
    except (TrainingDivergence, ContractError, ValueError, ArithmeticError) as exc:
        return float("nan"), float("nan"), type(exc).__name__ + ": " + str(exc).replace(",", ";").replace("\n", " ")


def worker_count(n_tasks: int) -> int:
    raw = os.environ.get("EBMMOE_THREADS", "")
    try:
        cap = int(raw) if raw else (os.cpu_count() or 1)
    except ValueError:
        raise ConfigError(f"EBMMOE_THREADS must be an integer, got {raw!r}") from None
    return max(1, min(cap, n_tasks))


def cmd_ablate(cfg: RunConfig) -> int:
    train, test = load_splits(cfg)
    classifiers = cached_classifiers(cfg, train, test)
    cells = ablation_cells(cfg)
    if not cells:
        raise ConfigError("ablation grid is empty (hidden, layers, steps and seeds must be non-empty)")
    workers = worker_count(len(cells))
    if workers == 1:
        results = [run_ablation_cell(cfg, cell, train, test, classifiers) for cell in cells]
    else:
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            futures = [pool.submit(run_ablation_cell, cfg, cell, train, test, classifiers) for cell in cells]
            results = [f.result() for f in futures]
    lines = ["D,L,S,seed,joint,cross,status"]
    for (D, L, S, seed), (joint, cross, status) in zip(cells, results):
        lines.append(f"{D},{L},{S},{seed},{_fmt(joint)},{_fmt(cross)},{status}")
    atomic_write(Path(cfg.out_dir) / "ablation.csv", "\n".join(lines) + "\n")
    failed = sum(r[2] != "ok" for r in results)
    print(f"ablate: {len(cells)} cells ({failed} failed) -> {Path(cfg.out_dir) / 'ablation.csv'}")
    return EXIT_OK


def cmd_chain_viz(cfg: RunConfig, checkpoint: str | None = None) -> int:
    snaps = tuple(cfg.langevin.snapshot_steps)
    if not snaps:
        raise ConfigError("langevin.snapshot_steps is empty; chain-viz needs a schedule starting at 0 and ending at langevin.steps")
    if snaps[0] != 0 or snaps[-1] != cfg.langevin.steps:
        raise ConfigError("langevin.snapshot_steps must start at 0 and end at langevin.steps")
    train, _ = load_splits(cfg)
    path = Path(checkpoint) if checkpoint else Path(cfg.out_dir) / "checkpoints" / "final"
    model, _ = open_model(cfg, train.dims, path)
    dest = Path(cfg.out_dir) / "chains"
    out = chain_transition_dump(model, cfg.langevin, dest, np.random.default_rng([cfg.eval.seed, 31]))
    print(f"chain-viz: {len(out)} snapshots x {model.m} modalities -> {dest}")
    return EXIT_OK


# ------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (schema 1); defaults apply when omitted")
    common.add_argument("--seed", type=int, help="overrides train.seed, eval.seed and ablation.seeds")
    common.add_argument("--out", help="overrides out_dir")
    common.add_argument("--freeze-energy", action="store_true", help="unimodal-prior baseline: energy fixed at zero")
    common.add_argument("--extension", action="store_true", help="enable modality-specific latent factors")
    parser = argparse.ArgumentParser(prog="ebmmoe", description="Multimodal VAE with a latent energy-based prior.")
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("gen-data", parents=[common], help="write train/test dataset files")
    p = sub.add_parser("train", parents=[common], help="train and write metrics and checkpoints")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    for verb, text in (("eval", "score a checkpoint"), ("chain-viz", "dump decoded Langevin snapshots")):
        p = sub.add_parser(verb, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint directory (default <out>/checkpoints/final)")
    sub.add_parser("ablate", parents=[common], help="train and score every D x L x S x seed cell")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = effective_config(args)
        if args.verb == "gen-data":
            return cmd_gen_data(cfg)
        if args.verb == "train":
            return cmd_train(cfg, args.resume)
        if args.verb == "eval":
            return cmd_eval(cfg, args.checkpoint)
        if args.verb == "ablate":
            return cmd_ablate(cfg)
        return cmd_chain_viz(cfg, args.checkpoint)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CliFailure as exc:
        print(f"{args.verb}: {exc}", file=sys.stderr)
        return exc.code
    except ArtifactMismatch as exc:
        print(f"{args.verb}: checkpoint mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except OSError as exc:
        print(f"{args.verb}: IO error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
