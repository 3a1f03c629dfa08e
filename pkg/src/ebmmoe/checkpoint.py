"""Checkpoints: a JSON manifest plus a little-endian float64 payload.

Layout of a checkpoint directory::

    manifest.json   names, shapes and byte offsets of every array, the
                    iteration count, optimizer step counts, config digest
    payload.bin     parameters, then Adam first and second moments

Loading checks the config digest, every name and shape, and the payload hash,
so a checkpoint can only be restored into the run that wrote it.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import atomic_write
from .errors import ArtifactMismatch

FORMAT = "ebmmoe-checkpoint-1"
_DTYPE = np.dtype("<f8")


def checkpoint_name(iteration: int) -> str:
    return f"iter_{iteration:06d}"


def _arrays(model, optimizers):
    params = model.parameters()
    groups = {"model": model.model_parameters(), "ebm": model.energy_parameters()}
    yield from (("param", name, p.values) for name, p in params.items())
    for group, names in groups.items():
        opt = optimizers.get(group) if optimizers else None
        for name, p in names.items():
            m = opt.m.get(name) if opt else None
            v = opt.v.get(name) if opt else None
            yield (f"{group}.m", name, m if m is not None else np.zeros_like(p.values))
            yield (f"{group}.v", name, v if v is not None else np.zeros_like(p.values))


def save_checkpoint(path, model, optimizers, iteration: int, config_digest: str, extra: dict | None = None) -> Path:
    """Write ``model`` and optimizer state to directory ``path``; returns it."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for kind, name, arr in _arrays(model, optimizers):
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes()
        entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "iteration": int(iteration),
        "config_digest": config_digest,
        "optimizer_steps": {k: (optimizers[k].step_count if optimizers else 0) for k in ("model", "ebm")},
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "entries": entries,
        "extra": extra or {},
    }
    path.mkdir(parents=True, exist_ok=True)
    atomic_write(path / "payload.bin", payload)
    atomic_write(path / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    try:
        manifest = json.loads((Path(path) / "manifest.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ArtifactMismatch(f"manifest is not valid JSON: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise ArtifactMismatch(f"unknown checkpoint format {manifest.get('format')!r}")
    return manifest


def load_checkpoint(path, model, optimizers, config_digest: str | None = None) -> dict:
    """Restore ``model`` and ``optimizers`` in place from ``path``; returns the manifest.

    Raises ArtifactMismatch when the digest, names, shapes or payload disagree.
    Nothing is modified unless every check passes.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if config_digest is not None and manifest["config_digest"] != config_digest:
        raise ArtifactMismatch("checkpoint was written by a different configuration")
    payload = (path / "payload.bin").read_bytes()
    if len(payload) != manifest["payload_bytes"] or hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise ArtifactMismatch("payload does not match its manifest")
    expected = [(kind, name, tuple(arr.shape)) for kind, name, arr in _arrays(model, optimizers)]
    found = [(e["kind"], e["name"], tuple(e["shape"])) for e in manifest["entries"]]
    if expected != found:
        missing = sorted({e[1] for e in expected} ^ {f[1] for f in found})
        detail = f"parameters differ: {', '.join(missing)}" if missing else "parameter shapes differ"
        raise ArtifactMismatch(detail)
    restored = []
    for entry in manifest["entries"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=entry["offset"]).astype(np.float64)
        restored.append(arr.reshape(entry["shape"]))
    params = model.parameters()
    groups = {"model": model.model_parameters(), "ebm": model.energy_parameters()}
    for entry, arr in zip(manifest["entries"], restored):
        kind, name = entry["kind"], entry["name"]
        if kind == "param":
            params[name].values[...] = arr
        elif optimizers:
            group, moment = kind.split(".")
            getattr(optimizers[group], moment)[name] = arr.copy()
    if optimizers:
        for group in groups:
            optimizers[group].step_count = int(manifest["optimizer_steps"][group])
    return manifest
