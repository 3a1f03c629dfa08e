import dataclasses
import json

import numpy as np
import pytest

from ebmmoe import checkpoint as ckpt
from ebmmoe.config import ConfigError, RunConfig, config_from_dict, load_config
from ebmmoe.errors import ArtifactMismatch
from ebmmoe.trainer import ArchSpec, TrainConfig, build_model, make_optimizers, train_step
from ebmmoe.langevin import LangevinConfig


def test_default_config_round_trips():
    cfg = RunConfig()
    back = config_from_dict(json.loads(cfg.dumps()))
    assert back == cfg and back.dumps() == cfg.dumps() and back.digest() == cfg.digest()


def test_partial_config_fills_defaults(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"schema": 1, "train": {"iterations": 7}, "ablation": {"hidden": [8]}}))
    cfg = load_config(path)
    assert cfg.train.iterations == 7 and cfg.ablation.hidden == (8,) and cfg.model == ArchSpec()


@pytest.mark.parametrize(
    "raw",
    [
        {"train": {}},
        {"schema": 2},
        {"schema": 1, "bogus": 1},
        {"schema": 1, "train": {"iterations": "ten"}},
        {"schema": 1, "train": {"iterationz": 10}},
        {"schema": 1, "langevin": {"steps": 0}},
        {"schema": 1, "data": {"family": "mnist"}},
        {"schema": 1, "eval": {"sampled_cross": 1}},
    ],
)
def test_invalid_configs(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unreadable_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_train_config_projection():
    cfg = RunConfig()
    t = cfg.train_config()
    assert isinstance(t, TrainConfig) and t.langevin.step_size == cfg.langevin.step_size and t.langevin.snapshot_steps == ()


def trained_pair(seed=0):
    arch = ArchSpec(hidden=8, energy_hidden=8, energy_layers=2)
    model = build_model([2, 2], arch, seed)
    cfg = TrainConfig(langevin=LangevinConfig(steps=5, n_chains=8))
    opts = make_optimizers(cfg)
    rng = np.random.default_rng(seed)
    for t in range(3):
        train_step(model, [rng.normal(size=(16, 2)), rng.normal(size=(16, 2))], opts, cfg, rng, t)
    return model, opts, arch


def test_checkpoint_restores_bitwise(tmp_path):
    model, opts, arch = trained_pair()
    ckpt.save_checkpoint(tmp_path / "c", model, opts, 3, "digest")
    fresh = build_model([2, 2], arch, 1)
    fresh_opts = make_optimizers(TrainConfig())
    manifest = ckpt.load_checkpoint(tmp_path / "c", fresh, fresh_opts, "digest")
    assert manifest["iteration"] == 3
    for name, p in model.parameters().items():
        assert p.values.tobytes() == fresh.parameters()[name].values.tobytes()
    for group in ("model", "ebm"):
        assert fresh_opts[group].step_count == opts[group].step_count
        for name, m in opts[group].m.items():
            assert m.tobytes() == fresh_opts[group].m[name].tobytes()
            assert opts[group].v[name].tobytes() == fresh_opts[group].v[name].tobytes()


def test_manifest_lengths_match_payload(tmp_path):
    model, opts, _ = trained_pair()
    ckpt.save_checkpoint(tmp_path / "c", model, opts, 3, "d")
    manifest = ckpt.read_manifest(tmp_path / "c")
    total = sum(int(np.prod(e["shape"])) * 8 for e in manifest["entries"])
    assert total == manifest["payload_bytes"] == (tmp_path / "c" / "payload.bin").stat().st_size


def test_checkpoint_mismatches(tmp_path):
    model, opts, arch = trained_pair()
    ckpt.save_checkpoint(tmp_path / "c", model, opts, 3, "digest")
    with pytest.raises(ArtifactMismatch):
        ckpt.load_checkpoint(tmp_path / "c", build_model([2, 2], arch, 0), None, "other")
    wider = build_model([2, 2], dataclasses.replace(arch, hidden=9), 0)
    with pytest.raises(ArtifactMismatch):
        ckpt.load_checkpoint(tmp_path / "c", wider, None)
    target = build_model([2, 2], arch, 5)
    before = {k: p.values.copy() for k, p in target.parameters().items()}
    payload = tmp_path / "c" / "payload.bin"
    payload.write_bytes(payload.read_bytes()[:-8] + b"\x00" * 8)
    with pytest.raises(ArtifactMismatch):
        ckpt.load_checkpoint(tmp_path / "c", target, None)
    assert all(np.array_equal(before[k], p.values) for k, p in target.parameters().items())
