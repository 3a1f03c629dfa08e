import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from ebmmoe import checkpoint as ckpt
from ebmmoe.cli import main


def write_config(tmp_path, name="config.json", **sections):
    base = {
        "schema": 1,
        "out_dir": str(tmp_path / "run"),
        "data": {"n_train": 150, "n_test": 60},
        "model": {"hidden": 16, "energy_hidden": 16, "energy_layers": 2},
        "train": {"iterations": 10, "checkpoint_every": 5},
        "langevin": {"steps": 10, "n_chains": 16, "snapshot_steps": [0, 5, 10]},
        "eval": {"n_joint_samples": 60, "classifier_epochs": 3, "elbo_batches": 2},
        "ablation": {"hidden": [8, 16], "layers": [2], "steps": [5], "seeds": [0]},
    }
    for key, value in sections.items():
        if isinstance(value, dict):
            base[key] = {**base.get(key, {}), **value}
        else:
            base[key] = value
    path = tmp_path / name
    path.write_text(json.dumps(base))
    return path


def files(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture
def trained(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    return tmp_path, cfg


def test_gen_data_writes_two_deterministic_files(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    data = tmp_path / "run" / "data"
    first = files(data)
    assert sorted(first) == ["test.mmds", "train.mmds"]
    assert first["train.mmds"].split(b"\n", 1)[0].endswith(b"n=150 dims=2,2")
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert files(data) == first


def test_malformed_config_exits_2_without_output(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": 1, "data": {"n_train": "many"}, "out_dir": "%s"}' % (tmp_path / "run"))
    assert main(["gen-data", "--config", str(bad)]) == 2
    assert not (tmp_path / "run").exists()


def test_unwritable_output_exits_3(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = write_config(tmp_path, out_dir=str(blocker / "run"))
    assert main(["gen-data", "--config", str(cfg)]) == 3


def test_train_without_data_exits_3(tmp_path):
    assert main(["train", "--config", str(write_config(tmp_path))]) == 3


def test_train_writes_metrics_and_checkpoints(trained):
    tmp_path, _ = trained
    run = tmp_path / "run"
    lines = (run / "metrics.csv").read_text().splitlines()
    assert lines[0] == "iter,elbo,recon_mean,prior_term,entropy_term,grad_norm_model,grad_norm_ebm,wall_ms"
    assert [int(ln.split(",")[0]) for ln in lines[1:]] == list(range(10))
    assert sorted(p.name for p in (run / "checkpoints").iterdir()) == ["final", "iter_000005", "iter_000010"]


def test_resume_reproduces_uninterrupted_metrics(trained):
    tmp_path, cfg = trained
    run = tmp_path / "run"
    full = (run / "metrics.csv").read_text()
    assert main(["train", "--config", str(cfg), "--resume", str(run / "checkpoints" / "iter_000005")]) == 0
    resumed = (run / "metrics.csv").read_text()
    a = np.array([[float(x) for x in ln.split(",")] for ln in full.splitlines()[1:]])
    b = np.array([[float(x) for x in ln.split(",")] for ln in resumed.splitlines()[1:]])
    assert a.shape == b.shape and np.max(np.abs(a - b)) <= 1e-12


def test_resume_with_other_config_is_a_mismatch(trained):
    tmp_path, _ = trained
    other = write_config(tmp_path, "other.json", train={"lr_model": 0.5})
    assert main(["train", "--config", str(other), "--resume", str(tmp_path / "run" / "checkpoints" / "iter_000005")]) == 5


def test_freeze_energy_keeps_alpha_across_checkpoints(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg), "--freeze-energy"]) == 0
    energies = []
    for name in ("iter_000005", "final"):
        path = tmp_path / "run" / "checkpoints" / name
        manifest = ckpt.read_manifest(path)
        payload = (path / "payload.bin").read_bytes()
        energies.append(b"".join(
            payload[e["offset"] : e["offset"] + 8 * int(np.prod(e["shape"]))]
            for e in manifest["entries"]
            if e["kind"] == "param" and e["name"].startswith("energy.")
        ))
    assert energies[0] == energies[1]


def test_eval_is_deterministic_and_complete(trained):
    tmp_path, cfg = trained
    assert main(["eval", "--config", str(cfg)]) == 0
    scores = tmp_path / "run" / "scores.csv"
    first = scores.read_bytes()
    assert main(["eval", "--config", str(cfg)]) == 0
    assert scores.read_bytes() == first
    rows = first.decode().splitlines()
    assert rows[0] == "metric,value,n,seed"
    names = [r.split(",")[0] for r in rows[1:]]
    assert {"joint_coherence", "cross_coherence", "cross_0_to_1", "cross_1_to_0", "normalized_elbo"} <= set(names)
    assert list((tmp_path / "run" / "classifiers").iterdir())


def test_eval_missing_checkpoint_exits_5(trained):
    tmp_path, cfg = trained
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(tmp_path / "nope")]) == 5
    assert not (tmp_path / "run" / "scores.csv").exists()


def test_baseline_and_ebm_scores_are_comparable(trained):
    tmp_path, _ = trained
    cfg_b = write_config(tmp_path, "base.json", out_dir=str(tmp_path / "base"), data={"path": str(tmp_path / "run" / "data")})
    assert main(["train", "--config", str(cfg_b), "--freeze-energy"]) == 0
    assert main(["eval", "--config", str(cfg_b)]) == 0
    assert main(["eval", "--config", str(tmp_path / "config.json")]) == 0
    a = (tmp_path / "base" / "scores.csv").read_text().splitlines()
    b = (tmp_path / "run" / "scores.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in a] == [r.split(",")[0] for r in b]


def test_chain_viz_dumps_and_reruns_identically(trained):
    tmp_path, cfg = trained
    assert main(["chain-viz", "--config", str(cfg)]) == 0
    chains = tmp_path / "run" / "chains"
    first = files(chains)
    assert len(first) == 6
    assert main(["chain-viz", "--config", str(cfg)]) == 0
    assert files(chains) == first


def test_chain_viz_empty_schedule_names_the_field(trained, capsys):
    tmp_path, _ = trained
    cfg = write_config(tmp_path, "empty.json", langevin={"snapshot_steps": []})
    assert main(["chain-viz", "--config", str(cfg)]) == 2
    assert "snapshot_steps" in capsys.readouterr().err


def test_ablate_rows_and_duplicates(tmp_path, monkeypatch):
    cfg = write_config(tmp_path, ablation={"hidden": [8, 8], "layers": [2], "steps": [5], "seeds": [0]})
    assert main(["gen-data", "--config", str(cfg)]) == 0
    monkeypatch.setenv("EBMMOE_THREADS", "1")
    assert main(["ablate", "--config", str(cfg)]) == 0
    rows = (tmp_path / "run" / "ablation.csv").read_text().splitlines()
    assert rows[0] == "D,L,S,seed,joint,cross,status"
    assert len(rows) == 3 and rows[1] == rows[2] and rows[1].endswith(",ok")


def test_ablate_grid_counts_and_parallel_agrees(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg)]) == 0
    monkeypatch.setenv("EBMMOE_THREADS", "1")
    assert main(["ablate", "--config", str(cfg)]) == 0
    serial = (tmp_path / "run" / "ablation.csv").read_bytes()
    assert len(serial.splitlines()) == 3
    monkeypatch.setenv("EBMMOE_THREADS", "2")
    assert main(["ablate", "--config", str(cfg)]) == 0
    assert (tmp_path / "run" / "ablation.csv").read_bytes() == serial


def test_divergence_exits_4_and_keeps_checkpoints(tmp_path, capsys):
    cfg = write_config(tmp_path, train={"lr_model": 10.0, "iterations": 60})
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 4
    assert "iter_000015" in capsys.readouterr().err
    assert (tmp_path / "run" / "checkpoints" / "iter_000015").exists()
    assert not (tmp_path / "run" / "checkpoints" / "final").exists()
    rows = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
    assert len(rows) > 15


def test_console_entry_point(tmp_path):
    cfg = write_config(tmp_path)
    env = {**os.environ, "PYTHONHASHSEED": "0"}
    out = subprocess.run([sys.executable, "-m", "ebmmoe", "gen-data", "--config", str(cfg)], capture_output=True, text=True, env=env)
    assert out.returncode == 0 and "train=150" in out.stdout
