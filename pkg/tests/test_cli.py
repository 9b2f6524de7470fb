import json

import pytest

from udpm.cli import apply_overrides, main
from udpm.io import load_latent


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps({
        "dataset": {"generator": "bars", "size": 16, "count": 4, "num_classes": 2},
        "steps": 30, "diffusion_steps": 3, "width": 8, "ema_decay": 0.9, "precision": 64,
    }))
    assert main(["train", str(cfg), "--out", str(root / "run")]) == 0
    return root, cfg


def test_train_outputs(trained):
    root, _ = trained
    run = root / "run"
    assert (run / "checkpoint" / "header.json").exists()
    rows = (run / "loss.csv").read_text().splitlines()
    assert rows[0] == "step,loss,l,ema" and len(rows) == 31
    man = json.loads((run / "manifest.json").read_text())
    assert man["command"] == "train" and man["config"]["steps"] == 30


def test_train_rerun_bit_identical(trained, tmp_path):
    root, cfg = trained
    assert main(["train", str(cfg), "--out", str(tmp_path / "again")]) == 0
    a = json.loads((root / "run" / "manifest.json").read_text())["checkpoint_hash"]
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())["checkpoint_hash"]
    assert a == b


def test_train_overrides(trained, tmp_path):
    _, cfg = trained
    assert main(["train", str(cfg), "--out", str(tmp_path / "o"), "--steps", "3", "--set", "dataset.count=2"]) == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["steps"] == 3 and man["config"]["dataset"]["count"] == 2


def test_train_missing_field(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset": {"generator": "blobs"}}))
    assert main(["train", str(bad), "--out", str(tmp_path / "x")]) == 2
    assert "dataset.size" in capsys.readouterr().err


def test_sample_deterministic_and_guided(trained, tmp_path):
    root, _ = trained
    ck = str(root / "run" / "checkpoint")
    for name in ("a", "b"):
        assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / name), "--seed", "7", "--count", "4"]) == 0
    for i in range(4):
        assert (tmp_path / "a" / f"sample_{i:03d}.png").read_bytes() == (tmp_path / "b" / f"sample_{i:03d}.png").read_bytes()
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "g"), "--guidance", "2", "--class", "1"]) == 0
    assert load_latent(tmp_path / "g" / "sample_000.lat").meta["guidance"] == {"scale": 2.0, "class_id": 1}
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "h"), "--guidance", "2"]) == 2


def test_interpolate_and_perturb(trained, tmp_path):
    root, _ = trained
    ck = str(root / "run" / "checkpoint")
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "s"), "--seed", "1", "--count", "4"]) == 0
    lats = [str(tmp_path / "s" / f"sample_{i:03d}.lat") for i in range(4)]
    assert main(["interpolate", "--checkpoint", ck, "--out", str(tmp_path / "i"), "--corners", *lats, "--grid", "4x4"]) == 0
    assert len(list((tmp_path / "i").glob("cell_*.png"))) == 16
    assert (tmp_path / "i" / "grid.png").exists()
    for cell, idx in {"cell_0_0": 0, "cell_0_3": 1, "cell_3_0": 2, "cell_3_3": 3}.items():
        assert (tmp_path / "i" / f"{cell}.png").read_bytes() == (tmp_path / "s" / f"sample_{idx:03d}.png").read_bytes()
    assert main(["perturb", "--checkpoint", ck, "--out", str(tmp_path / "p"), "--latent", lats[0], "--step", "3", "--eps", "0.1"]) == 0
    assert (tmp_path / "p" / "perturbed.png").exists()
    assert load_latent(tmp_path / "p" / "perturbed.lat").meta["perturbed_step"] == 3
    assert main(["perturb", "--checkpoint", ck, "--out", str(tmp_path / "q"), "--latent", lats[0], "--step", "9", "--eps", "0.1"]) == 2
    assert main(["interpolate", "--checkpoint", ck, "--out", str(tmp_path / "j"), "--corners", *lats[:2]]) == 2


def test_manifest_replays_sample(trained, tmp_path):
    root, _ = trained
    ck = str(root / "run" / "checkpoint")
    assert main(["sample", "--checkpoint", ck, "--out", str(tmp_path / "a"), "--seed", "3"]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    args = ["sample", "--checkpoint", man["config"]["checkpoint"], "--out", str(tmp_path / "b"),
            "--seed", str(man["seeds"]["seed"]), "--count", str(man["config"]["count"])]
    assert main(args) == 0
    assert (tmp_path / "a" / "sample_000.png").read_bytes() == (tmp_path / "b" / "sample_000.png").read_bytes()


def test_elbo(trained, tmp_path):
    root, _ = trained
    ck = str(root / "run" / "checkpoint")
    assert main(["elbo", "--checkpoint", ck, "--out", str(tmp_path / "e"), "--oracle", "--count", "2"]) == 0
    doc = json.loads((tmp_path / "e" / "elbo.json").read_text())
    assert all(v == 0.0 for r in doc["per_image"] for v in r["step_kl"].values())


def test_verify_exit_codes(tmp_path):
    report = tmp_path / "r.json"
    assert main(["verify", "--filter", "lemma1.dense", "--report", str(report)]) == 0
    names = [c["name"] for c in json.loads(report.read_text())["checks"]]
    assert names and all(n.startswith("lemma1") for n in names)
    assert main(["verify", "--filter", "lemma1.dense", "--kernel-scale", "1.1"]) == 1
    assert main(["verify", "--filter", "no-such-check"]) == 2
    assert main(["bogus"]) == 2


def test_apply_overrides():
    out = apply_overrides({"a": 1, "dataset": {"size": 8}}, ["a=2", "dataset.size=16", "loss=sigma"])
    assert out == {"a": 2, "dataset": {"size": 16}, "loss": "sigma"}
