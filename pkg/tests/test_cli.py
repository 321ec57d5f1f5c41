import json
import subprocess
import sys

import numpy as np
import pytest

from efdp_gan import checkpoint as ckpt
from efdp_gan.accountant import DpBudget, RdpLedger, steps_for_budget, to_eps_delta
from efdp_gan.cli import EXIT_CONFIG, EXIT_DATA, main
from efdp_gan.config import save_config
from efdp_gan.data import read_idx
from efdp_gan.trainer import parse_record

from conftest import small_cfg


def last_record(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if "=" in line]
    return parse_record(lines[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--per-class", "12", "--seed", "0"]) == 0
    assert main(["synth", "--out", str(root / "test"), "--per-class", "12", "--seed", "1"]) == 0
    save_config(small_cfg(iterations=6, n_pre=2), root / "cfg.toml")
    return root


def data_args(ws):
    return ["--dataset-images", str(ws / "data/images.idx"), "--dataset-labels", str(ws / "data/labels.idx")]


def run_train(ws, out, *extra):
    return main(["train", "--config", str(ws / "cfg.toml"), "--out", str(out), *data_args(ws), *extra])


def test_synth_outputs(workspace):
    assert read_idx(workspace / "data/images.idx", "images").shape == (24, 8, 8)
    assert sorted(np.bincount(read_idx(workspace / "data/labels.idx", "labels"))) == [12, 12]


def test_pretrain_deterministic(workspace, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        code = main(["pretrain", "--config", str(workspace / "cfg.toml"), "--out", str(tmp_path / name),
                     *data_args(workspace)])
        assert code == 0
        outs.append((tmp_path / name / "bank.ckpt").read_bytes())
    assert outs[0] == outs[1]
    assert len(ckpt.load_bank(tmp_path / "a" / "bank.ckpt")) == 3
    assert "seed=0" in capsys.readouterr().out


def test_missing_dataset_names_path(workspace, tmp_path, capsys):
    missing = str(tmp_path / "nope.idx")
    code = main(["pretrain", "--config", str(workspace / "cfg.toml"), "--out", str(tmp_path),
                 "--dataset-images", missing, "--dataset-labels", missing])
    assert code == EXIT_DATA
    assert missing in capsys.readouterr().err


def test_unknown_config_key_is_config_error(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text((workspace / "cfg.toml").read_text() + "\nlearning_rate = 0.1\n")
    assert run_train(workspace, tmp_path / "o", "--config", str(bad)) == EXIT_CONFIG
    assert "learning_rate" in capsys.readouterr().err


def test_train_reports_budget_and_layout(workspace, tmp_path, capsys):
    assert run_train(workspace, tmp_path) == 0
    rec = last_record(capsys)
    assert rec["iterations"] == 6 and "epsilon" in rec and rec["delta"] == 1e-5
    assert (tmp_path / "public" / "generator.ckpt").exists()
    assert (tmp_path / "private" / "run.ckpt").exists()
    assert (tmp_path / "config.toml").exists()
    privacy = json.loads((tmp_path / "public" / "privacy.json").read_text())
    assert privacy["steps"] == 6 and privacy["epsilon"] == pytest.approx(rec["epsilon"], rel=1e-9)


def test_public_release_surface(workspace, tmp_path):
    assert run_train(workspace, tmp_path) == 0
    files = sorted(p.name for p in (tmp_path / "public").iterdir())
    assert files == ["generator.ckpt", "privacy.json"]
    sections = ckpt.read_sections(tmp_path / "public" / "generator.ckpt")
    params = [s for s in sections if s.startswith("param/")]
    assert params == ["param/generator"]
    assert not any(s.startswith("ef") for s in sections)
    assert set(json.loads((tmp_path / "public" / "privacy.json").read_text())) == \
        {"epsilon", "delta", "steps", "sigma", "gamma"}


def test_train_immediate_gate(workspace, tmp_path, capsys):
    save_config(small_cfg(epsilon=0.001), tmp_path / "tight.toml")
    assert run_train(workspace, tmp_path / "o", "--config", str(tmp_path / "tight.toml")) == 0
    rec = last_record(capsys)
    assert rec["iterations"] == 0 and rec["stopped_by_budget"] == 1


def test_train_byte_identical_reruns(workspace, tmp_path):
    for name in ("a", "b"):
        assert run_train(workspace, tmp_path / name) == 0
    for rel in ("public/generator.ckpt", "private/run.ckpt", "private/metrics.log"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_train_resume_matches_uninterrupted(workspace, tmp_path):
    assert run_train(workspace, tmp_path / "full") == 0
    assert run_train(workspace, tmp_path / "staged", "--until", "3") == 0
    assert main(["train", "--resume", str(tmp_path / "staged/private/run.ckpt"), "--out",
                 str(tmp_path / "staged"), *data_args(workspace)]) == 0
    for rel in ("public/generator.ckpt", "private/run.ckpt", "private/metrics.log"):
        assert (tmp_path / "full" / rel).read_bytes() == (tmp_path / "staged" / rel).read_bytes()


@pytest.fixture(scope="module")
def released(workspace, tmp_path_factory):
    out = tmp_path_factory.mktemp("released")
    assert run_train(workspace, out) == 0
    return out / "public" / "generator.ckpt"


def test_generate_histogram_and_determinism(released, tmp_path):
    for name in ("a", "b"):
        assert main(["generate", "--checkpoint", str(released), "--count", "100", "--seed", "3",
                     "--out", str(tmp_path / name)]) == 0
    labels = read_idx(tmp_path / "a/labels.idx", "labels")
    assert read_idx(tmp_path / "a/images.idx", "images").shape == (100, 8, 8)
    # binomial 99% interval around 50 for n = 100
    assert 37 <= np.sum(labels == 0) <= 63
    for f in ("images.idx", "labels.idx"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_generate_empty(released, tmp_path):
    assert main(["generate", "--checkpoint", str(released), "--count", "0", "--out", str(tmp_path)]) == 0
    assert read_idx(tmp_path / "images.idx", "images").shape == (0, 8, 8)
    assert read_idx(tmp_path / "labels.idx", "labels").shape == (0,)


def test_generate_rejects_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "g.ckpt"
    bad.write_bytes(b"EFDPCKPT\x09\x00" + bytes(40))
    assert main(["generate", "--checkpoint", str(bad), "--out", str(tmp_path)]) == EXIT_DATA
    assert "version" in capsys.readouterr().err


def test_eval_real_vs_real(workspace, capsys):
    test = ["--test-images", str(workspace / "test/images.idx"), "--test-labels", str(workspace / "test/labels.idx")]
    samples = ["--samples-images", str(workspace / "test/images.idx"),
               "--samples-labels", str(workspace / "test/labels.idx")]
    assert main(["eval", "--config", str(workspace / "cfg.toml"), *data_args(workspace), *samples, *test]) == 0
    rec = last_record(capsys)
    assert 0 < rec["fd"] < 50 and rec["is"] >= 1
    assert 0 <= rec["g2r_mlp"] <= 1 and 0 <= rec["g2r_cnn"] <= 1


def test_eval_checkpoint(workspace, released, capsys):
    assert main(["eval", "--config", str(workspace / "cfg.toml"), *data_args(workspace),
                 "--checkpoint", str(released)]) == 0
    rec = last_record(capsys)
    assert rec["fd"] >= 0 and rec["is"] >= 1


def test_account_matches_library(capsys):
    assert main(["account", "--sigma", "1", "--gamma", "0.1", "--steps", "100", "--delta", "1e-5"]) == 0
    out = capsys.readouterr().out
    summary = json.loads([line for line in out.splitlines() if line.startswith("{")][0])
    assert summary["epsilon"] == to_eps_delta(RdpLedger(1.0, 0.1).with_steps(100), 1e-5)


def test_account_target_mode(capsys):
    assert main(["account", "--sigma", "2", "--gamma", "0.1", "--target-eps", "10", "--orders", "2-64,128,256"]) == 0
    assert last_record(capsys)["steps"] == steps_for_budget(DpBudget(10, 1e-5), 2.0, 0.1)


def test_account_needs_mode(capsys):
    assert main(["account", "--sigma", "2", "--gamma", "0.1"]) == EXIT_CONFIG


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "efdp_gan.cli", "account", "--sigma", "1", "--gamma", "1",
                          "--steps", "1", "--orders", "2"], capture_output=True, text=True, check=True)
    assert "epsilon" in out.stdout
