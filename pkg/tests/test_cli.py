import json
import os

import pytest
import yaml

from vecnet import checkpoint as ckpt
from vecnet.cli import checkpoint_name, main

TINY_FUNCS = {
    "benchmark": "funcs", "seed": 4, "n_seeds": 1, "epochs": 1,
    "network": {"widths": [16, 8], "interfaces": [8], "k_top": [None, 2]},
    "funcs": {"length": 64, "n_train": 32, "n_test": 6, "regimes": ["forecast_25"]},
    "settle": {"max_sweeps": 10}, "eval_settle": {"max_sweeps": 10},
}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "funcs.yaml"
    p.write_text(yaml.safe_dump(TINY_FUNCS))
    return str(p)


def read(path, mode="r"):
    with open(path, mode) as fh:
        return fh.read()


def test_train_writes_artifacts_and_is_deterministic(cfg_file, tmp_path):
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    assert main(["train", "--config", cfg_file, "--out", a]) == 0
    assert main(["train", "--config", cfg_file, "--out", b]) == 0
    ck = checkpoint_name(4)
    assert read(os.path.join(a, ck), "rb") == read(os.path.join(b, ck), "rb")
    assert read(os.path.join(a, "metrics.json")) == read(os.path.join(b, "metrics.json"))
    man = json.loads(read(os.path.join(a, "manifest.json")))
    assert man["seed"] == 4 and man["command"] == "train" and man["config"]["benchmark"] == "funcs"
    assert os.path.join(a, ck) in man["outputs"].values()
    assert json.loads(read(os.path.join(a, "metrics.json")))["extra"]["manifest"] == "manifest.json"
    assert ckpt.load(os.path.join(a, ck)).extras["manifest"] == "manifest.json"


def test_eval_reproduces_training_numbers(cfg_file, tmp_path):
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg_file, "--out", out]) == 0
    ev = str(tmp_path / "ev")
    assert main(["eval", os.path.join(out, checkpoint_name(4)), "--out", ev, "--masked"]) == 0
    train = json.loads(read(os.path.join(out, "metrics.json")))
    evr = json.loads(read(os.path.join(ev, "eval.json")))
    for split in ("id", "easy_ood", "hard_ood"):
        assert evr["splits"][split]["per_seed"] == train["splits"][split]["per_seed"]
    assert evr["masked"] == train["masked"]


def test_negative_lambda_is_a_config_error(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text(yaml.safe_dump({**TINY_FUNCS, "network": {**TINY_FUNCS["network"], "lam": -1.0}}))
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o")]) == 2
    assert "network.lam" in capsys.readouterr().err


def test_bad_magic_checkpoint_exits_4(tmp_path, capsys):
    p = tmp_path / "x.vnck"
    p.write_bytes(b"NOPE" + b"\0" * 32)
    assert main(["eval", str(p), "--out", str(tmp_path / "o")]) == 4
    assert "offset 0" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "missing.vnck"), "--out", str(tmp_path / "o")]) == 4


def test_masked_flag_needs_funcs(cfg_file, tmp_path):
    out = str(tmp_path / "run")
    assert main(["train", "--config", cfg_file, "--out", out]) == 0
    assert main(["eval", os.path.join(out, checkpoint_name(4)), "--out", str(tmp_path / "e"), "--rollout"]) == 2


def test_verify_unknown_suite_exits_2():
    assert main(["verify", "nonsense"]) == 2


def test_verify_superposition_passes(tmp_path):
    assert main(["verify", "superposition", "--out", str(tmp_path)]) == 0
    rep = json.loads(read(tmp_path / "verify.json"))
    assert rep["passed"] and rep["suites"]["superposition"]["stats"]["max_deviation"] <= 1e-12


def test_export_config_round_trips(tmp_path):
    p = tmp_path / "ref.yaml"
    assert main(["export-config", "nbody", "--out", str(p)]) == 0
    assert yaml.safe_load(read(p))["benchmark"] == "nbody"
    assert main(["train", "--config", str(p), "--out", str(tmp_path / "o"), "--seed", "x"]) == 2


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["bench", "mnist", "--out", "/tmp/x"]) == 2
