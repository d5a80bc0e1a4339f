import csv
import json

import pytest

from meshledger import __version__
from meshledger.cli import EXIT_CONFIG, EXIT_FAILURE, EXIT_OK, OUT_DIR_ENV, main
from meshledger.config_store import ConfigStore

from conftest import small_scenario


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "scenario.json"
    ConfigStore(path).save(small_scenario(scheme="flc_hash", stop={"target_accuracy": 1.0, "max_rounds": 3}))
    return path


def test_missing_config_is_a_config_error(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().out


def test_bad_arguments_exit_with_config_code():
    assert main(["run", "--scheme", "pow"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_version(capsys):
    assert main(["--version"]) == EXIT_OK
    assert __version__ in capsys.readouterr().out


def test_run_writes_outputs(tmp_path, config):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(out), "--plot"]) == EXIT_OK
    for name in ("metrics.csv", "summary.json", "ledger.jsonl", "accuracy.png"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["scheme"] == "flc_hash" and summary["rounds"] == 3


def test_seed_and_scheme_overrides(tmp_path, config):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(out), "--seed", "9", "--scheme", "flc_model"]) == EXIT_OK
    summary = json.loads((out / "summary.json").read_text(encoding="utf-8"))
    assert summary["seed"] == 9 and summary["scheme"] == "flc_model"


def test_out_dir_from_environment(tmp_path, config, monkeypatch):
    monkeypatch.setenv(OUT_DIR_ENV, str(tmp_path / "from_env"))
    assert main(["run", "--config", str(config)]) == EXIT_OK
    assert (tmp_path / "from_env" / "metrics.csv").exists()


def test_verify_ledger_accepts_export_and_flags_tampering(tmp_path, config, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(config), "--out", str(out)]) == EXIT_OK
    ledger = out / "ledger.jsonl"
    assert main(["verify-ledger", str(ledger)]) == EXIT_OK
    assert "OK" in capsys.readouterr().out

    lines = ledger.read_text(encoding="utf-8").splitlines()
    block = json.loads(lines[3])
    block["round"] += 1000
    lines[3] = json.dumps(block)
    ledger.write_text("\n".join(lines) + "\n", encoding="utf-8")
    assert main(["verify-ledger", str(ledger)]) == EXIT_FAILURE
    assert f"block height={block['height']}" in capsys.readouterr().out


def test_verify_ledger_missing_file(tmp_path):
    assert main(["verify-ledger", str(tmp_path / "none.jsonl")]) == EXIT_CONFIG


def test_sweep_writes_one_row_per_value(tmp_path, config):
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(config), "--out", str(out), "--field", "fl.dirichlet_alpha", "--values", "5,0.2"]
    assert main([*args, "--workers", "2"]) == EXIT_OK
    with open(out / "sweep.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [row["value"] for row in rows] == ["5", "0.2"]
    assert (out / "fl.dirichlet_alpha=0.2" / "metrics.csv").exists()


def test_sweep_unknown_field(tmp_path, config):
    args = ["sweep", "--config", str(config), "--out", str(tmp_path), "--field", "fl.missing", "--values", "1"]
    assert main(args) == EXIT_CONFIG


def test_storage_and_security_commands(tmp_path, config):
    out = tmp_path / "reports"
    assert main(["storage", "--config", str(config), "--out", str(out), "--rounds", "2"]) == EXIT_OK
    assert (out / "storage.csv").exists() and (out / "storage.png").exists()
    args = ["security", "--out", str(out), "--range", "0.9,0.99", "--trials", "2", "--devices", "10"]
    assert main(args) == EXIT_OK
    assert (out / "security_litechain.csv").exists() and (out / "security_flc_hash.csv").exists()
    assert main(["storage", "--config", str(config), "--out", str(out), "--schemes", "pow"]) == EXIT_CONFIG


@pytest.mark.parametrize("text", ["0.7,abc", "0.7,0.8,0.9", "0.9,0.5"])
def test_security_malformed_range_is_a_config_error(tmp_path, capsys, text):
    args = ["security", "--out", str(tmp_path), "--range", text, "--trials", "1", "--devices", "10"]
    assert main(args) == EXIT_CONFIG
    assert "--range" in capsys.readouterr().out
