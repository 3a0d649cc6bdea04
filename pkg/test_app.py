import json

import pandas as pd
import pytest

import database
from app import cli_main
from utils import load_json

REPORT_FILES = ("report.csv", "table.csv", "rates.csv", "reference.csv")


@pytest.fixture
def config_file(tiny_experiment_data, tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_experiment_data))
    return str(path)


def test_simulate_writes_dataset(config_file, tmp_path, capsys):
    out = tmp_path / "data"
    assert cli_main(["simulate", "--config", config_file, "--seed", "7", "--out", str(out), "--n", "9"]) == 0
    assert (out / "dataset.csv").exists()
    assert load_json(out / "dataset.json")["class_counts"] == [3, 3, 3]
    assert "class counts" in capsys.readouterr().out


def test_unknown_config_key_is_a_config_error(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"M": 10, "horizon": 2.0}))
    assert cli_main(["simulate", "--config", str(path)]) == 2
    assert "horizon" in capsys.readouterr().err


def test_invalid_value_is_a_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"M": 0}))
    assert cli_main(["simulate", "--config", str(path)]) == 2


def test_missing_config_file_is_a_usage_error(tmp_path):
    assert cli_main(["simulate", "--config", str(tmp_path / "missing.json")]) == 2


def test_report_without_records_fails(tmp_path):
    assert cli_main(["report", "--out", str(tmp_path)]) == 1


def test_train_and_evaluate_pipeline(config_file, tmp_path):
    data = tmp_path / "data"
    models = tmp_path / "models"
    assert cli_main(["simulate", "--config", config_file, "--seed", "1", "--out", str(data), "--n", "12"]) == 0
    assert cli_main(["simulate", "--config", config_file, "--seed", "2", "--out", str(data), "--n", "9",
                     "--name", "test"]) == 0
    assert cli_main(["train-drift", "--config", config_file, "--out", str(models),
                     "--data", str(data / "dataset.csv")]) == 0
    for k in (1, 2, 3):
        assert (models / f"drift_class_{k}.json").exists()

    assert cli_main(["evaluate", "--config", config_file, "--out", str(models), "--data", str(data / "test.csv"),
                     "--models", str(models)]) == 0
    predictions = pd.read_csv(models / "predictions_plugin.csv")
    assert len(predictions) == 9
    confusion = pd.read_csv(models / "confusion_plugin.csv")
    assert confusion["count"].sum() == 9

    assert cli_main(["evaluate", "--config", config_file, "--out", str(models), "--data", str(data / "test.csv"),
                     "--method", "bayes"]) == 0
    assert (models / "predictions_bayes.csv").exists()


def test_evaluate_without_models_is_a_usage_error(config_file, tmp_path):
    data = tmp_path / "data"
    cli_main(["simulate", "--config", config_file, "--out", str(data), "--n", "9"])
    assert cli_main(["evaluate", "--config", config_file, "--out", str(data),
                     "--data", str(data / "dataset.csv")]) == 2


def test_train_direct(config_file, tmp_path):
    data = tmp_path / "data"
    cli_main(["simulate", "--config", config_file, "--out", str(data), "--n", "12"])
    path = tmp_path / "direct.json"
    path.write_text(json.dumps({"M": 10, "model": {"preset": "example2"},
                                "direct": {"enabled": True, "max_epochs": 3, "patience": 1}}))
    assert cli_main(["train-direct", "--config", str(path), "--out", str(data),
                     "--data", str(data / "dataset.csv"), "--budget", "1"]) == 0
    assert (data / "direct.json").exists()


def test_bayes_risk(config_file, tmp_path, capsys):
    out = tmp_path / "bayes"
    assert cli_main(["bayes-risk", "--config", config_file, "--paths", "30", "--out", str(out)]) == 0
    assert "Bayes error:" in capsys.readouterr().out
    saved = load_json(out / "bayes_risk.json")
    assert saved["n_paths"] == 30
    assert saved["ci_lower"] <= saved["error_rate"] <= saved["ci_upper"]


def test_experiment_then_report_is_identical(config_file, tmp_path):
    out = tmp_path / "sweep"
    assert cli_main(["experiment", "--config", config_file, "--out", str(out)]) == 0
    before = {name: (out / name).read_bytes() for name in REPORT_FILES}
    assert cli_main(["report", "--config", config_file, "--out", str(out)]) == 0
    assert {name: (out / name).read_bytes() for name in REPORT_FILES} == before


def test_report_refuses_other_seed(config_file, tmp_path):
    out = tmp_path / "sweep"
    assert cli_main(["experiment", "--config", config_file, "--out", str(out), "--repetitions", "2"]) == 0
    assert cli_main(["report", "--config", config_file, "--seed", "99", "--out", str(out)]) == 1


def test_archive_lists_and_prunes_runs(tiny_experiment_data, tmp_path, capsys):
    url = f"sqlite:///{tmp_path / 'archive.db'}"
    path = tmp_path / "archived.json"
    path.write_text(json.dumps(dict(tiny_experiment_data, database_url=url)))
    assert cli_main(["experiment", "--config", str(path)]) == 0
    meta = load_json(tmp_path / "results" / "meta.json")
    capsys.readouterr()

    assert cli_main(["archive", "--config", str(path)]) == 0
    listing = capsys.readouterr().out
    assert meta["config_hash"] in listing
    assert "2 repetition(s)" in listing

    assert cli_main(["archive", "--database-url", url, "--prune=-1"]) == 0
    output = capsys.readouterr().out
    assert "Pruned 1 run(s)" in output
    assert "No archived runs" in output


def test_archive_needs_a_database(tmp_path, monkeypatch):
    monkeypatch.setitem(database.DATABASE_CONFIG, "url", None)
    monkeypatch.delenv("DATABASE_URL", raising=False)
    assert cli_main(["archive"]) == 2
