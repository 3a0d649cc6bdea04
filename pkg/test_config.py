from pathlib import Path

import pytest

from config import (ENV_THREADS, ConfigError, build_model_spec, config_hash, get_preset, get_worker_count,
                    load_experiment_config, parse_experiment_config, validate_config)

CONFIG_DIR = Path(__file__).parent / "configs"


def test_defaults_follow_presets():
    first = parse_experiment_config({})
    assert first.train_sizes == [3 * 2 ** j for j in range(5, 13)]
    assert (first.repetitions, first.size_mode, first.prior_mode) == (50, "balanced", "true")
    assert first.thetas == [5.0]
    second = parse_experiment_config({"model": {"preset": "example2"}})
    assert second.train_sizes == [100, 1000]
    assert (second.repetitions, second.size_mode, second.prior_mode) == (100, "multinomial", "empirical")
    assert second.M == 100 and second.test_size_per_class == 1000


def test_errors_list_field_paths():
    with pytest.raises(ConfigError) as info:
        parse_experiment_config({"M": 0, "train": {"patience": 0}, "colour": "red"})
    text = "\n".join(info.value.issues)
    assert "M:" in text
    assert "train.patience:" in text
    assert "colour:" in text


def test_model_constraints():
    with pytest.raises(ConfigError):
        parse_experiment_config({"model": {"preset": "example2", "d": 2}})
    with pytest.raises(ConfigError):
        parse_experiment_config({"model": {"preset": "custom"}})
    with pytest.raises(ConfigError):
        parse_experiment_config({"train_sizes": [100]})
    with pytest.raises(ConfigError):
        parse_experiment_config({"thetas": [0.0]})


def test_overrides_take_precedence():
    config = parse_experiment_config({"master_seed": 1, "train": {"max_epochs": 10}},
                                     {"master_seed": 9, "output_dir": None, "train": {"patience": 3}})
    assert config.master_seed == 9
    assert config.output_dir == "results"
    assert (config.train.max_epochs, config.train.patience) == (10, 3)


def test_hash_ignores_output_location():
    a = parse_experiment_config({"output_dir": "a", "workers": 1})
    b = parse_experiment_config({"output_dir": "b", "workers": 4})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(parse_experiment_config({"master_seed": 1}))
    assert len(config_hash(a)) == 16


def test_build_model_spec():
    spec = build_model_spec(parse_experiment_config({"model": {"preset": "example2"}}).model, theta=1.5)
    assert spec.K == 3 and spec.d == 1
    custom = parse_experiment_config({"model": {"preset": "custom", "theta": 2.0, "alphas": [0.0, 1.0],
                                                "sigma": "scalar", "initial": "zero"},
                                      "train_sizes": [4]})
    assert build_model_spec(custom.model).K == 2
    with_priors = parse_experiment_config({"model": {"priors": [0.2, 0.3, 0.5]}})
    assert build_model_spec(with_priors.model).priors == pytest.approx((0.2, 0.3, 0.5))


def test_validate_config_reports_issues():
    assert validate_config(parse_experiment_config({})) == []
    issues = validate_config(parse_experiment_config({"repetitions": 1, "model": {"priors": [0.5, 0.5, 0.5]}}))
    assert any(issue.startswith("model:") for issue in issues)
    assert any(issue.startswith("repetitions:") for issue in issues)


def test_get_preset():
    assert get_preset("Example2")["theta"] == 4.0
    assert get_preset("example3") is None


def test_worker_count(monkeypatch):
    monkeypatch.setenv(ENV_THREADS, "3")
    assert get_worker_count() == 3
    assert get_worker_count(parse_experiment_config({"workers": 2})) == 3
    monkeypatch.delenv(ENV_THREADS)
    assert get_worker_count(parse_experiment_config({"workers": 2})) == 2
    monkeypatch.setenv(ENV_THREADS, "many")
    assert get_worker_count(parse_experiment_config({"workers": 2})) == 2
    assert get_worker_count() >= 1


def test_shipped_configs_are_valid():
    for path in sorted(CONFIG_DIR.glob("*.json")):
        config = load_experiment_config(path)
        assert validate_config(config) == []


def test_load_rejects_malformed_file(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_experiment_config(path)
    path.write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_experiment_config(path)
