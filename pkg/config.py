"""
Configuration management for driftclass.
Centralizes model presets, training defaults, and experiment settings.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

import sde
from utils import hash_config

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

# Model presets
MODEL_PRESETS = {
    "example1": {
        "description": "Double-layer drifts -x + phi(theta (mean(x) + alpha_k)), identity diffusion, X0 ~ N(0, I_d)",
        "d": 1,
        "theta": 5.0,
        "alphas": [0.0, 1.0, -1.0],
        "size_mode": "balanced",
        "prior_mode": "true",
        "train_sizes": [3 * 2 ** j for j in range(5, 13)],
        "repetitions": 50,
    },
    "example2": {
        "description": "Cosine-squared drifts alpha_k theta (1/4 + 3/4 cos^2 x), sigma = 0.1 + 0.9/sqrt(1+x^2), X0 = 0",
        "d": 1,
        "theta": 4.0,
        "alphas": None,  # (1/theta, 1, -1)
        "size_mode": "multinomial",
        "prior_mode": "empirical",
        "train_sizes": [100, 1000],
        "repetitions": 100,
    },
}

# Drift network training defaults
TRAIN_DEFAULTS = {
    "learning_rate": 1e-3,
    "batch_size": 256,
    "max_epochs": 200,
    "patience": 20,
    "val_fraction": 0.5,
    "retrain_multiplier": 2,
    "hidden_widths": (16, 32, 32, 16),
    "s_ratio": 0.75,
}

# Search grid of the direct pathwise classifier
DIRECT_SEARCH_SPACE = {
    "learning_rate": [1e-4, 3e-4, 1e-3, 3e-3],
    "weight_decay": [0.0, 1e-5, 1e-4, 1e-3],
    "hidden_sizes": [(16, 16), (32, 32), (64, 64), (128, 128), (256, 128)],
    "batch_size": [64, 128, 256],
}

# Experiment defaults
EXPERIMENT_DEFAULTS = {
    "T": 1.0,
    "M": 100,
    "test_size_per_class": 1000,
    "bayes_reference_paths": 30000,
    "rate_window": 4,
    "max_failure_fraction": 0.2,
}

# Results archive
DATABASE_CONFIG = {
    "url": os.getenv("DATABASE_URL"),
    "pool_recycle": 3600,
}

ENV_THREADS = "DRIFTCLASS_THREADS"
ENV_LOG_LEVEL = "DRIFTCLASS_LOG_LEVEL"


class ConfigError(ValueError):
    """Raised when a configuration fails validation; carries field-path messages."""

    def __init__(self, issues: List[str]):
        self.issues = list(issues)
        super().__init__("; ".join(self.issues))


class TrainConfig(BaseModel):
    """Adam + early stopping settings for the sparse drift networks."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    learning_rate: float = Field(TRAIN_DEFAULTS["learning_rate"], gt=0)
    batch_size: int = Field(TRAIN_DEFAULTS["batch_size"], ge=1)
    max_epochs: int = Field(TRAIN_DEFAULTS["max_epochs"], ge=1)
    patience: int = Field(TRAIN_DEFAULTS["patience"], ge=1)
    val_fraction: float = Field(TRAIN_DEFAULTS["val_fraction"], gt=0, lt=1)
    retrain_multiplier: int = Field(TRAIN_DEFAULTS["retrain_multiplier"], ge=1)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    min_delta: float = Field(1e-6, ge=0)
    hidden_widths: Tuple[int, ...] = TRAIN_DEFAULTS["hidden_widths"]
    s_ratio: float = Field(TRAIN_DEFAULTS["s_ratio"], gt=0, le=1)
    clamp: Optional[float] = Field(None, gt=0)
    box_margin: float = Field(0.05, ge=0)
    check_invariants: bool = False
    seed: int = 0

    @model_validator(mode="after")
    def _check_patience(self):
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        return self


class DirectConfig(BaseModel):
    """Direct pathwise classifier baseline."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    enabled: bool = False
    search_budget: int = Field(10, ge=1)
    patience: int = Field(50, ge=1)
    max_epochs: int = Field(200, ge=1)


class ModelConfig(BaseModel):
    """Ground-truth model description as it appears in a config file."""

    model_config = ConfigDict(extra="forbid")

    preset: Literal["example1", "example2", "custom"] = "example1"
    d: int = Field(1, ge=1)
    theta: Optional[float] = None
    alphas: Optional[List[float]] = None
    drift: Literal["double_layer", "cosine_squared"] = "double_layer"
    sigma: Literal["identity", "scalar"] = "identity"
    initial: Literal["gaussian", "zero"] = "gaussian"
    priors: Optional[List[float]] = None

    @model_validator(mode="after")
    def _apply_preset(self):
        if self.preset == "example2" and self.d != 1:
            raise ValueError("example2 is one-dimensional; d must be 1")
        if self.preset != "custom" and self.theta is None:
            self.theta = get_preset(self.preset)["theta"]
        if self.preset == "custom" and self.theta is None:
            raise ValueError("custom models need theta")
        return self

    def num_classes(self) -> int:
        return len(self.alphas) if self.alphas else 3


class RateConfig(BaseModel):
    """Smoothness description for the theoretical rate curve."""

    model_config = ConfigDict(extra="forbid")

    betas: List[float] = Field(default_factory=lambda: [1.0])
    ts: Optional[List[float]] = None


class ExperimentConfig(BaseModel):
    """Seeded description of a whole sweep."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    thetas: Optional[List[float]] = None
    T: float = Field(EXPERIMENT_DEFAULTS["T"], gt=0)
    M: int = Field(EXPERIMENT_DEFAULTS["M"], ge=1)
    train_sizes: Optional[List[int]] = None
    test_size_per_class: int = Field(EXPERIMENT_DEFAULTS["test_size_per_class"], ge=1)
    repetitions: Optional[int] = Field(None, ge=1)
    size_mode: Optional[Literal["balanced", "multinomial"]] = None
    prior_mode: Optional[Literal["true", "empirical"]] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    direct: DirectConfig = Field(default_factory=DirectConfig)
    master_seed: int = 0
    output_dir: str = "results"
    bayes_reference_paths: int = Field(EXPERIMENT_DEFAULTS["bayes_reference_paths"], ge=1)
    rate: RateConfig = Field(default_factory=RateConfig)
    rate_window: int = Field(EXPERIMENT_DEFAULTS["rate_window"], ge=2)
    max_failure_fraction: float = Field(EXPERIMENT_DEFAULTS["max_failure_fraction"], ge=0, le=1)
    workers: Optional[int] = Field(None, ge=1)
    database_url: Optional[str] = None

    @model_validator(mode="after")
    def _fill_preset_defaults(self):
        preset = get_preset(self.model.preset) or get_preset("example1")
        if self.train_sizes is None:
            self.train_sizes = list(preset["train_sizes"])
        if self.repetitions is None:
            self.repetitions = preset["repetitions"]
        if self.size_mode is None:
            self.size_mode = preset["size_mode"]
        if self.prior_mode is None:
            self.prior_mode = preset["prior_mode"]
        if self.thetas is None:
            self.thetas = [self.model.theta]
        if self.rate.ts is None:
            self.rate.ts = [float(self.model.d)] * len(self.rate.betas)

        if not self.train_sizes or any(n < 1 for n in self.train_sizes):
            raise ValueError("train_sizes must be a nonempty list of positive sizes")
        if any(theta <= 0 for theta in self.thetas):
            raise ValueError("thetas must be positive")
        if self.size_mode == "balanced":
            K = self.model.num_classes()
            bad = [n for n in self.train_sizes if n % K != 0]
            if bad:
                raise ValueError(f"balanced train sizes {bad} are not divisible by K = {K}")
        if len(self.rate.ts) != len(self.rate.betas):
            raise ValueError("rate.betas and rate.ts must have the same length")
        return self


def _format_validation_error(error: ValidationError) -> List[str]:
    issues = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"]) or "<root>"
        issues.append(f"{location}: {item['msg']}")
    return issues


def _deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_experiment_config(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Validate raw configuration data.

    Args:
        data: Parsed JSON configuration
        overrides: Values taking precedence over the file (command line flags)

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigError: With one "field.path: message" entry per problem
    """
    merged = _deep_merge(data or {}, {k: v for k, v in (overrides or {}).items() if v is not None})
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as e:
        raise ConfigError(_format_validation_error(e)) from None


def load_experiment_config(path: Optional[Union[str, Path]] = None,
                           overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate a JSON configuration file.

    Args:
        path: JSON file, or None for defaults
        overrides: Values taking precedence over the file

    Returns:
        Validated ExperimentConfig
    """
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError([f"<file>: invalid JSON ({e})"]) from None
        except OSError as e:
            raise ConfigError([f"<file>: cannot read {path} ({e.strerror})"]) from None
        if not isinstance(data, dict):
            raise ConfigError(["<root>: configuration must be a JSON object"])
    return parse_experiment_config(data, overrides)


def get_preset(name: str) -> Optional[Dict[str, Any]]:
    """
    Get a model preset by name.

    Args:
        name: Preset name (case-insensitive)

    Returns:
        Preset dictionary or None if not found
    """
    return MODEL_PRESETS.get(name.lower())


def build_model_spec(model: ModelConfig, theta: Optional[float] = None) -> sde.ModelSpec:
    """
    Turn a model config into a ModelSpec.

    Args:
        model: Model section of the configuration
        theta: Optional override of the separation parameter (theta sweeps)

    Returns:
        ModelSpec ready for simulation
    """
    theta = model.theta if theta is None else theta
    priors = tuple(model.priors) if model.priors else None
    if model.preset == "example1":
        alphas = model.alphas or get_preset("example1")["alphas"]
        spec = sde.example1_spec(d=model.d, theta=theta, alphas=alphas)
    elif model.preset == "example2":
        spec = sde.example2_spec(theta=theta, alphas=model.alphas)
    else:
        alphas = tuple(model.alphas or get_preset("example1")["alphas"])
        if model.drift == "double_layer":
            drift = sde.DoubleLayerDrift(theta=theta, alphas=alphas)
        else:
            drift = sde.CosineSquaredDrift(theta=theta, alphas=alphas)
        sigma = sde.IdentitySigma() if model.sigma == "identity" else sde.ScalarSigma()
        initial = sde.StandardGaussian() if model.initial == "gaussian" else sde.PointMass(tuple([0.0] * model.d))
        return sde.ModelSpec(d=model.d, num_classes=len(alphas), drift=drift, sigma=sigma,
                             initial=initial, priors=priors)
    if priors is not None:
        spec = sde.ModelSpec(d=spec.d, num_classes=spec.K, drift=spec.drift, sigma=spec.sigma,
                             initial=spec.initial, priors=priors)
    return spec


def config_hash(config: ExperimentConfig) -> str:
    """Hash of every field that influences results (not output paths or worker counts)."""
    return hash_config(config.model_dump(mode="json", exclude={"output_dir", "workers", "database_url"}))


def get_worker_count(config: Optional[ExperimentConfig] = None) -> int:
    """Worker processes: DRIFTCLASS_THREADS, then the config value, then CPU count."""
    env_value = os.getenv(ENV_THREADS)
    if env_value:
        try:
            return max(1, int(env_value))
        except ValueError:
            logger.warning(f"Ignoring invalid {ENV_THREADS}={env_value!r}")
    if config is not None and config.workers:
        return config.workers
    return os.cpu_count() or 1


def get_log_level() -> str:
    return os.getenv(ENV_LOG_LEVEL, "INFO").upper()


def validate_config(config: ExperimentConfig) -> List[str]:
    """
    Validate an experiment configuration and return any issues.

    Returns:
        List of configuration issues (empty if all valid)
    """
    issues = []
    try:
        for theta in config.thetas:
            build_model_spec(config.model, theta)
    except sde.ModelSpecError as e:
        issues.append(f"model: {e}")
    if config.size_mode == "multinomial" and min(config.train_sizes) < config.model.num_classes():
        issues.append("train_sizes: multinomial sizes below K may leave classes without paths")
    if config.repetitions < 2:
        issues.append("repetitions: at least 2 repetitions are needed for confidence intervals")
    if config.direct.enabled and config.direct.patience > config.direct.max_epochs:
        issues.append("direct.patience: must not exceed direct.max_epochs")
    return issues
