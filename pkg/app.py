"""
Command line entry point for driftclass.
Simulate datasets, train drift estimators and the direct baseline, evaluate
saved models, estimate Bayes errors, and run or re-aggregate experiments.
"""

import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

import click

from classify import bayes_oracle, plugin_classifier, write_predictions
from config import (ConfigError, ExperimentConfig, build_model_spec, config_hash, get_log_level,
                    load_experiment_config, validate_config)
from harness import bayes_reference_risk, report_from_directory, run_experiment
from metrics import misclassification_risk, write_confusion
from nn import (load_direct_classifier, load_estimator, save_direct_classifier, save_estimator,
                train_direct_classifier, train_drift_estimator)
from sde import Balanced, Multinomial, generate_dataset, load_dataset, save_dataset
from utils import derive_seed, ensure_writable_dir, load_json, save_json

logger = logging.getLogger(__name__)

PLUGIN_FILE = "plugin.json"
DIRECT_FILE = "direct.json"


def _estimator_file(k: int) -> str:
    return f"drift_class_{k}.json"


def _load_config(config_path: Optional[str], seed: Optional[int] = None, out: Optional[str] = None,
                 **extra: Any) -> ExperimentConfig:
    overrides: Dict[str, Any] = {"master_seed": seed, "output_dir": out}
    overrides.update(extra)
    config = load_experiment_config(config_path, {k: v for k, v in overrides.items() if v is not None})
    for issue in validate_config(config):
        logger.warning(f"Config: {issue}")
    return config


def _output_dir(config: ExperimentConfig) -> Path:
    try:
        return ensure_writable_dir(config.output_dir)
    except OSError as e:
        raise click.ClickException(f"output directory {config.output_dir} is not writable: {e}")


def common_options(func):
    """--config, --seed and --out, shared by every subcommand."""
    func = click.option("--out", "out", type=click.Path(file_okay=False),
                        help="Output directory (overrides output_dir).")(func)
    func = click.option("--seed", type=int, help="Master seed (overrides master_seed).")(func)
    func = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                        help="JSON experiment configuration.")(func)
    return func


@click.group()
def cli():
    """Classify diffusion paths by their drift."""


@cli.command()
@common_options
@click.option("--n", "n_paths", type=int, help="Total number of paths (default: first train size).")
@click.option("--theta", type=float, help="Separation parameter (default: model theta).")
@click.option("--name", default="dataset", show_default=True, help="File stem of the dataset.")
def simulate(config_path, seed, out, n_paths, theta, name):
    """Simulate a labeled dataset and write CSV plus JSON sidecar."""
    config = _load_config(config_path, seed, out)
    spec = build_model_spec(config.model, theta)
    n_paths = n_paths if n_paths is not None else config.train_sizes[0]
    sizes = Balanced(n_paths) if config.size_mode == "balanced" else Multinomial(n_paths)
    dataset = generate_dataset(spec, sizes, config.M, config.T, config.master_seed)
    dataset.config_hash = config_hash(config)
    csv_path, json_path = save_dataset(dataset, _output_dir(config) / name)
    click.echo(f"Wrote {csv_path} and {json_path} (class counts {dataset.class_counts})")


@cli.command("train-drift")
@common_options
@click.option("--data", "data_path", required=True, type=click.Path(exists=True), help="Training dataset CSV.")
def train_drift(config_path, seed, out, data_path):
    """Train one sparse drift estimator per class."""
    config = _load_config(config_path, seed, out)
    dataset = load_dataset(data_path)
    out_dir = _output_dir(config)
    train_config = config.train.model_copy(update={"seed": config.master_seed})
    for k in range(1, dataset.K + 1):
        estimator = train_drift_estimator(dataset.paths[k - 1], dataset.delta, config=train_config, label=k)
        save_estimator(estimator, out_dir / _estimator_file(k))
    priors = dataset.empirical_priors() if config.prior_mode == "empirical" else None
    save_json({"K": dataset.K, "priors": priors, "prior_mode": config.prior_mode,
               "config_hash": config_hash(config)}, out_dir / PLUGIN_FILE)
    click.echo(f"Trained {dataset.K} drift estimators into {out_dir}")


@cli.command("train-direct")
@common_options
@click.option("--data", "data_path", required=True, type=click.Path(exists=True), help="Training dataset CSV.")
@click.option("--budget", type=int, help="Search budget (default: direct.search_budget).")
def train_direct(config_path, seed, out, data_path, budget):
    """Train the direct pathwise classifier by random search."""
    config = _load_config(config_path, seed, out)
    dataset = load_dataset(data_path)
    train_config = config.train.model_copy(update={"seed": config.master_seed})
    classifier = train_direct_classifier(dataset, budget or config.direct.search_budget,
                                         config=train_config, direct=config.direct)
    path = save_direct_classifier(classifier, _output_dir(config) / DIRECT_FILE)
    click.echo(f"Direct classifier (val accuracy {classifier.val_accuracy:.4f}) saved to {path}")


@cli.command()
@common_options
@click.option("--data", "data_path", required=True, type=click.Path(exists=True), help="Test dataset CSV.")
@click.option("--models", "models_dir", type=click.Path(exists=True, file_okay=False),
              help="Directory with saved models (not needed for --method bayes).")
@click.option("--method", type=click.Choice(["plugin", "bayes", "direct"]), default="plugin", show_default=True)
@click.option("--theta", type=float, help="Separation parameter of the model (default: model theta).")
def evaluate(config_path, seed, out, data_path, models_dir, method, theta):
    """Classify a dataset with saved models; write predictions and confusion matrix."""
    config = _load_config(config_path, seed, out)
    dataset = load_dataset(data_path)
    spec = build_model_spec(config.model, theta)
    if spec.K != dataset.K:
        raise click.UsageError(f"dataset has {dataset.K} classes, model has {spec.K}")
    if method != "bayes" and models_dir is None:
        raise click.UsageError(f"--models is required for --method {method}")

    if method == "bayes":
        classifier = bayes_oracle(spec)
    elif method == "direct":
        classifier = load_direct_classifier(Path(models_dir) / DIRECT_FILE)
    else:
        models = Path(models_dir)
        estimators = [load_estimator(models / _estimator_file(k)) for k in range(1, spec.K + 1)]
        plugin_meta = load_json(models / PLUGIN_FILE) if (models / PLUGIN_FILE).exists() else {}
        classifier = plugin_classifier(estimators, spec, plugin_meta.get("priors"))

    out_dir = _output_dir(config)
    cfg_hash = config_hash(config)
    risk = misclassification_risk(classifier, dataset)
    write_predictions(classifier, dataset, out_dir / f"predictions_{method}.csv", cfg_hash)
    write_confusion(risk, out_dir / f"confusion_{method}.csv", cfg_hash)
    click.echo(f"{method} error rate: {risk.error_rate:.6f} over {risk.n_test} paths")


@cli.command("bayes-risk")
@common_options
@click.option("--paths", "n_paths", type=int, help="Number of Monte Carlo paths (default: bayes_reference_paths).")
@click.option("--theta", type=float, help="Separation parameter (default: model theta).")
def bayes_risk(config_path, seed, out, n_paths, theta):
    """Monte Carlo Bayes error of the configured model, with a 95% interval."""
    config = _load_config(config_path, seed, out)
    spec = build_model_spec(config.model, theta)
    n_paths = n_paths or config.bayes_reference_paths
    risk, (_, lower, upper) = bayes_reference_risk(spec, n_paths, config.M, config.T,
                                                   derive_seed(config.master_seed, "bayes-reference"))
    click.echo(f"Bayes error: {risk.error_rate:.6f} (95% CI [{lower:.6f}, {upper:.6f}], {risk.n_test} paths)")
    if out is not None:
        save_json({"theta": theta if theta is not None else config.model.theta, "error_rate": risk.error_rate,
                   "ci_lower": lower, "ci_upper": upper, "n_paths": risk.n_test,
                   "config_hash": config_hash(config)}, _output_dir(config) / "bayes_risk.json")


@cli.command()
@common_options
@click.option("--repetitions", type=int, help="Number of repetitions.")
@click.option("--workers", type=int, help="Worker processes (DRIFTCLASS_THREADS takes precedence; default: CPU count).")
def experiment(config_path, seed, out, repetitions, workers):
    """Run a full seeded sweep and write its report."""
    config = _load_config(config_path, seed, out, repetitions=repetitions, workers=workers)
    report = run_experiment(config)
    click.echo(report.points.to_string(index=False))
    click.echo(f"Artifacts written to {config.output_dir}")


@cli.command()
@common_options
def report(config_path, seed, out):
    """Re-aggregate saved records into the report CSVs."""
    out_dir = out
    if config_path is not None or seed is not None:
        config = _load_config(config_path, seed, out)
        out_dir = out_dir or config.output_dir
        expected = config_hash(config)
        found = load_json(Path(out_dir) / "meta.json").get("config_hash")
        if found != expected:
            raise click.ClickException(f"records in {out_dir} belong to run {found}, not {expected}")
    out_dir = out_dir or "results"
    result = report_from_directory(out_dir)
    click.echo(f"Re-aggregated {len(result.points)} report rows in {out_dir}")


@cli.command()
@common_options
@click.option("--database-url", help="SQLAlchemy URL (default: config database_url, then DATABASE_URL).")
@click.option("--days", type=int, default=30, show_default=True, help="List runs registered in the last DAYS days.")
@click.option("--limit", type=int, default=10, show_default=True, help="Maximum number of runs listed.")
@click.option("--prune", "days_to_keep", type=int, help="Delete runs older than this many days first.")
def archive(config_path, seed, out, database_url, days, limit, days_to_keep):
    """List archived sweeps, optionally pruning old ones."""
    from database import ResultsDatabase

    config = _load_config(config_path, seed, out)
    try:
        database = ResultsDatabase(database_url or config.database_url)
    except ValueError as e:
        raise click.UsageError(str(e))
    if days_to_keep is not None:
        click.echo(f"Pruned {database.cleanup_old_runs(days_to_keep)} run(s) older than {days_to_keep} days")
    runs = database.get_recent_runs(limit=limit, days=days)
    for run in runs:
        click.echo(f"{run['config_hash']}  {run['created_at']}  {run['repetitions']} repetition(s)")
    if not runs:
        click.echo("No archived runs")


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Run the command line interface.

    Returns:
        0 on success, 2 on configuration or usage errors, 1 on runtime errors
    """
    logging.basicConfig(level=get_log_level(), format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        result = cli.main(args=argv, prog_name="driftclass", standalone_mode=False)
    except ConfigError as e:
        click.echo("Configuration error:", err=True)
        for issue in e.issues:
            click.echo(f"  {issue}", err=True)
        return 2
    except click.UsageError as e:
        e.show()
        return 2
    except click.ClickException as e:
        e.show()
        return 1
    except click.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except Exception as e:
        logger.error(f"{type(e).__name__}: {e}")
        click.echo(f"Error: {e}", err=True)
        return 1
    return result if isinstance(result, int) else 0


if __name__ == "__main__":
    sys.exit(cli_main())
