"""
Experiment orchestration for driftclass.
Runs seeded repetitions in parallel, aggregates excess risks into rate curves
and risk tables, and writes every CSV/JSON artifact of a sweep.
"""

import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy
from tqdm import tqdm

from classify import Estimated, TrueDrift, bayes_oracle, plugin_classifier
from config import (ExperimentConfig, build_model_spec, config_hash, get_log_level,
                    get_worker_count)
from metrics import (ALL, MetricsError, RateCurvePoint, RiskEstimate, confidence_interval,
                     estimation_error, fit_rate, misclassification_risk, phi_rate, reference_curve)
from nn import train_direct_classifier, train_drift_estimator
from sde import Balanced, ModelSpec, Multinomial, generate_dataset
from utils import (FLOAT_FORMAT, SeedLike, derive_seed, ensure_writable_dir, load_json, read_jsonl,
                   save_json, seed_to_json, write_jsonl)

logger = logging.getLogger(__name__)

METHOD_PLUGIN = "plugin"
METHOD_BAYES = "bayes"
METHOD_DIRECT = "direct"

# log exponents of the N^{-1/2} (log2 N)^a reference curves
REFERENCE_LOG_POWERS = (1.5, 3.0)

BSPLINE_NOTE = "B-spline plug-in: reported in prior work, not reproduced"


class ExperimentError(RuntimeError):
    """Raised for unusable output directories and inconsistent record sets."""


class ExperimentAborted(ExperimentError):
    """Raised when too many repetitions fail."""

    def __init__(self, failed: int, total: int, errors: List[str]):
        self.failed = failed
        self.total = total
        self.errors = errors
        summary = "; ".join(errors[:5])
        super().__init__(f"{failed} of {total} repetitions failed: {summary}")


@dataclass
class RiskReport:
    """Aggregated results of a sweep."""

    points: pd.DataFrame
    table: pd.DataFrame
    rates: pd.DataFrame
    reference: pd.DataFrame
    metadata: Dict[str, Any] = field(default_factory=dict)

    def curve(self, method: str = METHOD_PLUGIN, theta: Optional[float] = None) -> List[RateCurvePoint]:
        """Rate curve of one method, ordered by N."""
        rows = self.points[self.points["method"] == method]
        if theta is not None:
            rows = rows[rows["theta"] == theta]
        return [
            RateCurvePoint(N=int(r.N), mean_excess=float(r.mean_excess), ci_lower=float(r.ci_lower),
                           ci_upper=float(r.ci_upper), n_reps=int(r.n_reps))
            for r in rows.sort_values("N").itertuples()
        ]


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------

def repetition_seed(config: ExperimentConfig, rep_index: int) -> np.random.SeedSequence:
    return derive_seed(config.master_seed, "rep", rep_index)


def _int_seed(seed: SeedLike, *tags) -> int:
    return int(derive_seed(seed, *tags).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Bayes reference
# ---------------------------------------------------------------------------

def bayes_reference_risk(spec: ModelSpec, n_paths: int, M: int, T: float,
                         seed: SeedLike) -> Tuple[RiskEstimate, Tuple[float, float, float]]:
    """
    Monte Carlo Bayes error of a model.

    Args:
        spec: Model
        n_paths: Total number of simulated paths (rounded up to a multiple of K)
        M: Steps per path
        T: Horizon
        seed: Seed of the reference sample

    Returns:
        (risk estimate, (mean, lower, upper) 95% interval of the error indicator)
    """
    per_class = max(1, math.ceil(n_paths / spec.K))
    test = generate_dataset(spec, Balanced(per_class * spec.K), M, T, seed)
    risk = misclassification_risk(bayes_oracle(spec), test)
    wrong = np.zeros(risk.n_test)
    wrong[:risk.n_test - int(np.trace(risk.confusion))] = 1.0
    return risk, confidence_interval(wrong)


def compute_bayes_references(config: ExperimentConfig) -> Dict[str, Dict[str, Any]]:
    """Bayes error per theta on a dedicated sample, keyed by repr(theta)."""
    references = {}
    for i, theta in enumerate(config.thetas):
        spec = build_model_spec(config.model, theta)
        risk, (_, lower, upper) = bayes_reference_risk(
            spec, config.bayes_reference_paths, config.M, config.T,
            derive_seed(config.master_seed, "bayes-reference", i))
        references[repr(float(theta))] = {
            "theta": float(theta),
            "error_rate": risk.error_rate,
            "ci_lower": lower,
            "ci_upper": upper,
            "n_paths": risk.n_test,
        }
        logger.info(f"Bayes reference for theta={theta}: {risk.error_rate:.4f} over {risk.n_test} paths")
    return references


# ---------------------------------------------------------------------------
# Repetitions
# ---------------------------------------------------------------------------

def _train_sizes(config: ExperimentConfig, N: int):
    return Balanced(N) if config.size_mode == "balanced" else Multinomial(N)


def _repetition_rows(config: ExperimentConfig, rep_seed: np.random.SeedSequence) -> List[Dict[str, Any]]:
    rows = []
    for ti, theta in enumerate(config.thetas):
        spec = build_model_spec(config.model, theta)
        K = spec.K
        test = generate_dataset(spec, Balanced(config.test_size_per_class * K), config.M, config.T,
                                derive_seed(rep_seed, "test", ti))
        bayes_risk = misclassification_risk(bayes_oracle(spec), test)

        for ni, N in enumerate(config.train_sizes):
            train = generate_dataset(spec, _train_sizes(config, N), config.M, config.T,
                                     derive_seed(rep_seed, "data", ti, ni))
            train_config = config.train.model_copy(update={"seed": _int_seed(rep_seed, "train", ti, ni)})
            estimators = [
                train_drift_estimator(train.paths[k], train.delta, config=train_config, label=k + 1)
                for k in range(K)
            ]
            priors = train.empirical_priors() if config.prior_mode == "empirical" else spec.priors
            plugin_risk = misclassification_risk(plugin_classifier(estimators, spec, priors), test)

            errors_all, errors_own = [], []
            for k, est in enumerate(estimators, start=1):
                errors_all.append(estimation_error(Estimated(est), TrueDrift(spec, k), test, ALL))
                errors_own.append(estimation_error(Estimated(est), TrueDrift(spec, k), test, k))

            base = {"theta": float(theta), "N": int(N), "n_test": test.N, "class_counts": train.class_counts}
            rows.append({**base, "method": METHOD_PLUGIN, "error_rate": plugin_risk.error_rate,
                         "estimation_error": errors_all, "estimation_error_own_class": errors_own,
                         "stop_epochs": [[c["stop_epoch"] for c in est.metadata["coordinates"]]
                                         for est in estimators]})
            rows.append({**base, "method": METHOD_BAYES, "error_rate": bayes_risk.error_rate})

            if config.direct.enabled:
                if K < 2:
                    direct_error = 0.0
                else:
                    direct_config = config.train.model_copy(update={"seed": _int_seed(rep_seed, "direct", ti, ni)})
                    direct = train_direct_classifier(train, config.direct.search_budget,
                                                     config=direct_config, direct=config.direct)
                    direct_error = misclassification_risk(direct, test).error_rate
                rows.append({**base, "method": METHOD_DIRECT, "error_rate": direct_error})
    return rows


def run_repetition(config: ExperimentConfig, rep_index: int) -> Dict[str, Any]:
    """
    Run one seeded repetition over every theta and training size.

    Failures are logged and returned as a record with status "failed".

    Args:
        config: Validated experiment configuration
        rep_index: Repetition number

    Returns:
        Record with rep_index, status, seed and per-(theta, N, method) rows
    """
    rep_seed = repetition_seed(config, rep_index)
    record = {
        "rep_index": int(rep_index),
        "config_hash": config_hash(config),
        "seed": seed_to_json(rep_seed),
        "status": "ok",
        "error": None,
        "rows": [],
    }
    started = time.perf_counter()
    try:
        record["rows"] = _repetition_rows(config, rep_seed)
    except Exception as e:
        logger.error(f"Repetition {rep_index} failed: {type(e).__name__}: {e}")
        record.update(status="failed", error=f"{type(e).__name__}: {e}", rows=[])
    logger.info(f"Repetition {rep_index} finished ({record['status']}) in {time.perf_counter() - started:.1f}s")
    return record


def _init_worker(level: str):
    logging.basicConfig(level=level, format="%(asctime)s %(processName)s %(name)s %(levelname)s %(message)s")


def _run_pending(config: ExperimentConfig, pending: List[int], workers: int, on_record) -> None:
    if workers <= 1 or len(pending) <= 1:
        for rep_index in tqdm(pending, desc="repetitions", unit="rep"):
            on_record(run_repetition(config, rep_index))
        return
    with ProcessPoolExecutor(max_workers=min(workers, len(pending)), initializer=_init_worker,
                             initargs=(get_log_level(),)) as pool:
        futures = [pool.submit(run_repetition, config, rep_index) for rep_index in pending]
        for future in tqdm(as_completed(futures), total=len(futures), desc="repetitions", unit="rep"):
            on_record(future.result())


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def _ok_rows(records: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    rows = [
        {"rep_index": rec["rep_index"], "theta": row["theta"], "N": row["N"],
         "method": row["method"], "error_rate": row["error_rate"]}
        for rec in records if rec.get("status") == "ok" for row in rec["rows"]
    ]
    return pd.DataFrame(rows, columns=["rep_index", "theta", "N", "method", "error_rate"])


def _interval(values: np.ndarray) -> Tuple[float, float, float]:
    if values.size >= 2:
        return confidence_interval(values)
    mean = float(values.mean())
    return mean, mean, mean


def build_report(config: ExperimentConfig, records: Sequence[Dict[str, Any]],
                 bayes_references: Dict[str, Dict[str, Any]], cfg_hash: str,
                 metadata: Optional[Dict[str, Any]] = None) -> RiskReport:
    """
    Aggregate repetition records.

    Excess risk of a repetition is its test error minus the Bayes reference
    of its theta. Failed repetitions are excluded and n_reps reflects that.
    """
    records = sorted(records, key=lambda rec: rec["rep_index"])
    frame = _ok_rows(records)

    points = []
    for (theta, N, method), group in frame.groupby(["theta", "N", "method"], sort=True):
        reference = bayes_references[repr(float(theta))]["error_rate"]
        excess = group.sort_values("rep_index")["error_rate"].to_numpy(dtype=float) - reference
        mean, lower, upper = _interval(excess)
        points.append({
            "theta": float(theta), "d": config.model.d, "N": int(N), "method": method,
            "mean_risk": mean + reference, "mean_excess": mean, "ci_lower": lower, "ci_upper": upper,
            "n_reps": int(excess.size), "config_hash": cfg_hash,
        })
    points_frame = pd.DataFrame(points, columns=["theta", "d", "N", "method", "mean_risk", "mean_excess",
                                                 "ci_lower", "ci_upper", "n_reps", "config_hash"])
    report = RiskReport(points=points_frame, table=pd.DataFrame(), rates=pd.DataFrame(),
                        reference=pd.DataFrame(), metadata=dict(metadata or {}))

    methods = [METHOD_PLUGIN] + ([METHOD_DIRECT] if config.direct.enabled else [])
    table = []
    for theta in sorted(set(points_frame["theta"])):
        reference = bayes_references[repr(float(theta))]["error_rate"]
        for N in sorted(set(points_frame.loc[points_frame["theta"] == theta, "N"])):
            block = points_frame[(points_frame["theta"] == theta) & (points_frame["N"] == N)]
            risk = dict(zip(block["method"], block["mean_risk"]))
            table.append({
                "theta": theta, "N": int(N), "bayes": reference, "bspline": np.nan,
                "nn_plugin": risk.get(METHOD_PLUGIN, np.nan),
                "direct": risk.get(METHOD_DIRECT, np.nan),
                "bayes_same_test": risk.get(METHOD_BAYES, np.nan),
                "n_reps": int(block["n_reps"].max()), "note": BSPLINE_NOTE, "config_hash": cfg_hash,
            })
    report.table = pd.DataFrame(table, columns=["theta", "N", "bayes", "bspline", "nn_plugin", "direct",
                                                "bayes_same_test", "n_reps", "note", "config_hash"])

    rates = []
    window = slice(-config.rate_window, None)
    for theta in sorted(set(points_frame["theta"])):
        for method in methods:
            curve = report.curve(method, theta)
            if len(curve[window]) < 2:
                continue
            try:
                slope = fit_rate(curve, window)
            except MetricsError as e:
                logger.warning(f"No rate fit for {method} at theta={theta}: {e}")
                slope = np.nan
            rates.append({"theta": theta, "method": method, "slope": slope,
                          "n_points": len(curve[window]), "config_hash": cfg_hash})
    report.rates = pd.DataFrame(rates, columns=["theta", "method", "slope", "n_points", "config_hash"])

    q = len(config.rate.betas) - 1
    reference_rows = []
    for theta in sorted(set(points_frame["theta"])):
        curve = [p for p in report.curve(METHOD_PLUGIN, theta) if p.N > 1]
        if not curve:
            continue
        Ns = [p.N for p in curve]
        phi = [phi_rate(q, config.rate.betas, config.rate.ts, N) for N in Ns]
        anchor_point = next((p for p in curve if p.mean_excess > 0), None)
        anchor = (anchor_point.N, anchor_point.mean_excess) if anchor_point else (Ns[0], phi[0])
        curves = {f"ref_log_{a:g}": reference_curve(Ns, a, anchor) for a in REFERENCE_LOG_POWERS}
        for i, N in enumerate(Ns):
            row = {"theta": theta, "N": N, "phi_N": phi[i]}
            row.update({name: float(values[i]) for name, values in curves.items()})
            row["config_hash"] = cfg_hash
            reference_rows.append(row)
    report.reference = pd.DataFrame(reference_rows, columns=[
        "theta", "N", "phi_N", *[f"ref_log_{a:g}" for a in REFERENCE_LOG_POWERS], "config_hash"])
    return report


def write_report(report: RiskReport, out_dir: Union[str, Path]) -> List[str]:
    """Write report.csv, table.csv, rates.csv and reference.csv."""
    out_dir = Path(out_dir)
    written = []
    for name, frame in (("report.csv", report.points), ("table.csv", report.table),
                        ("rates.csv", report.rates), ("reference.csv", report.reference)):
        frame.to_csv(out_dir / name, index=False, float_format=FLOAT_FORMAT)
        written.append(str(out_dir / name))
    logger.info(f"Report written to {out_dir}")
    return written


def report_from_directory(out_dir: Union[str, Path]) -> RiskReport:
    """
    Re-aggregate the records of a finished sweep and rewrite its CSVs.

    Raises:
        ExperimentError: If records are missing or carry a different config hash
    """
    out_dir = Path(out_dir)
    try:
        meta = load_json(out_dir / "meta.json")
        records = read_jsonl(out_dir / "records.jsonl")
    except OSError as e:
        raise ExperimentError(f"cannot read sweep outputs in {out_dir}: {e}") from None
    cfg_hash = meta["config_hash"]
    foreign = sorted({rec.get("config_hash") for rec in records} - {cfg_hash}, key=str)
    if foreign:
        raise ExperimentError(f"records with config hash {foreign} do not belong to run {cfg_hash}")
    config = ExperimentConfig.model_validate(meta["config"])
    report = build_report(config, records, meta["bayes_reference"], cfg_hash, meta)
    write_report(report, out_dir)
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _versions() -> Dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pandas": pd.__version__}


def run_experiment(config: ExperimentConfig, database=None) -> RiskReport:
    """
    Execute all repetitions and write the sweep artifacts.

    Args:
        config: Validated experiment configuration
        database: Optional ResultsDatabase; archived repetitions are reused

    Returns:
        Aggregated RiskReport

    Raises:
        ExperimentError: If the output directory is not writable
        ExperimentAborted: If more than max_failure_fraction of repetitions fail
    """
    started = time.perf_counter()
    try:
        out_dir = ensure_writable_dir(config.output_dir)
    except OSError as e:
        raise ExperimentError(f"output directory {config.output_dir} is not writable: {e}") from None

    cfg_hash = config_hash(config)
    logger.info(f"Experiment {cfg_hash}: {config.repetitions} repetitions, thetas {config.thetas}, "
                f"train sizes {config.train_sizes}")

    if database is None and config.database_url:
        from database import ResultsDatabase
        database = ResultsDatabase(config.database_url)
    archived: Dict[int, Dict[str, Any]] = {}
    if database is not None:
        database.save_run(cfg_hash, config.model_dump(mode="json"))
        archived = {i: rec for i, rec in database.get_repetitions(cfg_hash).items() if i < config.repetitions}
        if archived:
            logger.info(f"Reusing {len(archived)} archived repetitions")

    bayes_references = compute_bayes_references(config)

    records: Dict[int, Dict[str, Any]] = dict(archived)

    def on_record(record):
        records[record["rep_index"]] = record
        if database is not None and record["status"] == "ok":
            database.save_repetition(cfg_hash, record)

    pending = [i for i in range(config.repetitions) if i not in archived]
    _run_pending(config, pending, get_worker_count(config), on_record)

    ordered = [records[i] for i in sorted(records)]
    write_jsonl(ordered, out_dir / "records.jsonl")

    failed = [rec for rec in ordered if rec["status"] != "ok"]
    metadata = {
        "config": config.model_dump(mode="json"),
        "config_hash": cfg_hash,
        "master_seed": config.master_seed,
        "repetition_seeds": {str(rec["rep_index"]): rec["seed"] for rec in ordered},
        "bayes_reference": bayes_references,
        "failed_repetitions": [rec["rep_index"] for rec in failed],
        "versions": _versions(),
        "wall_time_seconds": time.perf_counter() - started,
    }
    save_json(metadata, out_dir / "meta.json")

    if len(failed) > config.max_failure_fraction * len(ordered):
        raise ExperimentAborted(len(failed), len(ordered), [f"rep {rec['rep_index']}: {rec['error']}" for rec in failed])
    if failed:
        logger.warning(f"{len(failed)} repetition(s) failed and are excluded from aggregation")

    report = build_report(config, ordered, bayes_references, cfg_hash, metadata)
    write_report(report, out_dir)
    logger.info(f"Experiment {cfg_hash} finished in {metadata['wall_time_seconds']:.1f}s")
    return report
