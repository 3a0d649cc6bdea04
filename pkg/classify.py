"""
Plug-in classification of discretely observed diffusion paths.
Implements the discretized log-likelihood score shared by the Bayes oracle
and the plug-in classifier, prior-weighted softmax posteriors, and
prediction dumps.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from sde import LabeledDataset, ModelSpec, Trajectory
from utils import FLOAT_FORMAT

logger = logging.getLogger(__name__)

# paths scored per vectorized chunk
CHUNK_SIZE = 2048


class ScoreError(ArithmeticError):
    """Raised when sigma sigma^T is singular at a grid point."""

    def __init__(self, step: int, path: int = 0):
        self.step = step
        self.path = path
        super().__init__(f"singular diffusion matrix at grid index {step} (path {path})")


@dataclass(frozen=True)
class TrueDrift:
    """The known class-k drift of a model."""

    spec: ModelSpec
    k: int

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.spec.drift(self.k, x), dtype=float)


@dataclass(frozen=True)
class Estimated:
    """A fitted drift estimator behind the same interface."""

    estimator: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.estimator(x), dtype=float)


DriftEvaluator = Union[TrueDrift, Estimated]


def _first_bad(flags: np.ndarray) -> Tuple[int, int]:
    path, step = np.unravel_index(int(np.argmax(flags)), flags.shape)
    return int(path), int(step)


def _apply_inverse_diffusion(spec: ModelSpec, X: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a(x)^{-1} b for every grid point, a = sigma sigma^T; X and b have shape (n, M, d)."""
    sigma = spec.sigma
    if sigma.kind == "identity":
        return b
    if sigma.kind == "scalar":
        s2 = sigma.scalar(X) ** 2
        bad = ~(s2 > 0) | ~np.isfinite(s2)
        if bad.any():
            path, step = _first_bad(bad)
            raise ScoreError(step, path)
        return b / s2[..., None]

    S = sigma.matrix(X)
    A = S @ np.swapaxes(S, -1, -2)
    try:
        chol = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        n, M = X.shape[:2]
        for path in range(n):
            for step in range(M):
                try:
                    np.linalg.cholesky(A[path, step])
                except np.linalg.LinAlgError:
                    raise ScoreError(step, path) from None
        raise
    z = np.linalg.solve(chol, b[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), z)[..., 0]


def score_batch(drift: DriftEvaluator, spec: ModelSpec, states: np.ndarray, delta: float) -> np.ndarray:
    """
    Discretized score for many paths at once.

    sum_m b(X_m)^T a^{-1}(X_m) (X_{m+1} - X_m) - (delta / 2) sum_m b(X_m)^T a^{-1}(X_m) b(X_m)

    Args:
        drift: Drift evaluator mapping (..., d) to (..., d)
        spec: Model (supplies the known diffusion coefficient)
        states: Paths of shape (n, M+1, d)
        delta: Time step

    Returns:
        Scores of shape (n,)
    """
    states = np.asarray(states, dtype=float)
    if states.ndim != 3 or states.shape[2] != spec.d:
        raise ValueError(f"paths of shape {states.shape} do not match d = {spec.d}")
    X = states[:, :-1, :]
    dX = np.diff(states, axis=1)
    b = np.asarray(drift(X), dtype=float)
    ainv_b = _apply_inverse_diffusion(spec, X, b)
    return np.sum(ainv_b * dX, axis=(1, 2)) - 0.5 * delta * np.sum(ainv_b * b, axis=(1, 2))


def score_discretized(drift: DriftEvaluator, spec: ModelSpec, traj: Trajectory) -> float:
    """
    Discretized score of one trajectory under one drift.

    Raises:
        ScoreError: If a(x) is singular at some grid point (reports the index)
    """
    return float(score_batch(drift, spec, traj.states[None], traj.delta)[0])


def posteriors(scores, priors: Sequence[float]) -> np.ndarray:
    """
    pi_k = p_k e^{x_k} / sum_j p_j e^{x_j}, computed in shifted form.

    Args:
        scores: Shape (K,) or (n, K)
        priors: K positive probabilities

    Returns:
        Posteriors with the shape of scores
    """
    scores = np.asarray(scores, dtype=float)
    priors = np.asarray(priors, dtype=float)
    if scores.shape[-1] != priors.size:
        raise ValueError(f"{scores.shape[-1]} scores for {priors.size} priors")
    return softmax(scores + np.log(priors), axis=-1)


def classify(post) -> Union[int, np.ndarray]:
    """
    Label with the largest posterior; ties go to the smallest label.

    Returns:
        1-based label (array of labels for 2-D input)
    """
    post = np.asarray(post, dtype=float)
    labels = np.argmax(post, axis=-1) + 1
    return int(labels) if labels.ndim == 0 else labels


class PlugInClassifier:
    """Scores each class with its drift evaluator and applies the prior-weighted softmax."""

    def __init__(self, drifts: List[DriftEvaluator], spec: ModelSpec, priors: Optional[Sequence[float]] = None):
        if len(drifts) != spec.K:
            raise ValueError(f"{len(drifts)} drift evaluators for {spec.K} classes")
        self.drifts = list(drifts)
        self.spec = spec
        self.priors = tuple(spec.priors if priors is None else priors)

    @property
    def K(self) -> int:
        return len(self.drifts)

    def scores(self, states: np.ndarray, delta: float) -> np.ndarray:
        """Class scores of shape (n, K)."""
        states = np.asarray(states, dtype=float)
        out = np.empty((states.shape[0], self.K))
        for start in range(0, states.shape[0], CHUNK_SIZE):
            chunk = states[start:start + CHUNK_SIZE]
            for k, drift in enumerate(self.drifts):
                out[start:start + CHUNK_SIZE, k] = score_batch(drift, self.spec, chunk, delta)
        return out

    def posteriors(self, states: np.ndarray, delta: float) -> np.ndarray:
        return posteriors(self.scores(states, delta), self.priors)

    def predict(self, states: np.ndarray, delta: float) -> np.ndarray:
        return np.atleast_1d(classify(self.posteriors(states, delta)))

    def __call__(self, traj: Trajectory) -> int:
        return int(self.predict(traj.states[None], traj.delta)[0])


def plugin_classifier(estimators: Sequence[Callable], spec: ModelSpec,
                      priors: Optional[Sequence[float]] = None) -> PlugInClassifier:
    """Plug-in classifier from fitted drift estimators ordered by class."""
    return PlugInClassifier([Estimated(est) for est in estimators], spec, priors)


def bayes_oracle(spec: ModelSpec, priors: Optional[Sequence[float]] = None) -> PlugInClassifier:
    """The discretized Bayes rule built from the true drifts."""
    return PlugInClassifier([TrueDrift(spec, k) for k in range(1, spec.K + 1)], spec, priors)


def predict_labels(classifier, dataset: LabeledDataset) -> Tuple[np.ndarray, np.ndarray]:
    """
    Predict every path of a dataset.

    Returns:
        (true labels, predicted labels), both 1-based, in stacked order
    """
    states, labels = dataset.stacked()
    if isinstance(classifier, PlugInClassifier):
        predicted = classifier.predict(states, dataset.delta)
    elif hasattr(classifier, "predict"):
        predicted = np.asarray(classifier.predict(states))
    else:
        predicted = np.array([classifier(traj) for _, traj in dataset.trajectories()], dtype=int)
    return labels, predicted


def write_predictions(classifier, dataset: LabeledDataset, path: Union[str, Path],
                      config_hash: Optional[str] = None) -> str:
    """
    Write path_id, true_label, predicted_label, score_1..K, posterior_1..K.

    The direct classifier has no scores; its logits fill the score columns.
    """
    states, labels = dataset.stacked()
    if isinstance(classifier, PlugInClassifier):
        scores = classifier.scores(states, dataset.delta)
        post = posteriors(scores, classifier.priors)
    else:
        scores = classifier.logits(states)
        post = classifier.predict_proba(states)
    frame = pd.DataFrame({
        "path_id": np.arange(labels.size),
        "true_label": labels,
        "predicted_label": np.atleast_1d(classify(post)),
    })
    for k in range(scores.shape[1]):
        frame[f"score_{k + 1}"] = scores[:, k]
    for k in range(post.shape[1]):
        frame[f"posterior_{k + 1}"] = post[:, k]
    if config_hash is not None:
        frame["config_hash"] = config_hash
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Predictions written to {path}")
    return str(path)
