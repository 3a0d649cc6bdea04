"""
Ground-truth diffusion models and trajectory simulation.
Defines the class-specific drift catalog, Euler-Maruyama path generation,
labeled datasets, and their CSV + JSON sidecar storage.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.stats import norm

from utils import FLOAT_FORMAT, SeedLike, derive_seed, load_json, make_rng, save_json, seed_from_json, seed_to_json

logger = logging.getLogger(__name__)

PRIOR_TOLERANCE = 1e-12


class ModelSpecError(ValueError):
    """Raised when a model description violates its invariants."""


class SimulationError(RuntimeError):
    """Raised when a simulated state stops being finite."""

    def __init__(self, step: int, path: int = 0, label: Optional[int] = None):
        self.step = step
        self.path = path
        self.label = label
        where = f"class {label}, " if label is not None else ""
        super().__init__(f"Non-finite state at step {step} ({where}path {path})")


def standard_normal_pdf(u):
    """Default bump of the double-layer drift."""
    return norm.pdf(u)


# ---------------------------------------------------------------------------
# Drift families. Every family maps states of shape (..., d) to (..., d).
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DoubleLayerDrift:
    """b_k(x) = -x + bump(theta * (mean(x) + alpha_k)) * 1_d"""

    theta: float
    alphas: Tuple[float, ...]
    bump: Callable = standard_normal_pdf

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        s = x.mean(axis=-1, keepdims=True)
        return -x + self.bump(self.theta * (s + self.alphas[k - 1]))


@dataclass(frozen=True)
class CosineSquaredDrift:
    """b_k(x) = alpha_k * theta * (1/4 + 3/4 cos^2 x), scalar states only."""

    theta: float
    alphas: Tuple[float, ...]

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        return self.alphas[k - 1] * self.theta * (0.25 + 0.75 * np.cos(x) ** 2)


@dataclass(frozen=True)
class CustomDrift:
    """One user supplied vector field per class, each vectorized over (..., d)."""

    fields: Tuple[Callable, ...]

    def __call__(self, k: int, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fields[k - 1](x), dtype=float), x.shape)


DriftFamily = Union[DoubleLayerDrift, CosineSquaredDrift, CustomDrift]


# ---------------------------------------------------------------------------
# Diffusion coefficients
# ---------------------------------------------------------------------------

def example2_sigma(x: np.ndarray) -> np.ndarray:
    """sigma(x) = 0.1 + 0.9 / sqrt(1 + |x|^2)"""
    return 0.1 + 0.9 / np.sqrt(1.0 + np.sum(x * x, axis=-1))


@dataclass(frozen=True)
class IdentitySigma:
    kind: str = field(default="identity", init=False)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        d = x.shape[-1]
        return np.broadcast_to(np.eye(d), x.shape[:-1] + (d, d)).copy()


@dataclass(frozen=True)
class ScalarSigma:
    """sigma(x) = fn(x) * I_d with fn mapping (..., d) to (...)."""

    fn: Callable = example2_sigma
    kind: str = field(default="scalar", init=False)

    def scalar(self, x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.fn(x), dtype=float), x.shape[:-1])

    def matrix(self, x: np.ndarray) -> np.ndarray:
        d = x.shape[-1]
        return self.scalar(x)[..., None, None] * np.eye(d)


@dataclass(frozen=True)
class MatrixSigma:
    """Arbitrary matrix field, fn mapping (..., d) to (..., d, d)."""

    fn: Callable
    kind: str = field(default="matrix", init=False)

    def matrix(self, x: np.ndarray) -> np.ndarray:
        d = x.shape[-1]
        return np.broadcast_to(np.asarray(self.fn(x), dtype=float), x.shape[:-1] + (d, d))


SigmaFamily = Union[IdentitySigma, ScalarSigma, MatrixSigma]


# ---------------------------------------------------------------------------
# Initial laws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class StandardGaussian:
    def sample(self, d: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(d)


@dataclass(frozen=True)
class PointMass:
    value: Tuple[float, ...]

    def sample(self, d: int, rng: np.random.Generator) -> np.ndarray:
        return np.array(self.value, dtype=float).reshape(d)


InitialLaw = Union[StandardGaussian, PointMass]


@dataclass(frozen=True)
class ModelSpec:
    """Ground-truth generator: drifts per class, diffusion, initial law and priors."""

    d: int
    num_classes: int
    drift: DriftFamily
    sigma: SigmaFamily = field(default_factory=IdentitySigma)
    initial: InitialLaw = field(default_factory=StandardGaussian)
    priors: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.d < 1:
            raise ModelSpecError(f"dimension must be positive, got {self.d}")
        if self.num_classes < 1:
            raise ModelSpecError(f"num_classes must be positive, got {self.num_classes}")

        priors = self.priors
        if priors is None:
            priors = tuple([1.0 / self.num_classes] * self.num_classes)
        priors = tuple(float(p) for p in priors)
        object.__setattr__(self, "priors", priors)
        if len(priors) != self.num_classes:
            raise ModelSpecError(f"expected {self.num_classes} priors, got {len(priors)}")
        if min(priors) <= 0:
            raise ModelSpecError("every prior must be positive")
        if abs(math.fsum(priors) - 1.0) > PRIOR_TOLERANCE:
            raise ModelSpecError(f"priors sum to {math.fsum(priors)!r}, not 1")

        if isinstance(self.drift, (DoubleLayerDrift, CosineSquaredDrift)):
            if len(self.drift.alphas) != self.num_classes:
                raise ModelSpecError(
                    f"drift has {len(self.drift.alphas)} alphas for {self.num_classes} classes"
                )
        if isinstance(self.drift, CosineSquaredDrift) and self.d != 1:
            raise ModelSpecError("the cosine-squared drift is defined for d = 1 only")
        if isinstance(self.drift, CustomDrift) and len(self.drift.fields) != self.num_classes:
            raise ModelSpecError(
                f"custom drift has {len(self.drift.fields)} fields for {self.num_classes} classes"
            )
        if isinstance(self.initial, PointMass) and len(self.initial.value) != self.d:
            raise ModelSpecError(f"point mass has length {len(self.initial.value)}, expected {self.d}")

    @property
    def K(self) -> int:
        return self.num_classes


def example1_spec(d: int = 1, theta: float = 5.0, alphas: Sequence[float] = (0.0, 1.0, -1.0)) -> ModelSpec:
    """Double-layer drifts, identity diffusion, standard Gaussian start."""
    return ModelSpec(
        d=d,
        num_classes=len(alphas),
        drift=DoubleLayerDrift(theta=float(theta), alphas=tuple(float(a) for a in alphas)),
        sigma=IdentitySigma(),
        initial=StandardGaussian(),
    )


def example2_spec(theta: float, alphas: Optional[Sequence[float]] = None) -> ModelSpec:
    """Cosine-squared drifts, state-dependent scalar diffusion, start at 0."""
    if alphas is None:
        alphas = (1.0 / theta, 1.0, -1.0)
    return ModelSpec(
        d=1,
        num_classes=len(alphas),
        drift=CosineSquaredDrift(theta=float(theta), alphas=tuple(float(a) for a in alphas)),
        sigma=ScalarSigma(),
        initial=PointMass((0.0,)),
    )


# ---------------------------------------------------------------------------
# Trajectories and datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Trajectory:
    """One path observed on the grid t_m = m * delta, m = 0..M."""

    states: np.ndarray
    delta: float
    horizon: float

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim == 1:
            states = states[:, None]
        object.__setattr__(self, "states", states)
        if states.ndim != 2 or states.shape[0] < 2:
            raise ValueError(f"states must be an (M+1) x d grid with M >= 1, got shape {states.shape}")
        if self.delta <= 0 or self.horizon <= 0:
            raise ValueError("delta and horizon must be positive")
        if abs(self.delta * self.M - self.horizon) > 1e-12:
            raise ValueError(f"delta * M = {self.delta * self.M!r} does not match T = {self.horizon!r}")

    @property
    def M(self) -> int:
        return self.states.shape[0] - 1

    @property
    def d(self) -> int:
        return self.states.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.delta * np.arange(self.M + 1)


@dataclass(frozen=True)
class Balanced:
    N: int


@dataclass(frozen=True)
class Multinomial:
    N: int


ClassSizes = Union[Balanced, Multinomial]


@dataclass
class LabeledDataset:
    """Labeled paths grouped by class; paths[k-1] has shape (N_k, M+1, d)."""

    paths: List[np.ndarray]
    delta: float
    horizon: float
    seed: Optional[SeedLike] = None
    config_hash: Optional[str] = None

    def __post_init__(self):
        shapes = {p.shape[1:] for p in self.paths}
        if len(shapes) != 1:
            raise ValueError(f"all trajectories must share (M+1, d), got {sorted(shapes)}")
        if abs(self.delta * self.M - self.horizon) > 1e-12:
            raise ValueError("delta * M does not match the horizon")

    @property
    def K(self) -> int:
        return len(self.paths)

    @property
    def M(self) -> int:
        return self.paths[0].shape[1] - 1

    @property
    def d(self) -> int:
        return self.paths[0].shape[2]

    @property
    def class_counts(self) -> List[int]:
        return [int(p.shape[0]) for p in self.paths]

    @property
    def N(self) -> int:
        return sum(self.class_counts)

    def empirical_priors(self) -> Tuple[float, ...]:
        """p_k = N_k / N"""
        if self.N == 0:
            raise ValueError("empty dataset has no empirical priors")
        return tuple(n / self.N for n in self.class_counts)

    def stacked(self) -> Tuple[np.ndarray, np.ndarray]:
        """All paths as one (N, M+1, d) array plus 1-based labels."""
        states = np.concatenate(self.paths, axis=0)
        labels = np.concatenate([np.full(n, k + 1, dtype=int) for k, n in enumerate(self.class_counts)])
        return states, labels

    def trajectories(self, label: Optional[int] = None) -> Iterator[Tuple[int, Trajectory]]:
        """Iterate (label, Trajectory), optionally for one class."""
        labels = range(1, self.K + 1) if label is None else [label]
        for k in labels:
            for states in self.paths[k - 1]:
                yield k, Trajectory(states, self.delta, self.horizon)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def _check_label(spec: ModelSpec, k: int):
    if not isinstance(k, (int, np.integer)) or not 1 <= k <= spec.K:
        raise ModelSpecError(f"unknown label {k!r}; expected 1..{spec.K}")


def _check_states(spec: ModelSpec, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape[-1] != spec.d:
        raise ModelSpecError(f"state has dimension {x.shape[-1]}, model has d = {spec.d}")
    return x


def eval_drift(spec: ModelSpec, k: int, x) -> np.ndarray:
    """
    Evaluate the class-k drift.

    Args:
        spec: Model description
        k: Class label in 1..K
        x: State(s) of shape (..., d)

    Returns:
        b_k(x) with the same shape as x
    """
    _check_label(spec, k)
    x = _check_states(spec, x)
    if not np.all(np.isfinite(x)):
        raise ValueError("drift evaluated at a non-finite state")
    return np.asarray(spec.drift(k, x), dtype=float)


def eval_sigma(spec: ModelSpec, x) -> np.ndarray:
    """
    Evaluate the diffusion coefficient.

    Args:
        spec: Model description
        x: State(s) of shape (..., d)

    Returns:
        sigma(x) of shape (..., d, d)
    """
    x = _check_states(spec, x)
    return spec.sigma.matrix(x)


def sample_initial(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw X_0 from the model's initial law."""
    return spec.initial.sample(spec.d, rng)


def euler_maruyama(spec: ModelSpec, k: int, x0: np.ndarray, dW: np.ndarray, delta: float) -> np.ndarray:
    """
    Run the Euler-Maruyama recursion on given Brownian increments.

    X_{m+1} = X_m + b_k(X_m) delta + sigma(X_m) dW_m

    Args:
        spec: Model description
        k: Class label
        x0: Initial states, shape (n, d)
        dW: Brownian increments, shape (n, M, d)
        delta: Time step

    Returns:
        States of shape (n, M+1, d)

    Raises:
        SimulationError: If a state becomes non-finite
    """
    _check_label(spec, k)
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    dW = np.asarray(dW, dtype=float)
    n, M, d = dW.shape
    if x0.shape != (n, d) or d != spec.d:
        raise ModelSpecError(f"initial states {x0.shape} do not match increments {dW.shape}")

    states = np.empty((n, M + 1, d))
    states[:, 0] = x0
    x = x0
    sigma = spec.sigma
    for m in range(M):
        drift = spec.drift(k, x)
        if sigma.kind == "identity":
            noise = dW[:, m]
        elif sigma.kind == "scalar":
            noise = sigma.scalar(x)[:, None] * dW[:, m]
        else:
            noise = np.einsum("nij,nj->ni", sigma.matrix(x), dW[:, m])
        x = x + drift * delta + noise
        bad = ~np.all(np.isfinite(x), axis=1)
        if bad.any():
            raise SimulationError(step=m + 1, path=int(np.argmax(bad)), label=k)
        states[:, m + 1] = x
    return states


def _draw_path_noise(spec: ModelSpec, M: int, delta: float, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    x0 = sample_initial(spec, rng)
    dW = math.sqrt(delta) * rng.standard_normal((M, spec.d))
    return x0, dW


def simulate_path(spec: ModelSpec, k: int, M: int, T: float, rng: np.random.Generator) -> Trajectory:
    """
    Simulate one class-k trajectory on M steps over [0, T].

    Args:
        spec: Model description
        k: Class label
        M: Number of steps (>= 1)
        T: Horizon (> 0)
        rng: Generator owned by this path

    Returns:
        Simulated Trajectory
    """
    if M < 1 or T <= 0:
        raise ValueError(f"need M >= 1 and T > 0, got M={M}, T={T}")
    delta = T / M
    x0, dW = _draw_path_noise(spec, M, delta, rng)
    states = euler_maruyama(spec, k, x0[None, :], dW[None], delta)[0]
    return Trajectory(states, delta, T)


def simulate_paths(spec: ModelSpec, k: int, n: int, M: int, T: float, seed: SeedLike) -> np.ndarray:
    """
    Simulate n class-k paths in one vectorized pass.

    Path i draws from its own sub-stream (seed, k, i), so the result for a
    given path equals simulate_path with make_rng(seed, k, i) whatever n is.

    Returns:
        States of shape (n, M+1, d)
    """
    if M < 1 or T <= 0:
        raise ValueError(f"need M >= 1 and T > 0, got M={M}, T={T}")
    delta = T / M
    if n == 0:
        return np.empty((0, M + 1, spec.d))
    x0 = np.empty((n, spec.d))
    dW = np.empty((n, M, spec.d))
    for i in range(n):
        x0[i], dW[i] = _draw_path_noise(spec, M, delta, make_rng(seed, k, i))
    return euler_maruyama(spec, k, x0, dW, delta)


def multinomial_counts(N: int, priors: Sequence[float], rng: np.random.Generator) -> List[int]:
    """
    Draw (N_1, ..., N_K) ~ Mult(N; priors) by sequential binomial conditioning.
    """
    counts = []
    remaining = int(N)
    mass_left = 1.0
    for p in priors[:-1]:
        prob = min(max(p / mass_left, 0.0), 1.0) if mass_left > 0 else 0.0
        n_k = int(rng.binomial(remaining, prob)) if remaining > 0 else 0
        counts.append(n_k)
        remaining -= n_k
        mass_left -= p
    counts.append(remaining)
    return counts


def class_counts_for(spec: ModelSpec, sizes: ClassSizes, seed: SeedLike) -> List[int]:
    """Per-class path counts for a size request."""
    if sizes.N < 0:
        raise ValueError(f"dataset size must be nonnegative, got {sizes.N}")
    if isinstance(sizes, Balanced):
        if sizes.N % spec.K != 0:
            raise ValueError(f"balanced size {sizes.N} is not divisible by K = {spec.K}")
        return [sizes.N // spec.K] * spec.K
    return multinomial_counts(sizes.N, spec.priors, make_rng(seed, "counts"))


def generate_dataset(spec: ModelSpec, sizes: ClassSizes, M: int, T: float, seed: SeedLike) -> LabeledDataset:
    """
    Generate a labeled dataset.

    Args:
        spec: Model description
        sizes: Balanced(N) or Multinomial(N)
        M: Steps per path
        T: Horizon
        seed: Seed (int or seed sequence); paths use sub-streams (seed, "paths", k, i)

    Returns:
        LabeledDataset with per-class path arrays
    """
    counts = class_counts_for(spec, sizes, seed)
    path_seed = derive_seed(seed, "paths")
    paths = [simulate_paths(spec, k + 1, n_k, M, T, path_seed) for k, n_k in enumerate(counts)]
    dataset = LabeledDataset(paths=paths, delta=T / M, horizon=T, seed=seed)
    logger.info(f"Generated dataset with class counts {counts} (M={M}, T={T}, d={spec.d})")
    return dataset


# ---------------------------------------------------------------------------
# Storage
# ---------------------------------------------------------------------------

def save_dataset(dataset: LabeledDataset, path: Union[str, Path]) -> Tuple[str, str]:
    """
    Write a dataset as CSV (class, path_id, m, x_1..x_d) plus JSON sidecar.

    Args:
        dataset: Dataset to write
        path: Target CSV path; the sidecar uses the same stem with .json

    Returns:
        (csv path, json path)
    """
    csv_path = Path(path).with_suffix(".csv")
    json_path = csv_path.with_suffix(".json")
    csv_path.parent.mkdir(parents=True, exist_ok=True)

    frames = []
    steps = dataset.M + 1
    for k, paths in enumerate(dataset.paths, start=1):
        n_k = paths.shape[0]
        frame = pd.DataFrame(paths.reshape(n_k * steps, dataset.d),
                             columns=[f"x_{i + 1}" for i in range(dataset.d)])
        frame.insert(0, "m", np.tile(np.arange(steps), n_k))
        frame.insert(0, "path_id", np.repeat(np.arange(n_k), steps))
        frame.insert(0, "class", k)
        frames.append(frame)
    pd.concat(frames, ignore_index=True).to_csv(csv_path, index=False, float_format=FLOAT_FORMAT)

    header = {
        "d": dataset.d,
        "K": dataset.K,
        "M": dataset.M,
        "delta": dataset.delta,
        "T": dataset.horizon,
        "seed": seed_to_json(dataset.seed) if dataset.seed is not None else None,
        "class_counts": dataset.class_counts,
        "config_hash": dataset.config_hash,
    }
    save_json(header, json_path)
    logger.info(f"Dataset saved to {csv_path}")
    return str(csv_path), str(json_path)


def load_dataset(path: Union[str, Path]) -> LabeledDataset:
    """Read a dataset written by save_dataset."""
    csv_path = Path(path).with_suffix(".csv")
    header = load_json(csv_path.with_suffix(".json"))
    frame = pd.read_csv(csv_path, float_precision="round_trip").sort_values(["class", "path_id", "m"], kind="stable")

    d, M = int(header["d"]), int(header["M"])
    columns = [f"x_{i + 1}" for i in range(d)]
    paths = []
    for k, n_k in enumerate(header["class_counts"], start=1):
        values = frame.loc[frame["class"] == k, columns].to_numpy(dtype=float)
        if values.shape[0] != n_k * (M + 1):
            raise ValueError(f"class {k} has {values.shape[0]} rows, header promises {n_k * (M + 1)}")
        paths.append(values.reshape(n_k, M + 1, d))
    seed = header.get("seed")
    return LabeledDataset(
        paths=paths,
        delta=float(header["delta"]),
        horizon=float(header["T"]),
        seed=seed_from_json(seed) if seed is not None else None,
        config_hash=header.get("config_hash"),
    )
