"""
Sparse ReLU networks written directly in numpy.
Provides the constrained network class used for component-wise drift
estimation, backpropagation + Adam training with magnitude pruning, and the
direct pathwise classifier baseline.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import softmax

from config import DIRECT_SEARCH_SPACE, DirectConfig, TrainConfig
from utils import load_json, make_rng, save_json

logger = logging.getLogger(__name__)


class TrainingError(ValueError):
    """Raised for invalid training inputs or broken network invariants."""


Box = Optional[Tuple[np.ndarray, np.ndarray]]


def default_widths(d: int, hidden: Sequence[int] = (16, 32, 32, 16)) -> Tuple[int, ...]:
    """(d, hidden..., 1)"""
    return (int(d),) + tuple(int(w) for w in hidden) + (1,)


def _layout(widths: Sequence[int]) -> List[Tuple[str, int, slice, Tuple[int, ...]]]:
    """Flat parameter order W_0, v_1, W_1, v_2, ..., v_L, W_L."""
    entries = []
    offset = 0
    L = len(widths) - 2
    for j in range(L + 1):
        shape = (widths[j + 1], widths[j])
        size = shape[0] * shape[1]
        entries.append(("W", j, slice(offset, offset + size), shape))
        offset += size
        if j < L:
            size = widths[j + 1]
            entries.append(("v", j + 1, slice(offset, offset + size), (size,)))
            offset += size
    return entries


def count_params(widths: Sequence[int]) -> int:
    return sum(s.stop - s.start for _, _, s, _ in _layout(widths))


def sparsity_budget(s_ratio: float, total: int) -> int:
    """Largest admissible number of nonzero parameters."""
    return min(total, int(math.ceil(s_ratio * total - 1e-9)))


@dataclass
class MlpParams:
    """
    Network f(x) = W_L relu_{v_L} W_{L-1} ... W_1 relu_{v_1} W_0 x, clamped to
    [-clamp, clamp] and set to zero outside the support box.

    All parameters live in one flat vector `theta`; `weights` and `shifts`
    are views into it.
    """

    widths: Tuple[int, ...]
    theta: np.ndarray
    s_ratio: float = 0.75
    clamp: float = 1.0
    box: Box = None
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) < 2 or self.widths[-1] != 1:
            raise TrainingError(f"widths must be (p_0, ..., 1), got {self.widths}")
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (count_params(self.widths),):
            raise TrainingError(f"expected {count_params(self.widths)} parameters, got {self.theta.shape}")
        if self.mask is None:
            self.mask = np.ones_like(self.theta, dtype=bool)
        if self.box is not None:
            lo, hi = (np.asarray(b, dtype=float).reshape(self.widths[0]) for b in self.box)
            self.box = (lo, hi)

    @classmethod
    def from_layers(cls, widths: Sequence[int], weights: Sequence, shifts: Sequence, **kwargs) -> "MlpParams":
        """Build from explicit W_0..W_L and v_1..v_L."""
        theta = np.zeros(count_params(widths))
        for kind, j, where, shape in _layout(widths):
            source = weights[j] if kind == "W" else shifts[j - 1]
            theta[where] = np.asarray(source, dtype=float).reshape(shape).ravel()
        return cls(widths=tuple(widths), theta=theta, **kwargs)

    @property
    def L(self) -> int:
        return len(self.widths) - 2

    @property
    def weights(self) -> List[np.ndarray]:
        return [self.theta[s].reshape(shape) for kind, _, s, shape in _layout(self.widths) if kind == "W"]

    @property
    def shifts(self) -> List[np.ndarray]:
        return [self.theta[s] for kind, _, s, _ in _layout(self.widths) if kind == "v"]

    @property
    def total_params(self) -> int:
        return self.theta.size

    @property
    def nonzero_count(self) -> int:
        return int(np.count_nonzero(self.theta))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "widths": list(self.widths),
            "weights": [w.ravel().tolist() for w in self.weights],
            "shifts": [v.tolist() for v in self.shifts],
            "mask": self.mask.astype(int).tolist(),
            "s_ratio": self.s_ratio,
            "clamp": self.clamp,
            "box": None if self.box is None else [self.box[0].tolist(), self.box[1].tolist()],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MlpParams":
        box = data.get("box")
        return cls.from_layers(
            data["widths"], data["weights"], data["shifts"],
            s_ratio=float(data["s_ratio"]),
            clamp=float(data["clamp"]),
            box=None if box is None else (np.array(box[0]), np.array(box[1])),
            mask=np.array(data["mask"], dtype=bool),
        )


def init_mlp(widths: Sequence[int], rng: np.random.Generator, s_ratio: float = 0.75,
             clamp: float = 1.0, box: Box = None) -> MlpParams:
    """
    Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization followed by projection.
    """
    theta = np.zeros(count_params(widths))
    for kind, j, where, shape in _layout(widths):
        fan_in = widths[j] if kind == "W" else widths[j - 1]
        bound = 1.0 / math.sqrt(fan_in)
        theta[where] = rng.uniform(-bound, bound, size=where.stop - where.start)
    return project_sparse_clip(MlpParams(widths=tuple(widths), theta=theta, s_ratio=s_ratio, clamp=clamp, box=box))


def _inside_box(mlp: MlpParams, X: np.ndarray) -> np.ndarray:
    if mlp.box is None:
        return np.ones(X.shape[0], dtype=bool)
    lo, hi = mlp.box
    return np.all((X >= lo) & (X <= hi), axis=1)


def _forward_pass(mlp: MlpParams, X: np.ndarray):
    weights, shifts = mlp.weights, mlp.shifts
    acts = [X]
    pre = []
    h = X
    for j in range(mlp.L):
        z = h @ weights[j].T - shifts[j]
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    out = (h @ weights[mlp.L].T)[:, 0]
    return out, pre, acts


def forward_batch(mlp: MlpParams, X) -> np.ndarray:
    """
    Evaluate the network on a batch.

    Args:
        mlp: Network
        X: Inputs of shape (n, p_0)

    Returns:
        Outputs of shape (n,), clamped and zeroed outside the support box
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != mlp.widths[0]:
        raise TrainingError(f"input width {X.shape[1]} does not match p_0 = {mlp.widths[0]}")
    out, _, _ = _forward_pass(mlp, X)
    return np.clip(out, -mlp.clamp, mlp.clamp) * _inside_box(mlp, X)


def forward(mlp: MlpParams, x) -> float:
    """Evaluate the network at one input x of length p_0."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != mlp.widths[0]:
        raise TrainingError(f"input width {x.shape[0]} does not match p_0 = {mlp.widths[0]}")
    return float(forward_batch(mlp, x[None, :])[0])


def _project_inplace(theta: np.ndarray, keep: int) -> np.ndarray:
    np.clip(theta, -1.0, 1.0, out=theta)
    mask = np.zeros(theta.shape, dtype=bool)
    # stable sort: equal magnitudes keep their parameter order
    order = np.argsort(-np.abs(theta), kind="stable")
    mask[order[:keep]] = True
    theta[~mask] = 0.0
    return mask


def project_sparse_clip(mlp: MlpParams) -> MlpParams:
    """
    Clip every parameter to [-1, 1], then keep the ceil(s_ratio * total)
    largest magnitudes and zero the rest.

    Returns:
        New MlpParams with the recomputed pruning mask
    """
    theta = mlp.theta.copy()
    mask = _project_inplace(theta, sparsity_budget(mlp.s_ratio, theta.size))
    return replace(mlp, theta=theta, mask=mask)


def check_constraints(mlp: MlpParams):
    """Raise TrainingError if the max-norm or sparsity constraint is broken."""
    if np.max(np.abs(mlp.theta), initial=0.0) > 1.0:
        raise TrainingError("parameter max-norm exceeds 1")
    budget = sparsity_budget(mlp.s_ratio, mlp.total_params)
    if mlp.nonzero_count > budget:
        raise TrainingError(f"{mlp.nonzero_count} nonzero parameters exceed the budget {budget}")


def compute_increment_targets(traj) -> np.ndarray:
    """
    Rescaled increments (X_{t_{m+1}} - X_{t_m}) / delta.

    Args:
        traj: Trajectory

    Returns:
        Array of shape (M, d)
    """
    if traj.M < 1:
        raise TrainingError("a trajectory needs at least one step")
    return np.diff(traj.states, axis=0) / traj.delta


def increment_pairs(paths: np.ndarray, delta: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Flatten paths of shape (n, M+1, d) into regression pairs.

    Returns:
        (states X_{t_m} of shape (n*M, d), targets of shape (n*M, d))
    """
    n, steps, d = paths.shape
    X = paths[:, :-1, :].reshape(n * (steps - 1), d)
    Y = (np.diff(paths, axis=1) / delta).reshape(n * (steps - 1), d)
    return X, Y


def loss(mlp: MlpParams, X, y) -> float:
    """
    Empirical squared loss (1 / n) sum (y - f(X))^2 over pooled (path, time) pairs.

    Args:
        mlp: Network for one coordinate
        X: States of shape (n, d)
        y: Targets of shape (n,)

    Returns:
        Mean squared error
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size == 0:
        raise TrainingError("loss of an empty dataset")
    residual = y - forward_batch(mlp, X)
    return float(np.mean(residual * residual))


def grad(mlp: MlpParams, X, y) -> np.ndarray:
    """
    Exact gradient of the minibatch loss with respect to theta.

    Pruned parameters (mask False) get zero gradient; the ReLU derivative
    at 0 is 0; clamped outputs and points outside the box pass no gradient.

    Returns:
        Flat gradient aligned with mlp.theta
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    n = y.size
    if n == 0:
        raise TrainingError("gradient of an empty minibatch")

    out, pre, acts = _forward_pass(mlp, X)
    passes = (out > -mlp.clamp) & (out < mlp.clamp) & _inside_box(mlp, X)
    f = np.clip(out, -mlp.clamp, mlp.clamp) * _inside_box(mlp, X)
    g_out = (2.0 / n) * (f - y) * passes

    weights = mlp.weights
    grads_W: List[Optional[np.ndarray]] = [None] * (mlp.L + 1)
    grads_v: List[Optional[np.ndarray]] = [None] * mlp.L

    g = g_out[:, None]
    grads_W[mlp.L] = g.T @ acts[mlp.L]
    g_h = g @ weights[mlp.L]
    for j in range(mlp.L - 1, -1, -1):
        g_z = g_h * (pre[j] > 0)
        grads_v[j] = -g_z.sum(axis=0)
        grads_W[j] = g_z.T @ acts[j]
        if j > 0:
            g_h = g_z @ weights[j]

    flat = np.zeros_like(mlp.theta)
    for kind, j, where, _ in _layout(mlp.widths):
        flat[where] = (grads_W[j] if kind == "W" else grads_v[j - 1]).ravel()
    return flat * mlp.mask


@dataclass
class Adam:
    """Adam moments for one flat parameter vector."""

    size: int
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)
    t: int = field(init=False, default=0)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def step(self, theta: np.ndarray, g: np.ndarray):
        """Update theta in place."""
        if self.weight_decay:
            g = g + self.weight_decay * theta
        beta1, beta2 = self.betas
        self.t += 1
        self.m *= beta1
        self.m += (1 - beta1) * g
        self.v *= beta2
        self.v += (1 - beta2) * g * g
        m_hat = self.m / (1 - beta1 ** self.t)
        v_hat = self.v / (1 - beta2 ** self.t)
        theta -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Drift estimation
# ---------------------------------------------------------------------------

@dataclass
class DriftEstimator:
    """One sparse network per output coordinate of the class-k drift."""

    label: int
    networks: List[MlpParams]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        widths = {net.widths for net in self.networks}
        if len(widths) != 1:
            raise TrainingError("all coordinate networks must share widths")

    @property
    def d(self) -> int:
        return len(self.networks)

    def __call__(self, x) -> np.ndarray:
        """b_hat(x) for x of shape (..., d)"""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        values = np.stack([forward_batch(net, flat) for net in self.networks], axis=-1)
        return values.reshape(x.shape)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "networks": [net.to_dict() for net in self.networks],
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DriftEstimator":
        return cls(
            label=int(data["label"]),
            networks=[MlpParams.from_dict(net) for net in data["networks"]],
            metadata=data.get("metadata", {}),
        )


def support_box(X: np.ndarray, margin: float = 0.05) -> Tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounding box of X, widened by `margin` of its width per side."""
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-12)
    return lo - pad, hi + pad


def default_clamp(Y: np.ndarray) -> float:
    """max(1, 1.2 * max |target|)"""
    return float(max(1.0, 1.2 * np.max(np.abs(Y), initial=0.0)))


def _run_epoch(mlp: MlpParams, adam: Adam, X: np.ndarray, y: np.ndarray, batch_size: int,
               keep: int, rng: np.random.Generator, check: bool,
               on_step: Optional[Callable[[MlpParams], None]]):
    order = rng.permutation(y.size)
    for start in range(0, y.size, batch_size):
        batch = order[start:start + batch_size]
        adam.step(mlp.theta, grad(mlp, X[batch], y[batch]))
        mlp.mask = _project_inplace(mlp.theta, keep)
        if check:
            check_constraints(mlp)
        if on_step is not None:
            on_step(mlp)


def _fit_coordinate(X_train, y_train, X_val, y_val, X_all, y_all, widths, config: TrainConfig,
                    s_ratio, clamp, box, seed_tags, on_step) -> Tuple[MlpParams, Dict[str, Any]]:
    keep = sparsity_budget(s_ratio, count_params(widths))
    check = config.check_invariants

    def fresh():
        net = init_mlp(widths, make_rng(config.seed, *seed_tags, "init"), s_ratio, clamp, box)
        adam = Adam(net.total_params, lr=config.learning_rate, betas=config.betas, eps=config.eps)
        return net, adam

    info: Dict[str, Any] = {"train_history": [], "val_history": []}

    if X_val is None:
        # too few paths to split: no early stopping
        net, adam = fresh()
        shuffle = make_rng(config.seed, *seed_tags, "shuffle")
        for _ in range(config.max_epochs):
            _run_epoch(net, adam, X_all, y_all, config.batch_size, keep, shuffle, check, on_step)
            info["train_history"].append(loss(net, X_all, y_all))
        info.update(early_stopped=False, stop_epoch=config.max_epochs, best_epoch=None,
                    retrain_epochs=0, best_val_loss=None)
    else:
        net, adam = fresh()
        shuffle = make_rng(config.seed, *seed_tags, "shuffle")
        best, best_epoch, wait = math.inf, 0, 0
        early_stopped = False
        epoch = 0
        for epoch in range(1, config.max_epochs + 1):
            _run_epoch(net, adam, X_train, y_train, config.batch_size, keep, shuffle, check, on_step)
            info["train_history"].append(loss(net, X_train, y_train))
            val = loss(net, X_val, y_val)
            info["val_history"].append(val)
            if val < best - config.min_delta:
                best, best_epoch, wait = val, epoch, 0
            else:
                wait += 1
                if wait >= config.patience:
                    early_stopped = True
                    break
        stop_epoch = epoch
        retrain_epochs = config.retrain_multiplier * stop_epoch

        net, adam = fresh()
        shuffle = make_rng(config.seed, *seed_tags, "retrain")
        for _ in range(retrain_epochs):
            _run_epoch(net, adam, X_all, y_all, config.batch_size, keep, shuffle, check, on_step)
        info.update(early_stopped=early_stopped, stop_epoch=stop_epoch, best_epoch=best_epoch,
                    retrain_epochs=retrain_epochs, best_val_loss=best)

    info["final_train_loss"] = loss(net, X_all, y_all)
    return net, info


def train_drift_estimator(paths: np.ndarray, delta: float, widths: Optional[Sequence[int]] = None,
                          config: Optional[TrainConfig] = None, s_ratio: Optional[float] = None,
                          clamp: Optional[float] = None, box: Box = None, label: int = 1,
                          on_step: Optional[Callable[[MlpParams], None]] = None) -> DriftEstimator:
    """
    Fit the class-k drift component-wise on increment targets.

    For each coordinate, Adam runs on shuffled minibatches of pooled
    (state, target) pairs with projection after every step. A val_fraction
    share of whole paths is held out for early stopping; afterwards a fresh
    network is trained on all paths for retrain_multiplier * stop epoch
    epochs.

    Args:
        paths: Class-k paths, shape (N_k, M+1, d)
        delta: Time step
        widths: Architecture (d, ..., 1); default (d, 16, 32, 32, 16, 1)
        config: Training settings
        s_ratio: Sparsity ratio (default from config)
        clamp: Output clamp F (default max(1, 1.2 max |target|))
        box: Support box (default: training bounding box + margin)
        label: Class label, used for seeding and metadata
        on_step: Optional callback invoked after every projected update

    Returns:
        Trained DriftEstimator
    """
    config = config or TrainConfig()
    paths = np.asarray(paths, dtype=float)
    if paths.ndim != 3 or paths.shape[0] == 0:
        raise TrainingError(f"class {label} has no training paths")
    n_paths, steps, d = paths.shape
    if steps < 2:
        raise TrainingError("paths need at least one step")
    widths = tuple(widths) if widths is not None else default_widths(d, config.hidden_widths)
    if widths[0] != d or widths[-1] != 1:
        raise TrainingError(f"widths {widths} incompatible with d = {d}")
    s_ratio = config.s_ratio if s_ratio is None else s_ratio

    X_all, Y_all = increment_pairs(paths, delta)
    if box is None:
        box = support_box(X_all, config.box_margin)
    if clamp is None:
        clamp = config.clamp if config.clamp is not None else default_clamp(Y_all)

    split = None
    if n_paths >= 2:
        order = make_rng(config.seed, "drift", label, "split").permutation(n_paths)
        n_val = min(max(int(round(config.val_fraction * n_paths)), 1), n_paths - 1)
        split = (np.sort(order[n_val:]), np.sort(order[:n_val]))
    else:
        logger.warning(f"Class {label} has {n_paths} path(s); training without early stopping")

    networks, coordinates = [], []
    for i in range(d):
        if split is not None:
            X_train, Y_train = increment_pairs(paths[split[0]], delta)
            X_val, Y_val = increment_pairs(paths[split[1]], delta)
            y_train, y_val = Y_train[:, i], Y_val[:, i]
        else:
            X_train = y_train = X_val = y_val = None
        net, info = _fit_coordinate(X_train, y_train, X_val, y_val, X_all, Y_all[:, i], widths, config,
                                    s_ratio, clamp, box, ("drift", label, i), on_step)
        networks.append(net)
        coordinates.append(info)
        logger.info(f"Class {label} coordinate {i}: stop epoch {info['stop_epoch']}, "
                    f"final train loss {info['final_train_loss']:.5g}")

    metadata = {
        "n_paths": n_paths,
        "clamp": clamp,
        "s_ratio": s_ratio,
        "coordinates": coordinates,
    }
    return DriftEstimator(label=label, networks=networks, metadata=metadata)


def save_estimator(estimator: DriftEstimator, path: Union[str, Path]) -> str:
    """Write a drift estimator checkpoint as JSON."""
    return save_json(estimator.to_dict(), path)


def load_estimator(path: Union[str, Path]) -> DriftEstimator:
    """Read a drift estimator checkpoint."""
    return DriftEstimator.from_dict(load_json(path))


# ---------------------------------------------------------------------------
# Direct pathwise classifier
# ---------------------------------------------------------------------------

@dataclass
class DirectClassifier:
    """Two-hidden-layer ReLU network on flattened paths with softmax output."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    num_classes: int
    hyperparameters: Dict[str, Any] = field(default_factory=dict)
    val_accuracy: float = 0.0
    search_log: List[Dict[str, Any]] = field(default_factory=list)

    def logits(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        h = states.reshape(states.shape[0], -1)
        for j, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if j < len(self.weights) - 1:
                h = np.maximum(h, 0.0)
        return h

    def predict_proba(self, states) -> np.ndarray:
        """Class probabilities, rows sum to 1."""
        return softmax(self.logits(states), axis=1)

    def predict(self, states) -> np.ndarray:
        """1-based labels; ties go to the smallest label."""
        return np.argmax(self.logits(states), axis=1) + 1

    def __call__(self, traj) -> int:
        return int(self.predict(traj.states[None])[0])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "num_classes": self.num_classes,
            "hyperparameters": self.hyperparameters,
            "val_accuracy": self.val_accuracy,
            "search_log": self.search_log,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DirectClassifier":
        return cls(
            weights=[np.array(W, dtype=float) for W in data["weights"]],
            biases=[np.array(b, dtype=float) for b in data["biases"]],
            num_classes=int(data["num_classes"]),
            hyperparameters=data.get("hyperparameters", {}),
            val_accuracy=float(data.get("val_accuracy", 0.0)),
            search_log=data.get("search_log", []),
        )


def _flat(params: List[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def _unflat(theta: np.ndarray, shapes: List[Tuple[int, ...]]) -> List[np.ndarray]:
    out, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        out.append(theta[offset:offset + size].reshape(shape))
        offset += size
    return out


def _dense_shapes(sizes: Sequence[int]) -> List[Tuple[int, ...]]:
    shapes = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        shapes.extend([(fan_out, fan_in), (fan_out,)])
    return shapes


def _dense_grad(theta: np.ndarray, shapes, X: np.ndarray, y_onehot: np.ndarray) -> np.ndarray:
    params = _unflat(theta, shapes)
    Ws, bs = params[0::2], params[1::2]
    acts = [X]
    h = X
    for j, (W, b) in enumerate(zip(Ws, bs)):
        h = h @ W.T + b
        if j < len(Ws) - 1:
            h = np.maximum(h, 0.0)
        acts.append(h)
    g = (softmax(acts[-1], axis=1) - y_onehot) / X.shape[0]
    grads = []
    for j in range(len(Ws) - 1, -1, -1):
        grads.append(g.sum(axis=0))
        grads.append(g.T @ acts[j])
        if j > 0:
            g = (g @ Ws[j]) * (acts[j] > 0)
    grads.reverse()  # now W_0, b_0, W_1, b_1, ...
    return _flat(grads)


def _sample_search_space(rng: np.random.Generator, space: Dict[str, list]) -> Dict[str, Any]:
    return {name: values[int(rng.integers(len(values)))] for name, values in space.items()}


def train_direct_classifier(dataset, search_budget: int = 10, config: Optional[TrainConfig] = None,
                            direct: Optional[DirectConfig] = None,
                            search_space: Optional[Dict[str, list]] = None) -> DirectClassifier:
    """
    Random search over the direct classifier grid, selected by validation accuracy.

    Each trial trains on a 50% path split with softmax cross-entropy and Adam
    (L2 weight decay), keeps its best-validation checkpoint, and stops after
    `patience` epochs without improvement.

    Args:
        dataset: LabeledDataset with at least two nonempty classes
        search_budget: Number of sampled configurations
        config: Supplies the seed
        direct: Patience and epoch budget
        search_space: Grid to sample from (defaults to DIRECT_SEARCH_SPACE)

    Returns:
        Best DirectClassifier
    """
    config = config or TrainConfig()
    direct = direct or DirectConfig()
    space = search_space or DIRECT_SEARCH_SPACE
    if sum(1 for n in dataset.class_counts if n > 0) < 2:
        raise TrainingError("the direct classifier needs at least two classes present")
    if search_budget < 1:
        raise TrainingError("search budget must be at least 1")

    states, labels = dataset.stacked()
    X = states.reshape(states.shape[0], -1)
    K = dataset.K
    onehot = np.eye(K)[labels - 1]

    order = make_rng(config.seed, "direct", "split").permutation(X.shape[0])
    n_val = min(max(X.shape[0] // 2, 1), X.shape[0] - 1)
    val_idx, train_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
    X_train, Y_train = X[train_idx], onehot[train_idx]
    X_val, labels_val = X[val_idx], labels[val_idx]

    search_rng = make_rng(config.seed, "direct", "search")
    best: Optional[DirectClassifier] = None
    search_log = []
    for trial in range(search_budget):
        hp = _sample_search_space(search_rng, space)
        sizes = [X.shape[1], *hp["hidden_sizes"], K]
        shapes = _dense_shapes(sizes)
        init_rng = make_rng(config.seed, "direct", trial, "init")
        theta = np.concatenate([
            init_rng.uniform(-1 / math.sqrt(fan_in), 1 / math.sqrt(fan_in), size=int(np.prod(shape)))
            for shape, fan_in in zip(shapes, [s for s in sizes[:-1] for _ in (0, 1)])
        ])
        adam = Adam(theta.size, lr=hp["learning_rate"], weight_decay=hp["weight_decay"])
        shuffle = make_rng(config.seed, "direct", trial, "shuffle")

        best_acc, best_theta, wait = -1.0, theta.copy(), 0
        for _ in range(direct.max_epochs):
            perm = shuffle.permutation(X_train.shape[0])
            for start in range(0, perm.size, hp["batch_size"]):
                batch = perm[start:start + hp["batch_size"]]
                adam.step(theta, _dense_grad(theta, shapes, X_train[batch], Y_train[batch]))
            params = _unflat(theta, shapes)
            candidate = DirectClassifier(weights=params[0::2], biases=params[1::2], num_classes=K)
            acc = float(np.mean(candidate.predict(X_val) == labels_val))
            if acc > best_acc:
                best_acc, best_theta, wait = acc, theta.copy(), 0
            else:
                wait += 1
                if wait >= direct.patience:
                    break

        search_log.append({"trial": trial, "val_accuracy": best_acc, **hp})
        if best is None or best_acc > best.val_accuracy:
            params = _unflat(best_theta, shapes)
            best = DirectClassifier(weights=[p.copy() for p in params[0::2]],
                                    biases=[p.copy() for p in params[1::2]],
                                    num_classes=K, hyperparameters=dict(hp), val_accuracy=best_acc)
        logger.info(f"Direct classifier trial {trial}: val accuracy {best_acc:.4f} with {hp}")

    best.search_log = search_log
    return best


def save_direct_classifier(classifier: DirectClassifier, path: Union[str, Path]) -> str:
    return save_json(classifier.to_dict(), path)


def load_direct_classifier(path: Union[str, Path]) -> DirectClassifier:
    return DirectClassifier.from_dict(load_json(path))
