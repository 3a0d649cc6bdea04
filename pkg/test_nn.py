import numpy as np
import pytest

import nn
from config import DirectConfig, TrainConfig
from conftest import zero_sigma
from nn import (MlpParams, TrainingError, check_constraints, compute_increment_targets, count_params,
                forward, forward_batch, grad, init_mlp, load_estimator, loss, project_sparse_clip,
                save_estimator, train_direct_classifier, train_drift_estimator)
from sde import (Balanced, CustomDrift, ModelSpec, ScalarSigma, StandardGaussian, Trajectory,
                 generate_dataset, simulate_paths)
from utils import make_rng


def single_relu(shift=0.0, **kwargs):
    kwargs.setdefault("clamp", 10.0)
    return MlpParams.from_layers((1, 1, 1), [[[1.0]], [[1.0]]], [[shift]], **kwargs)


def noiseless_paths(n, M=10, seed=0):
    spec = ModelSpec(d=1, num_classes=1, drift=CustomDrift((lambda x: -x,)),
                     sigma=ScalarSigma(zero_sigma), initial=StandardGaussian())
    return simulate_paths(spec, 1, n, M, 1.0, seed)


def random_network(rng, widths=(2, 4, 3, 1)):
    theta = rng.uniform(-1.0, 1.0, count_params(widths))
    return MlpParams(widths=widths, theta=theta, s_ratio=1.0, clamp=1e6)


def test_forward_single_relu():
    mlp = single_relu()
    assert forward(mlp, [3.0]) == 3.0
    assert forward(mlp, [-2.0]) == 0.0
    assert forward(single_relu(shift=1.0), [0.5]) == 0.0


def test_forward_respects_box_and_clamp():
    boxed = single_relu(box=(np.array([-1.0]), np.array([1.0])))
    assert forward(boxed, [2.0]) == 0.0
    assert forward(boxed, [0.5]) == 0.5
    clamped = single_relu(clamp=1.5)
    assert np.all(np.abs(forward_batch(clamped, np.linspace(-10, 10, 41)[:, None])) <= 1.5)


def test_forward_rejects_wrong_width():
    with pytest.raises(TrainingError):
        forward(single_relu(), [1.0, 2.0])


def test_projection_examples():
    widths = (2, 1, 1)
    mlp = MlpParams(widths=widths, theta=np.array([0.9, 0.5, 0.1, 0.05]), s_ratio=0.75)
    assert project_sparse_clip(mlp).theta.tolist() == [0.9, 0.5, 0.1, 0.0]

    clipped = project_sparse_clip(MlpParams(widths=widths, theta=np.array([2.0, -2.0, 2.0, -2.0]), s_ratio=1.0))
    assert clipped.theta.tolist() == [1.0, -1.0, 1.0, -1.0]

    inside = np.array([0.3, -0.7, 0.0, 1.0])
    assert np.array_equal(project_sparse_clip(MlpParams(widths=widths, theta=inside, s_ratio=1.0)).theta, inside)


def test_projection_is_idempotent():
    mlp = init_mlp((3, 16, 32, 32, 16, 1), make_rng(1), s_ratio=0.75)
    check_constraints(mlp)
    again = project_sparse_clip(mlp)
    assert np.array_equal(again.theta, mlp.theta)


def test_increment_targets():
    traj = Trajectory(np.array([[0.0], [0.05], [0.02]]), 0.01, 0.02)
    assert compute_increment_targets(traj)[:, 0] == pytest.approx([5.0, -3.0])
    flat = Trajectory(np.ones((4, 2)), 0.25, 0.75)
    assert np.array_equal(compute_increment_targets(flat), np.zeros((3, 2)))
    two_d = Trajectory(np.array([[0.0, 0.0], [1.0, 2.0]]), 0.5, 0.5)
    assert compute_increment_targets(two_d).tolist() == [[2.0, 4.0]]


def test_loss_examples():
    zero = MlpParams(widths=(1, 2, 1), theta=np.zeros(count_params((1, 2, 1))))
    assert loss(zero, np.ones((5, 1)), np.zeros(5)) == 0.0
    assert loss(single_relu(), [[1.0]], [2.0]) == 1.0


def test_loss_matches_naive_loops():
    rng = make_rng(3, "loss")
    mlp = random_network(rng, (2, 3, 1))
    mlp.clamp = 0.8
    X = rng.normal(size=(12, 2))
    y = rng.normal(size=12)
    W0, W1 = mlp.weights
    (v1,) = mlp.shifts
    total = 0.0
    for n in range(12):
        out = 0.0
        for a in range(3):
            pre = sum(W0[a, b] * X[n, b] for b in range(2)) - v1[a]
            out += W1[0, a] * max(pre, 0.0)
        out = min(max(out, -0.8), 0.8)
        total += (y[n] - out) ** 2
    assert loss(mlp, X, y) == pytest.approx(total / 12, abs=1e-12)


def test_loss_is_permutation_invariant():
    rng = make_rng(4)
    mlp = random_network(rng)
    X, y = rng.normal(size=(20, 2)), rng.normal(size=20)
    order = rng.permutation(20)
    assert loss(mlp, X[order], y[order]) == pytest.approx(loss(mlp, X, y), abs=1e-14)


def test_gradient_matches_finite_differences():
    h = 1e-5
    for trial in range(100):
        rng = make_rng(7, trial)
        mlp = random_network(rng)
        X = rng.normal(size=(8, 2))
        _, pre, _ = nn._forward_pass(mlp, X)
        away = np.all(np.hstack([np.abs(z) for z in pre]) > 1e-3, axis=1)
        X = X[away]
        if X.shape[0] == 0:
            continue
        y = rng.normal(size=X.shape[0])
        analytic = grad(mlp, X, y)
        numeric = np.empty_like(analytic)
        for j in range(mlp.theta.size):
            plus, minus = mlp.theta.copy(), mlp.theta.copy()
            plus[j] += h
            minus[j] -= h
            numeric[j] = (loss(MlpParams(mlp.widths, plus, 1.0, mlp.clamp), X, y)
                          - loss(MlpParams(mlp.widths, minus, 1.0, mlp.clamp), X, y)) / (2 * h)
        error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-2)
        assert error < 1e-5, f"trial {trial}: relative error {error}"


def test_gradient_zero_at_exact_fit_and_mean_normalized():
    rng = make_rng(8)
    mlp = random_network(rng)
    X = rng.normal(size=(10, 2))
    assert np.allclose(grad(mlp, X, forward_batch(mlp, X)), 0.0)
    y = rng.normal(size=10)
    doubled = grad(mlp, np.vstack([X, X]), np.concatenate([y, y]))
    assert doubled == pytest.approx(grad(mlp, X, y), abs=1e-12)


def test_pruned_parameters_get_no_gradient():
    mlp = init_mlp((1, 4, 1), make_rng(2), s_ratio=0.5, clamp=100.0)
    g = grad(mlp, np.array([[0.3], [-0.2]]), np.array([1.0, 2.0]))
    assert np.all(g[~mlp.mask] == 0.0)


def test_invariants_hold_after_every_step():
    paths = noiseless_paths(6)
    steps = []

    def monitor(mlp):
        check_constraints(mlp)
        steps.append(mlp.nonzero_count)

    config = TrainConfig(max_epochs=4, patience=2, batch_size=16, hidden_widths=(8, 8),
                         check_invariants=True, seed=1)
    train_drift_estimator(paths, 0.1, config=config, on_step=monitor)
    assert steps
    assert max(steps) <= int(np.ceil(0.75 * count_params((1, 8, 8, 1))))


def test_full_batch_loss_descends_on_noiseless_problem():
    paths = noiseless_paths(8)
    config = TrainConfig(learning_rate=1e-4, max_epochs=20, patience=20, batch_size=10_000,
                         hidden_widths=(8, 8), seed=2)
    estimator = train_drift_estimator(paths, 0.1, config=config)
    history = estimator.metadata["coordinates"][0]["train_history"]
    assert all(b <= a + 1e-12 for a, b in zip(history[:-1], history[1:]))


@pytest.mark.slow
def test_noiseless_fit_reaches_small_loss():
    paths = noiseless_paths(64)
    estimator = train_drift_estimator(paths, 0.1, config=TrainConfig(seed=0))
    assert estimator.metadata["coordinates"][0]["final_train_loss"] < 1e-2


def test_single_path_trains_without_early_stopping():
    paths = noiseless_paths(1)
    config = TrainConfig(max_epochs=3, patience=1, hidden_widths=(4,), seed=0)
    estimator = train_drift_estimator(paths, 0.1, config=config)
    info = estimator.metadata["coordinates"][0]
    assert info["early_stopped"] is False
    assert info["stop_epoch"] == 3


def test_retrain_doubles_stop_epoch(quick_train_config):
    estimator = train_drift_estimator(noiseless_paths(6), 0.1, config=quick_train_config)
    info = estimator.metadata["coordinates"][0]
    assert info["retrain_epochs"] == 2 * info["stop_epoch"]
    assert info["best_epoch"] <= info["stop_epoch"]


def test_training_is_deterministic(quick_train_config, tmp_path):
    paths = noiseless_paths(6)
    first = train_drift_estimator(paths, 0.1, config=quick_train_config)
    second = train_drift_estimator(paths, 0.1, config=quick_train_config)
    assert np.array_equal(first.networks[0].theta, second.networks[0].theta)

    restored = load_estimator(save_estimator(first, tmp_path / "drift.json"))
    X = np.linspace(-2, 2, 9)[:, None]
    assert np.array_equal(restored(X), first(X))


def test_training_rejects_empty_class():
    with pytest.raises(TrainingError):
        train_drift_estimator(np.empty((0, 5, 1)), 0.1)


def test_direct_classifier_separates_constant_drifts(separable_spec):
    train = generate_dataset(separable_spec, Balanced(20), 10, 1.0, 0)
    test = generate_dataset(separable_spec, Balanced(40), 10, 1.0, 1)
    space = {"learning_rate": [1e-2], "weight_decay": [0.0], "hidden_sizes": [(16, 16)], "batch_size": [8]}
    classifier = train_direct_classifier(train, 1, config=TrainConfig(seed=1),
                                         direct=DirectConfig(max_epochs=100, patience=100), search_space=space)
    states, labels = test.stacked()
    assert np.mean(classifier.predict(states) == labels) == 1.0


def test_direct_classifier_probabilities_and_determinism(separable_spec):
    train = generate_dataset(separable_spec, Balanced(10), 5, 1.0, 0)
    direct = DirectConfig(max_epochs=3, patience=2)
    first = train_direct_classifier(train, 2, config=TrainConfig(seed=5), direct=direct)
    second = train_direct_classifier(train, 2, config=TrainConfig(seed=5), direct=direct)
    assert first.hyperparameters == second.hyperparameters
    for a, b in zip(first.weights, second.weights):
        assert np.array_equal(a, b)

    inputs = make_rng(0).normal(size=(7, 6, 1)) * 10
    assert first.predict_proba(inputs).sum(axis=1) == pytest.approx(np.ones(7), abs=1e-9)
