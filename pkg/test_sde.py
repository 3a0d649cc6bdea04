import math

import numpy as np
import pytest

from conftest import constant_field, zero_sigma
from sde import (Balanced, CustomDrift, IdentitySigma, ModelSpec, ModelSpecError, Multinomial,
                 PointMass, ScalarSigma, SimulationError, Trajectory, class_counts_for, euler_maruyama, eval_drift,
                 eval_sigma, example1_spec, example2_spec, generate_dataset, load_dataset,
                 sample_initial, save_dataset, simulate_path, simulate_paths)
from utils import make_rng


def ou_spec():
    return ModelSpec(d=1, num_classes=1, drift=CustomDrift((lambda x: -x,)), initial=PointMass((0.0,)))


def test_cosine_squared_drift_values():
    spec = example2_spec(theta=4.0)
    assert eval_drift(spec, 3, [0.0])[0] == pytest.approx(-4.0)
    spec = example2_spec(theta=1.5)
    assert eval_drift(spec, 1, [math.pi / 2])[0] == pytest.approx(0.25)


def test_double_layer_drift_at_origin():
    spec = example1_spec(d=1, theta=5.0)
    assert eval_drift(spec, 1, [0.0])[0] == pytest.approx(1.0 / math.sqrt(2.0 * math.pi))


def test_drift_rejects_unknown_label_and_dimension():
    spec = example1_spec(d=2)
    with pytest.raises(ModelSpecError):
        eval_drift(spec, 4, [0.0, 0.0])
    with pytest.raises(ModelSpecError):
        eval_drift(spec, 1, [0.0, 0.0, 0.0])


def test_drift_is_repeatable():
    spec = example1_spec(d=3)
    x = make_rng(0, "x").standard_normal((5, 3))
    assert np.array_equal(eval_drift(spec, 2, x), eval_drift(spec, 2, x))


def test_sigma_values():
    assert np.array_equal(eval_sigma(example1_spec(d=3), np.zeros(3)), np.eye(3))
    spec = example2_spec(theta=1.0)
    assert eval_sigma(spec, [0.0])[0, 0] == pytest.approx(1.0)
    assert 0.1 < eval_sigma(spec, [10.0])[0, 0] < 0.2


def test_spec_invariants():
    with pytest.raises(ModelSpecError):
        ModelSpec(d=1, num_classes=3, drift=example1_spec().drift, priors=(0.5, 0.5, 0.5))
    with pytest.raises(ModelSpecError):
        ModelSpec(d=2, num_classes=3, drift=example2_spec(theta=1.0).drift)
    with pytest.raises(ModelSpecError):
        ModelSpec(d=1, num_classes=2, drift=example1_spec().drift)


def test_sample_initial():
    assert sample_initial(example2_spec(theta=1.0), make_rng(0))[0] == 0.0
    spec = example1_spec(d=2)
    draws = np.array([sample_initial(spec, make_rng(5, i)) for i in range(20000)])
    assert np.all(np.abs(draws.mean(axis=0)) < 0.03)
    assert np.all(np.abs(draws.var(axis=0) - 1.0) < 0.05)
    assert np.array_equal(sample_initial(spec, make_rng(9)), sample_initial(spec, make_rng(9)))


def test_constant_path_without_noise():
    spec = ModelSpec(d=2, num_classes=1, drift=CustomDrift((constant_field(0.0),)),
                     sigma=ScalarSigma(zero_sigma), initial=PointMass((1.5, -2.0)))
    traj = simulate_path(spec, 1, 10, 1.0, make_rng(0))
    assert np.array_equal(traj.states, np.tile([1.5, -2.0], (11, 1)))


def test_unit_drift_follows_euler_recursion():
    spec = ModelSpec(d=1, num_classes=1, drift=CustomDrift((constant_field(1.0),)),
                     sigma=ScalarSigma(zero_sigma), initial=PointMass((0.0,)))
    traj = simulate_path(spec, 1, 100, 1.0, make_rng(0))
    assert traj.states[:, 0] == pytest.approx(0.01 * np.arange(101), abs=1e-12)
    assert traj.states[-1, 0] == pytest.approx(1.0, abs=1e-12)
    assert traj.times[-1] == pytest.approx(1.0)


def test_ou_terminal_variance():
    states = simulate_paths(ou_spec(), 1, 10000, 100, 1.0, 11)
    assert abs(states[:, -1, 0].var(ddof=1) - (1.0 - math.exp(-2.0)) / 2.0) < 0.03


def test_refinement_shrinks_discretization_error():
    spec = ou_spec()
    rng = make_rng(2, "refinement")
    n, T = 2000, 1.0
    fine_M = 512
    dW = math.sqrt(T / fine_M) * rng.standard_normal((n, fine_M, 1))
    x0 = np.zeros((n, 1))
    errors = []
    for M in (32, 64, 128):
        coarse = dW.reshape(n, M, fine_M // M, 1).sum(axis=2)
        finer = dW.reshape(n, 2 * M, fine_M // (2 * M), 1).sum(axis=2)
        X_coarse = euler_maruyama(spec, 1, x0, coarse, T / M)[:, -1, 0]
        X_fine = euler_maruyama(spec, 1, x0, finer, T / (2 * M))[:, -1, 0]
        errors.append(np.mean(np.abs(X_coarse - X_fine)))
    for a, b in zip(errors[:-1], errors[1:]):
        assert 1.5 <= a / b <= 3.0


def test_non_finite_state_raises():
    spec = ModelSpec(d=1, num_classes=1, drift=CustomDrift((lambda x: x * x * 1e200,)),
                     sigma=ScalarSigma(zero_sigma), initial=PointMass((1.0,)))
    with pytest.raises(SimulationError) as info:
        simulate_path(spec, 1, 5, 1.0, make_rng(0))
    assert info.value.step >= 1


def test_batched_paths_match_single_paths():
    spec = example1_spec(d=2)
    batch = simulate_paths(spec, 2, 3, 20, 1.0, 4)
    single = simulate_path(spec, 2, 20, 1.0, make_rng(4, 2, 1))
    assert np.array_equal(batch[1], single.states)


def test_dataset_sizes():
    spec = example1_spec()
    assert generate_dataset(spec, Balanced(96), 5, 1.0, 0).class_counts == [32, 32, 32]
    assert sum(generate_dataset(spec, Multinomial(100), 5, 1.0, 0).class_counts) == 100
    with pytest.raises(ValueError):
        generate_dataset(spec, Balanced(100), 5, 1.0, 0)


def test_multinomial_counts_are_centered():
    spec = example2_spec(theta=1.0)
    counts = np.array([class_counts_for(spec, Multinomial(300), seed) for seed in range(10000)])
    assert np.all(np.abs(counts.mean(axis=0) - 100.0) < 1.0)


def test_dataset_determinism_and_round_trip(tmp_path):
    spec = example2_spec(theta=2.5)
    first = generate_dataset(spec, Multinomial(30), 8, 1.0, 21)
    second = generate_dataset(spec, Multinomial(30), 8, 1.0, 21)
    for a, b in zip(first.paths, second.paths):
        assert np.array_equal(a, b)

    csv_path, json_path = save_dataset(first, tmp_path / "data")
    loaded = load_dataset(csv_path)
    assert loaded.class_counts == first.class_counts
    assert loaded.delta == first.delta
    for a, b in zip(first.paths, loaded.paths):
        assert np.array_equal(a, b)


def test_long_dataset_round_trips_bit_for_bit(tmp_path):
    dataset = generate_dataset(example2_spec(theta=1.5), Multinomial(300), 100, 1.0, 3)
    csv_path, _ = save_dataset(dataset, tmp_path / "long")
    loaded = load_dataset(csv_path)
    original, _ = dataset.stacked()
    restored, _ = loaded.stacked()
    assert np.array_equal(original.view(np.uint64), restored.view(np.uint64))


def test_stacked_paths_and_priors():
    dataset = generate_dataset(example1_spec(), Balanced(9), 4, 1.0, 0)
    states, labels = dataset.stacked()
    assert states.shape == (9, 5, 1)
    assert labels.tolist() == [1, 1, 1, 2, 2, 2, 3, 3, 3]
    assert np.array_equal(states[4], dataset.paths[1][1])
    assert dataset.empirical_priors() == pytest.approx((1 / 3, 1 / 3, 1 / 3))


def test_trajectory_invariants():
    with pytest.raises(ValueError):
        Trajectory(np.zeros((11, 1)), 0.1, 2.0)
    assert Trajectory(np.zeros((11, 1)), 0.1, 1.0).M == 10
    assert isinstance(example1_spec().sigma, IdentitySigma)
