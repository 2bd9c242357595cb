import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mdmoc import merge_engine as me
from mdmoc.bench import mlp
from mdmoc.bench.experiment import BenchConfig
from mdmoc.bench.metrics import compute_metrics, compute_uad
from mdmoc.bench.mlp import MlpSpec
from mdmoc.bench.tasks import (
    TaskBundle,
    evaluate,
    make_task,
    nearest_centroid_accuracy,
    train_task,
)
from mdmoc.errors import NumericalError, ValidationError
from mdmoc.orthogonalizer import orthogonalize_sequence
from mdmoc.parameter_store import DeltaRecord, ParameterVector


# tasks ----------------------------------------------------------------------


def test_well_separated_task_is_easy_for_centroids():
    assert nearest_centroid_accuracy(make_task(5, separation=8.0)) >= 0.99


def test_task_generation_is_seed_deterministic():
    a, b = make_task(11), make_task(11)
    for split in ("train", "val", "test"):
        assert a.split(split)[0].tobytes() == b.split(split)[0].tobytes()
        assert a.split(split)[1].tobytes() == b.split(split)[1].tobytes()
    assert make_task(12).train_x.tobytes() != a.train_x.tobytes()


def test_task_shapes_and_centre_separation():
    t = make_task(3, class_count=4, dims=16, separation=3.0)
    assert (len(t.train_y), len(t.val_y), len(t.test_y)) == (1024, 256, 256)
    assert np.bincount(t.train_y).tolist() == [256] * 4
    assert t.train_y.max() < t.class_count
    # splits are disjoint draws
    assert not np.any(np.all(t.train_x[:, None, :] == t.test_x[None, :, :], axis=-1))


def test_single_class_task():
    t = make_task(1, class_count=1)
    assert set(t.train_y) == {0} and set(t.test_y) == {0}
    spec = MlpSpec(classes=1)
    assert evaluate(mlp.init_params(spec, 0), spec, t)[1] == 1.0


def test_infeasible_separation_is_an_error():
    with pytest.raises(ValidationError):
        make_task(0, class_count=30, dims=1, separation=50.0)
    with pytest.raises(ValidationError):
        make_task(0, separation=0.0)


def test_task_bundle_checkpoint_round_trip():
    t = make_task(2, head=3)
    back = TaskBundle.from_checkpoint(t.to_checkpoint())
    assert back.task_id == t.task_id and back.head == 3 and back.generator_seed == 2
    assert back.test_y.tobytes() == t.test_y.tobytes()


# network ----------------------------------------------------------------------


def backprop_error(seed, kind="cross-entropy"):
    # 1 input -> 2 hidden -> 2 classes is a 10-parameter network
    spec = MlpSpec(input_dim=1, hidden=(2,), classes=2)
    assert spec.size == 10
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=spec.size)
    x = rng.normal(size=(7, 1))
    y = rng.integers(0, 2, 7)
    _, g = mlp.loss_and_grad(spec, theta, x, y, kind=kind)
    h = 1e-4
    fd = np.array([
        (mlp.loss_and_grad(spec, theta + h * e, x, y, kind=kind)[0]
         - mlp.loss_and_grad(spec, theta - h * e, x, y, kind=kind)[0]) / (2 * h)
        for e in np.eye(spec.size)
    ])
    return np.linalg.norm(g - fd) / max(np.linalg.norm(fd), 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["cross-entropy", "squared-error"]))
def test_backprop_matches_finite_differences(seed, kind):
    assert backprop_error(seed, kind) <= 1e-5


def test_multi_head_gradient_touches_only_own_head():
    spec = MlpSpec(input_dim=3, hidden=(4, 4), classes=2, heads=3)
    theta = mlp.init_params(spec, 0)
    x, y = np.ones((2, 3)), np.array([0, 1])
    _, g = mlp.loss_and_grad(spec, theta.values, x, y, head=1)
    for name in ("head0.weight", "head2.bias"):
        assert np.all(g[theta.layout.slice(name)] == 0)
    assert np.any(g[theta.layout.slice("head1.weight")] != 0)


def test_population_forward_matches_single():
    spec = MlpSpec(input_dim=5, hidden=(7, 3), classes=4, heads=2)
    rng = np.random.default_rng(0)
    thetas = rng.normal(size=(4, spec.size))
    x = rng.normal(size=(6, 5))
    batched = mlp.forward_population(spec, thetas, x, head=1)
    for p in range(4):
        np.testing.assert_allclose(batched[p], mlp.forward(spec, thetas[p], x, head=1), rtol=1e-13, atol=1e-13)


def test_uniform_output_loss_is_log_classes():
    spec = MlpSpec()
    t = make_task(0)
    loss, acc = evaluate(np.zeros(spec.size), spec, t)
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    assert acc == pytest.approx(0.25)  # argmax ties pick class 0, a quarter of the balanced labels


def test_perfect_classifier_scores_one():
    logits = np.eye(4)[[0, 3, 2, 1, 1]] * 10
    assert mlp.accuracy_from_logits(logits, [0, 3, 2, 1, 1]) == 1.0


def test_loss_matches_per_example_oracle():
    spec = MlpSpec()
    theta = mlp.init_params(spec, 4)
    t = make_task(4)
    loss, _ = evaluate(theta, spec, t)
    logits = mlp.forward(spec, theta.values, t.test_x)
    oracle = 0.0
    for row, label in zip(logits, t.test_y):
        m = max(row)
        oracle += -(row[label] - m - math.log(math.fsum(math.exp(v - m) for v in row)))
    assert loss == pytest.approx(oracle / len(t.test_y), abs=1e-12)


# training ---------------------------------------------------------------------


def test_zero_learning_rate_returns_base():
    spec = MlpSpec()
    base = mlp.init_params(spec, 0)
    out = train_task(base, spec, make_task(1), lr=0.0)
    assert out.values.tobytes() == base.values.tobytes()


def test_default_training_run():
    spec = MlpSpec()
    base = mlp.init_params(spec, 0)
    task = make_task(1)
    start, _ = evaluate(base, spec, task, "train")
    theta = train_task(base, spec, task, seed=0)
    end, _ = evaluate(theta, spec, task, "train")
    assert end <= 0.5 * start
    # pinned from one run: 0.9375
    assert evaluate(theta, spec, task)[1] == pytest.approx(0.9375, abs=0.03)
    again = train_task(base, spec, task, seed=0)
    assert again.values.tobytes() == theta.values.tobytes()


def test_divergence_raises():
    spec = MlpSpec(input_dim=16, hidden=(4,), classes=4)
    base = ParameterVector(np.full(spec.size, 1e308), spec.layout())
    with np.errstate(all="ignore"), pytest.raises(NumericalError):
        train_task(base, spec, make_task(1), epochs=1, lr=1e300)


# metrics ----------------------------------------------------------------------


def oracle_metrics(R, chance):
    # exact rational arithmetic on plain lists, rounded once per sum
    T = len(R)
    F = Fraction
    acc = float(sum(F(R[T - 1][j]) for j in range(T))) / T
    bwt = float(sum(F(R[T - 1][j]) - F(R[j][j]) for j in range(T - 1))) / (T - 1)
    fwt = float(sum(F(R[j - 1][j]) - F(chance) for j in range(1, T))) / (T - 1)
    return acc, bwt, fwt


def random_matrix(rng, t):
    R = rng.uniform(0, 1, (t, t))
    R[np.triu_indices(t, 2)] = np.nan
    return R


def test_identical_rows_have_no_backward_transfer():
    row = [0.9, 0.8, 0.7]
    assert compute_metrics([row, row, row], 0.25).bwt == 0.0


def test_uniform_forgetting():
    R = np.array([[0.9, 0.3, np.nan], [0.8, 0.7, 0.2], [0.8, 0.6, 0.95]])
    assert compute_metrics(R, 0.25).bwt == pytest.approx(-0.1, abs=1e-15)


def test_three_task_hand_computed():
    R = np.array([[0.8, 0.3, np.nan], [0.7, 0.9, 0.4], [0.6, 0.85, 0.95]])
    r = compute_metrics(R, 0.25)
    assert r.acc == pytest.approx((0.6 + 0.85 + 0.95) / 3, abs=1e-15)
    assert r.bwt == pytest.approx(((0.6 - 0.8) + (0.85 - 0.9)) / 2, abs=1e-15)
    assert r.fwt == pytest.approx(((0.3 - 0.25) + (0.4 - 0.25)) / 2, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 8))
def test_metrics_match_oracle(seed, t):
    R = random_matrix(np.random.default_rng(seed), t)
    r = compute_metrics(R, 0.25)
    assert (r.acc, r.bwt, r.fwt) == oracle_metrics(R.tolist(), 0.25)


def test_incomplete_matrix_is_rejected():
    R = np.array([[0.8, np.nan], [np.nan, 0.9]])
    with pytest.raises(ValidationError):
        compute_metrics(R, 0.5)
    with pytest.raises(ValidationError):
        compute_metrics([[0.8, 0.4], [0.3, 1.2]], 0.5)


def _uad_state(alpha_removed):
    spec = MlpSpec(input_dim=4, hidden=(5,), classes=2)
    base = mlp.init_params(spec, 0)
    rng = np.random.default_rng(0)
    ds = [DeltaRecord(f"m{i}", rng.normal(size=spec.size), base.layout) for i in range(3)]
    state = me.merge(base, orthogonalize_sequence(ds), {"m0": 1.0, "m1": 1.0, "m2": alpha_removed})
    x = rng.normal(size=(50, 4))
    ys = {f"m{i}": rng.integers(0, 2, 50) for i in range(3)}

    def accuracy(theta, tid):
        return float(mlp.accuracy_from_logits(mlp.forward(spec, theta, x), ys[tid]))

    return state, accuracy


def test_uad_is_zero_for_unused_model():
    state, accuracy = _uad_state(0.0)
    uad, seconds, after = compute_uad(state, "m2", accuracy)
    assert uad == 0.0 and seconds >= 0.0
    assert after.ids == ("m0", "m1")


def test_uad_matches_direct_difference():
    state, accuracy = _uad_state(2.0)
    uad, _, after = compute_uad(state, "m2", accuracy)
    expect = np.mean([accuracy(state.merged.values, k) - accuracy(after.merged.values, k) for k in ("m0", "m1")])
    assert uad == expect
    with pytest.raises(ValidationError):
        compute_uad(state, "ghost", accuracy)


# config ----------------------------------------------------------------------


def test_bench_config_from_mapping():
    cfg = BenchConfig.from_mapping({"tasks": "3", "hidden": "8,8", "ewc-lambda": "10", "method": "grad"})
    assert (cfg.tasks, cfg.hidden, cfg.ewc_lambda, cfg.method) == (3, (8, 8), 10.0, "grad")
    assert cfg.mlp_spec.heads == 3
    with pytest.raises(ValidationError):
        BenchConfig.from_mapping({"colour": "blue"})
    with pytest.raises(ValidationError):
        BenchConfig(method="annealing")
