import dataclasses

import numpy as np
import pytest

from core import fl
from core.errors import InvalidInputError, NumericalError
from core.rng import seeded_rng
from core.settings import FLSettings
from core.types import DatasetShard, ModelUpdate

from conftest import make_device, make_shard


def numeric_grad(weights, spec, features, labels, eps=1e-6):
    grad = np.zeros_like(weights)
    for k in range(weights.size):
        step = np.zeros_like(weights)
        step[k] = eps
        plus, _ = fl.loss_and_grad(weights + step, spec, features, labels)
        minus, _ = fl.loss_and_grad(weights - step, spec, features, labels)
        grad[k] = (plus - minus) / (2 * eps)
    return grad


@pytest.mark.parametrize("kind", ["softmax-linear", "mlp"])
def test_analytic_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    for trial in range(25):
        spec = fl.GlobalModelSpec(kind, input_dim=3, num_classes=3, hidden=4, init_seed=trial)
        weights = rng.normal(0.0, 0.5, spec.num_params)
        features = rng.normal(size=(6, 3))
        labels = rng.integers(0, 3, 6)
        _, analytic = fl.loss_and_grad(weights, spec, features, labels)
        numeric = numeric_grad(weights, spec, features, labels)
        error = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert error < 1e-5


def test_init_weights_are_seeded():
    spec = fl.GlobalModelSpec(input_dim=4, num_classes=3)
    np.testing.assert_array_equal(spec.init_weights(), spec.init_weights())
    assert spec.init_weights().shape == (4 * 3 + 3,)
    other = dataclasses.replace(spec, init_seed=1)
    assert not np.array_equal(spec.init_weights(), other.init_weights())


def test_local_train_is_deterministic_and_learns():
    spec = fl.GlobalModelSpec(input_dim=4, num_classes=3)
    device = make_device(0, rows=60)
    start = spec.init_weights()
    first = fl.local_train(device, start, 30, 0.1, spec, batch_size=16, round_index=1, seed=3)
    second = fl.local_train(device, start, 30, 0.1, spec, batch_size=16, round_index=1, seed=3)
    later = fl.local_train(device, start, 30, 0.1, spec, batch_size=16, round_index=2, seed=3)
    assert first.identifier == second.identifier
    assert first.identifier != later.identifier
    assert first.owner == 0 and first.round == 1 and first.local_steps == 30
    data = device.dataset
    before, _ = fl.loss_and_grad(start, spec, data.features, data.labels)
    after, _ = fl.loss_and_grad(first.weights, spec, data.features, data.labels)
    assert after < before


def test_local_train_divergence():
    spec = fl.GlobalModelSpec(input_dim=4, num_classes=3)
    device = make_device(0)
    with np.errstate(all="ignore"), pytest.raises(NumericalError, match="divergence"):
        fl.local_train(device, spec.init_weights(), 50, 1e308, spec)


def test_local_steps_derivation():
    assert fl.local_steps(300, FLSettings(batch_size=128, local_epochs=2)) == 6
    assert fl.local_steps(10, FLSettings(batch_size=128)) == 1
    assert fl.local_steps(300, FLSettings(local_steps=4)) == 4


def always_class_zero(spec):
    w, b = np.zeros((spec.input_dim, spec.num_classes)), np.zeros(spec.num_classes)
    b[0] = 1.0
    return np.concatenate([w.ravel(), b])


def test_offchain_verify_threshold_boundary_is_inclusive():
    spec = fl.GlobalModelSpec(input_dim=2, num_classes=2)
    holdout = DatasetShard(np.zeros((4, 2)), np.array([0, 1, 0, 1]), 2)
    update = ModelUpdate.create(always_class_zero(spec), 1, 1)
    verifier = make_device(9)
    accepted = fl.offchain_verify(update, verifier, 0.5, spec, holdout=holdout)
    assert accepted.accepted and accepted.accuracy == 0.5
    rejected = fl.offchain_verify(update, verifier, 0.51, spec, holdout=holdout)
    assert rejected == fl.Verdict(False, "quality", 0.5)


def test_offchain_verify_signature_first():
    spec = fl.GlobalModelSpec(input_dim=2, num_classes=2)
    update = dataclasses.replace(ModelUpdate.create(always_class_zero(spec), 1, 1), signature_valid=False)
    holdout = DatasetShard(np.zeros((2, 2)), np.array([0, 0]), 2)
    assert fl.offchain_verify(update, make_device(9), 0.0, spec, holdout=holdout).reason == "signature"


def test_fedavg_weighted_by_data_size_and_order_free():
    a = ModelUpdate.create([1.0, 0.0], 2, 1)
    b = ModelUpdate.create([0.0, 1.0], 5, 1)
    np.testing.assert_allclose(fl.fedavg([a, b], [30, 10]), [0.75, 0.25])
    assert np.array_equal(fl.fedavg([a, b], [30, 10]), fl.fedavg([b, a], [10, 30]))


def test_fedavg_empty():
    with pytest.raises(InvalidInputError, match="empty aggregation"):
        fl.fedavg([], [])


def test_staleness_weight_exact_values():
    s = 0.25
    assert fl.staleness_weight(s, 7, 7) == s
    assert fl.staleness_weight(s, 10, 7) == s / 2
    assert fl.staleness_weight(s, 5, 1) < fl.staleness_weight(s, 4, 1)
    with pytest.raises(InvalidInputError):
        fl.staleness_weight(s, 3, 4)


def test_staleness_aggregator_matches_scalar_oracle():
    s, q = 0.5, 0.5
    init = np.array([1.0])
    agg = fl.StalenessAggregator([0, 1], init, s, q)
    weight = {0: s, 1: s}
    model = {0: 1.0, 1: 1.0}

    def oracle(cluster, value, tau, t):
        weight[cluster] = s * (t - tau + 1) ** -q
        model[cluster] = value
        return weight[0] * model[0] + weight[1] * model[1]

    steps = [(0, 2.0, 1, 1), (1, 3.0, 1, 2), (0, 4.0, 2, 3)]
    for cluster, value, tau, t in steps:
        result = agg.aggregate(cluster, np.array([value]), tau, t)
        assert result[0] == pytest.approx(oracle(cluster, value, tau, t), abs=1e-12)
    assert agg.global_model()[0] == pytest.approx(weight[0] * 4.0 + weight[1] * 3.0, abs=1e-12)


def test_staleness_aggregator_reset():
    agg = fl.StalenessAggregator([0, 1, 2, 3], np.zeros(2), 0.25)
    agg.aggregate(0, np.ones(2), 1, 1)
    agg.reset([0, 1, 2, 3], np.full(2, 2.0), 5)
    np.testing.assert_allclose(agg.global_model(), [2.0, 2.0])


def test_partition_data_covers_dataset():
    dataset = fl.synthetic_dataset(5, 4, 400, seeded_rng(1).split("data"))
    shards = fl.partition_data(dataset, 10, 5.0, seeded_rng(1).split("dirichlet"))
    assert len(shards) == 10
    assert all(s.size > 0 for s in shards)
    assert sum(s.size for s in shards) == 400
    again = fl.partition_data(dataset, 10, 5.0, seeded_rng(1).split("dirichlet"))
    assert all(a == b for a, b in zip(shards, again))


def test_partition_data_non_iid_is_skewed():
    dataset = fl.synthetic_dataset(5, 4, 800, seeded_rng(2).split("data"))
    iid = fl.partition_data(dataset, 8, 5.0, seeded_rng(3))
    skewed = fl.partition_data(dataset, 8, 0.2, seeded_rng(3))

    def mean_top_share(shards):
        return np.mean([np.bincount(s.labels, minlength=4).max() / s.size for s in shards])

    assert mean_top_share(skewed) > mean_top_share(iid)


def test_partition_data_too_small():
    with pytest.raises(InvalidInputError):
        fl.partition_data(make_shard(3), 5, 1.0, seeded_rng(0))


def test_csv_dataset(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("# x1,x2,label\n0.5,1.0,0\n-1.0,2.0,2\n3.0,0.0,1\n", encoding="utf-8")
    dataset = fl.load_csv_dataset(path)
    assert dataset.size == 3 and dataset.num_classes == 3
    np.testing.assert_array_equal(dataset.labels, [0, 2, 1])
    path.write_text("0.5,1.0,0.5\n", encoding="utf-8")
    with pytest.raises(InvalidInputError):
        fl.load_csv_dataset(path)


def test_train_test_split():
    dataset = fl.synthetic_dataset(3, 2, 100, seeded_rng(0))
    train, test = fl.train_test_split(dataset, 0.2, seeded_rng(1))
    assert (train.size, test.size) == (80, 20)


def test_zero_learning_rate_keeps_model_and_identifier():
    spec = fl.GlobalModelSpec(input_dim=4, num_classes=3)
    start = ModelUpdate.create(spec.init_weights(), 0, 0)
    update = fl.local_train(make_device(0, rows=40), start, 5, 0.0, spec, batch_size=8, round_index=1)
    np.testing.assert_array_equal(update.weights, start.weights)
    assert update.identifier == start.identifier


def test_single_step_on_single_sample_is_one_gradient_step():
    spec = fl.GlobalModelSpec(input_dim=4, num_classes=3)
    device = make_device(0, rows=1)
    x, label = device.dataset.features[0], int(device.dataset.labels[0])
    start = np.random.default_rng(5).normal(0.0, 0.3, spec.num_params)
    w, b = start[:12].reshape(4, 3), start[12:]

    logits = x @ w + b
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    delta = probs - np.eye(3)[label]
    expected = start - 0.05 * np.concatenate([np.outer(x, delta).ravel(), delta])

    update = fl.local_train(device, start, 1, 0.05, spec)
    np.testing.assert_allclose(update.weights, expected, rtol=0, atol=1e-10)


def test_partition_data_huge_alpha_matches_global_histogram():
    dataset = fl.synthetic_dataset(5, 10, 10_000, seeded_rng(4).split("data"))
    shards = fl.partition_data(dataset, 10, 1.0e6, seeded_rng(4).split("dirichlet"))
    overall = np.bincount(dataset.labels, minlength=10) / dataset.size
    for shard in shards:
        share = np.bincount(shard.labels, minlength=10) / shard.size
        np.testing.assert_allclose(share, overall, atol=0.02)


def test_partition_data_small_alpha_concentrates_a_class():
    dataset = fl.synthetic_dataset(5, 10, 2000, seeded_rng(6).split("data"))
    shards = fl.partition_data(dataset, 10, 0.2, seeded_rng(6).split("dirichlet"))
    top_share = max(np.bincount(s.labels, minlength=10).max() / s.size for s in shards)
    assert top_share > 0.5
