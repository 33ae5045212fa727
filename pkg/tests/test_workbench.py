import numpy as np
import pytest

from mixq.nn import ToyModel, build_model
from mixq.pruner import NeuronGraph, discover_groups, prune, rank_groups
from mixq.quantizer import dequantize
from mixq.workbench import (
    TrainHyper,
    adapter_gradients,
    assemble,
    evaluate,
    make_task,
    mean_loss,
    train_adapters,
    train_full,
)
from oracles import central_difference

SMALL = dict(sizes=(192, 96, 96), n_features=8, n_outputs=4)


@pytest.fixture(scope="module")
def setup():
    task = make_task("blobs", seed=0, **SMALL)
    base, _ = train_full(build_model([8, 16, 16, 4], seed=0), task, TrainHyper(epochs=20, seed=0))
    ranked = rank_groups(discover_groups(NeuronGraph.from_model(base)), base, (task.X_train, task.y_train, "xent"))
    return prune(base, ranked, 0.2), task


def test_task_determinism_and_sizes():
    a = make_task("blobs", seed=3, **SMALL)
    b = make_task("blobs", seed=3, **SMALL)
    assert a.X_train.shape == (192, 8) and a.X_val.shape == (96, 8) and a.X_test.shape == (96, 8)
    np.testing.assert_array_equal(a.X_val, b.X_val)
    np.testing.assert_array_equal(a.y_test, b.y_test)
    assert not np.array_equal(a.X_train, make_task("blobs", seed=4, **SMALL).X_train)
    t = make_task("teacher", seed=1, sizes=(10, 5, 5), n_features=3, n_outputs=2)
    assert t.y_train.shape == (10, 2) and t.loss == "mse"


def test_blob_centers_are_equidistant():
    task = make_task("blobs", seed=0, sizes=(4000, 10, 10), n_features=8, n_outputs=4, separation=4.0)
    means = np.array([task.X_train[task.y_train == c].mean(0) for c in range(4)])
    dist = np.linalg.norm(means[:, None] - means[None], axis=-1)[np.triu_indices(4, 1)]
    np.testing.assert_allclose(dist, 4.0, atol=0.25)


def test_well_separated_blobs_are_learnable():
    task = make_task("blobs", seed=0, separation=10.0, **SMALL)
    model, report = train_full(build_model([8, 16, 4], seed=0), task, TrainHyper(epochs=20))
    assert evaluate(model, task, "val") >= 0.95
    assert report.P == evaluate(model, task, "val")


def test_accuracy_matches_confusion_counts(setup):
    pruned, task = setup
    pred = np.argmax(pruned.forward(task.X_val), axis=1)
    confusion = np.zeros((4, 4), dtype=int)
    for t, p in zip(task.y_val, pred):
        confusion[t, p] += 1
    assert evaluate(pruned, task, "val") == np.trace(confusion) / len(pred)


def test_constant_output_accuracy():
    task = make_task("blobs", seed=0, **SMALL)
    W = [np.zeros((4, 8))]
    const = ToyModel(W, [np.array([0.0, 0.0, 1.0, 0.0])], "relu")
    assert evaluate(const, task, "val") == np.mean(task.y_val == 2)


def test_perfect_teacher_scores_one():
    task = make_task("teacher", seed=0, sizes=(20, 20, 20), n_features=4, n_outputs=3, noise=0.0)
    assert evaluate(task.teacher, task, "val") == 1.0
    assert evaluate(task.teacher, task, "test") == 1.0


def test_unknown_split():
    task = make_task("blobs", seed=0, **SMALL)
    with pytest.raises(ValueError):
        evaluate(build_model([8, 4]), task, "holdout")


def test_assemble_shapes_and_bits(setup):
    pruned, _ = setup
    model = assemble(pruned, (4, 8, 4), rank=4)
    assert model.config == (4, 8, 4)
    assert [l.base.codebook.bits for l in model.layers] == [4, 8, 4]
    assert all(l.A.shape[1] == 4 for l in model.layers)
    with pytest.raises(ValueError):
        assemble(pruned, (4, 8))
    with pytest.raises(ValueError):
        assemble(pruned, (4, 8, 2))


def test_eight_bit_reconstruction_bound(setup):
    pruned, _ = setup
    model = assemble(pruned, (8, 8, 8), rank=4, init="gaussian", block_size=64)
    for layer, W in zip(model.layers, pruned.weights):
        scales = np.repeat(layer.base.scales, 64)[: W.size].reshape(W.shape)
        err = np.abs(layer.effective_weight() - W)
        assert np.all(err <= scales / 255 * (1 + 1e-12))


def test_loftq_start_beats_gaussian_start(setup):
    pruned, task = setup
    lq = assemble(pruned, (4, 4, 4), rank=4, init="loftq")
    gs = assemble(pruned, (4, 4, 4), rank=4, init="gaussian")
    assert mean_loss(lq, task.X_val, task.y_val, "xent") <= mean_loss(gs, task.X_val, task.y_val, "xent")


def test_rank_zero_leaves_metric_unchanged(setup):
    pruned, task = setup
    model = assemble(pruned, (4, 4, 4), rank=0)
    assert model.n_trainable == 0
    before = evaluate(model, task, "val")
    report = train_adapters(model, task, TrainHyper(epochs=2))
    assert report.P == before == evaluate(model, task, "val")


@pytest.mark.parametrize("kind", ["blobs", "teacher"])
def test_adapter_gradients_finite_difference(kind):
    task = make_task(kind, seed=0, sizes=(12, 4, 4), n_features=4, n_outputs=4)
    base = build_model([4, 6, 4], activation="tanh", seed=2)
    pruned = prune(base, [], 0.0)
    model = assemble(pruned, (4, 8), rank=2, init="gaussian", seed=1)
    rng = np.random.default_rng(0)
    for layer in model.layers:
        layer.B[...] = rng.normal(size=layer.B.shape) * 0.3
    X, y = task.X_train, task.y_train
    _, gA, gB, gb = adapter_gradients(model, X, y, task.loss)
    f = lambda: mean_loss(model, X, y, task.loss)
    for layer, ga, gbb, gbias in zip(model.layers, gA, gB, gb):
        for param, grad in ((layer.A, ga), (layer.B, gbb), (layer.bias, gbias)):
            for idx in np.ndindex(param.shape):
                view = param[tuple(slice(i, i + 1) for i in idx)]
                num = central_difference(f, view)
                assert abs(num - grad[idx]) <= 1e-4 * max(abs(num), abs(grad[idx]), 1e-6)


def test_training_is_deterministic_and_keeps_base(setup):
    pruned, task = setup
    blobs = [l.base.to_bytes() for l in assemble(pruned, (4, 8, 8)).layers]
    reports = []
    for _ in range(2):
        model = assemble(pruned, (4, 8, 8))
        reports.append(train_adapters(model, task, TrainHyper(epochs=3, seed=5)))
        assert [l.base.to_bytes() for l in model.layers] == blobs
        for l in model.layers:
            np.testing.assert_array_equal(l.frozen, dequantize(l.base))
    assert reports[0].to_dict() == reports[1].to_dict()


def test_reported_metric_is_best_epoch(setup):
    pruned, task = setup
    model = assemble(pruned, (4, 4, 4))
    report = train_adapters(model, task, TrainHyper(epochs=4, seed=0))
    assert report.P == max(report.val_curve)
    assert report.val_curve[report.best_epoch] == report.P
    assert evaluate(model, task, "val") == report.P
    assert len(report.loss_curve) == 4 and len(report.val_curve) == 5


def test_divergence_raises(setup):
    pruned, task = setup
    model = assemble(pruned, (4, 4, 4))
    with pytest.raises(FloatingPointError):
        train_adapters(model, task, TrainHyper(epochs=3, lr=1e200))
