import math

import numpy as np
import pytest

from signet import models, training, verify
from signet.exceptions import ConfigError, StratificationError, TrainingDivergence
from signet.sigsynth import SignalDataset


def grid_dataset(n_classes, snrs, per_cell, length=2, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n_classes), len(snrs) * per_cell)
    snr_tags = np.tile(np.repeat(snrs, per_cell), n_classes)
    X = rng.standard_normal((len(labels), 2, length))
    return SignalDataset(X, labels, snr_tags, [f"c{i}" for i in range(n_classes)], list(snrs))


def cell_counts(ds):
    return {key: len(idx) for key, idx in ds.cells().items()}


@pytest.fixture(scope="module")
def rml_geometry():
    return grid_dataset(11, list(range(-20, 19, 2)), 1000)


# -- splitting ---------------------------------------------------------------------------


def test_rml_geometry_split(rml_geometry):
    train, val, test = training.split_dataset(rml_geometry, training.SplitSpec((6, 2, 2)))
    assert (len(train), len(val), len(test)) == (132000, 44000, 44000)
    assert set(cell_counts(train).values()) == {600}
    assert set(cell_counts(val).values()) == {200}
    assert set(cell_counts(test).values()) == {200}


def test_split_is_disjoint_exhaustive_and_reproducible():
    ds = grid_dataset(3, [0, 10], 17)
    ds.X[:, 0, 0] = np.arange(len(ds))  # tag every sample with its index
    parts = training.split_dataset(ds, training.SplitSpec((0.6, 0.2, 0.2), seed=4))
    tags = [set(p.X[:, 0, 0].astype(int)) for p in parts]
    assert not (tags[0] & tags[1]) and not (tags[0] & tags[2]) and not (tags[1] & tags[2])
    assert tags[0] | tags[1] | tags[2] == set(range(len(ds)))
    # floor for train and validation, remainder to test: 17 -> 10 / 3 / 4
    assert set(cell_counts(parts[0]).values()) == {10}
    assert set(cell_counts(parts[1]).values()) == {3}
    assert set(cell_counts(parts[2]).values()) == {4}
    again = training.split_dataset(ds, training.SplitSpec((0.6, 0.2, 0.2), seed=4))
    for a, b in zip(parts, again):
        np.testing.assert_array_equal(a.X, b.X)
    other = training.split_dataset(ds, training.SplitSpec((0.6, 0.2, 0.2), seed=5))
    assert not np.array_equal(other[0].X, parts[0].X)


def test_degenerate_all_train_split():
    ds = grid_dataset(2, [0], 5)
    train, val, test = training.split_dataset(ds, training.SplitSpec((1, 0, 0)))
    assert len(train) == len(ds) and len(val) == 0 and len(test) == 0


def test_tiny_cell_is_a_stratification_error():
    ds = grid_dataset(2, [0], 2)
    with pytest.raises(StratificationError):
        training.split_dataset(ds, training.SplitSpec((0.6, 0.2, 0.2)))


@pytest.mark.parametrize("ratios", [(0.5, 0.5), (-1, 1, 1), (0, 0, 0)])
def test_bad_ratios(ratios):
    with pytest.raises(ConfigError):
        training.SplitSpec(ratios).normalized()


# -- subsampling -------------------------------------------------------------------------


def test_small_sample_endpoints(rml_geometry):
    train = training.split_dataset(rml_geometry, training.SplitSpec((6, 2, 2)))[0]
    one = training.subsample_training(train, fraction=1 / 600, seed=1)
    assert len(one) == 11 * 20 and set(cell_counts(one).values()) == {1}
    eighty = training.subsample_training(train, fraction=80 / 600, seed=1)
    assert set(cell_counts(eighty).values()) == {80}
    assert training.subsample_training(train, fraction=1.0) == train


def test_subsample_is_seeded_and_per_cell_count_works():
    ds = grid_dataset(3, [0, 4], 30)
    a = training.subsample_training(ds, per_cell=7, seed=2)
    b = training.subsample_training(ds, per_cell=7, seed=2)
    c = training.subsample_training(ds, per_cell=7, seed=3)
    assert a == b and a != c
    assert set(cell_counts(a).values()) == {7}


def test_subsample_too_small_fraction():
    ds = grid_dataset(2, [0], 10)
    with pytest.raises(ConfigError):
        training.subsample_training(ds, fraction=0.01)
    with pytest.raises(ConfigError):
        training.subsample_training(ds, per_cell=11)


# -- schedule ----------------------------------------------------------------------------


def test_schedule_endpoints_and_midpoint():
    lr0, warm, total = 0.01, 10, 110
    assert training.lr_at(0, lr0, warm, total) == 0.0
    assert training.lr_at(warm, lr0, warm, total) == lr0
    assert training.lr_at(total, lr0, warm, total) == 0.0
    assert training.lr_at(60, lr0, warm, total) == pytest.approx(lr0 / 2, abs=1e-15)
    assert training.lr_at(5, lr0, warm, total) == pytest.approx(lr0 / 2, abs=1e-15)


def test_schedule_continuous_and_non_negative():
    lr0, warm, total = 1.0, 50, 1000
    values = [training.lr_at(s, lr0, warm, total) for s in range(total + 1)]
    assert min(values) >= 0.0
    assert max(abs(a - b) for a, b in zip(values, values[1:])) <= 1.0 / warm + 1e-12
    left, right = training.lr_at(warm - 1e-9, lr0, warm, total), training.lr_at(warm, lr0, warm, total)
    assert abs(left - right) < 1e-9


def test_warmup_default_is_five_percent():
    assert training.TrainConfig(epochs=10, batch_size=10).steps(1000) == (50, 1000)


# -- optimizers --------------------------------------------------------------------------


def test_sgd_step_matches_rule():
    params = {"p": np.zeros(1)}
    training.optimizer_step(params, {"p": np.ones(1)}, None, "sgd", 0.1, momentum=0.0)
    assert params["p"][0] == pytest.approx(-0.1, abs=1e-15)


@pytest.mark.parametrize("c", [1e-3, 0.5, 7.0])
def test_adam_first_step_is_lr(c):
    params = {"p": np.zeros(1)}
    training.optimizer_step(params, {"p": np.full(1, c)}, None, "adam", 0.01)
    # m_hat / sqrt(v_hat) = c / c
    assert params["p"][0] == pytest.approx(-0.01, rel=1e-5)


def test_adam_minimizes_square():
    opt = training.make_optimizer("adam")
    params = {"p": np.ones(1)}
    for step in range(500):
        if abs(params["p"][0]) < 0.01:
            break
        opt.step(params, {"p": 2 * params["p"]}, 0.05)
    assert abs(params["p"][0]) < 0.01


@pytest.mark.parametrize("kind", training.OPTIMIZERS)
def test_every_optimizer_decreases_norm_on_first_step(kind):
    rng = np.random.default_rng(0)
    for _ in range(5):
        p = rng.standard_normal(4)
        params = {"p": p.copy()}
        training.make_optimizer(kind).step(params, {"p": 2 * p}, 0.01)
        assert np.sum(params["p"] ** 2) < np.sum(p**2)


def test_decoupled_weight_decay_before_update():
    params = {"p": np.full(1, 2.0)}
    training.SGD(weight_decay=0.5).step(params, {"p": np.zeros(1)}, 0.1)
    assert params["p"][0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


def test_sgd_momentum_accumulates():
    opt = training.SGD(momentum=0.9)
    params = {"p": np.zeros(1)}
    opt.step(params, {"p": np.ones(1)}, 1.0)
    opt.step(params, {"p": np.ones(1)}, 1.0)
    assert params["p"][0] == pytest.approx(-(1 + 1.9))


def test_nan_gradient_names_parameter():
    with pytest.raises(TrainingDivergence, match="stem.w"):
        training.make_optimizer("adam").step({"stem.w": np.zeros(2)}, {"stem.w": np.array([0.0, np.nan])}, 0.1)


def test_unknown_optimizer():
    with pytest.raises(ConfigError):
        training.make_optimizer("rmsprop")


# -- training loop -----------------------------------------------------------------------


def test_best_epoch_rule():
    assert training.best_epoch([0.3, 0.5, 0.4]) == 2
    assert training.best_epoch([0.5, 0.2, 0.5]) == 1


def tiny_task(n=12, seed=0):
    rng = np.random.default_rng(seed)
    model = verify.tiny_model("signet")
    L = model.config.input_length
    X = rng.standard_normal((n, 2, L))
    y = np.arange(n) % model.config.num_classes
    X[:, 0] += y[:, None]  # learnable offset per class
    return model, (X, y)


def test_single_batch_epoch_takes_one_step(monkeypatch):
    calls = []
    original = training.Optimizer.step

    def counting(self, params, grads, lr):
        calls.append(lr)
        return original(self, params, grads, lr)

    monkeypatch.setattr(training.Optimizer, "step", counting)
    model, data = tiny_task(n=6)
    training.train(model, data, data, training.TrainConfig(epochs=1, batch_size=64))
    assert len(calls) == math.ceil(6 / 64) == 1


def test_training_is_reproducible_and_keeps_best_epoch():
    runs = []
    for _ in range(2):
        model, data = tiny_task()
        state, hist = training.train(model, data, data, training.TrainConfig(epochs=4, batch_size=4, seed=3))
        runs.append((state, hist, model))
    (s1, h1, m1), (s2, h2, _) = runs
    assert h1.val_acc == h2.val_acc and h1.train_loss == h2.train_loss
    for k in s1:
        np.testing.assert_array_equal(s1[k], s2[k])
    assert len(h1.val_acc) == len(h1.train_acc) == len(h1.seconds) == len(h1.lr) == 4
    assert h1.best_epoch == training.best_epoch(h1.val_acc)
    X, y = tiny_task()[1]
    assert training.accuracy_of(m1, X, y) == h1.best_val_acc


def test_checkpoint_round_trip_reproduces_validation_accuracy(tmp_path):
    model, data = tiny_task()
    _, hist = training.train(model, data, data, training.TrainConfig(epochs=3, batch_size=4))
    models.save_checkpoint(model, tmp_path / "best.sigc")
    loaded, _ = models.load_checkpoint(tmp_path / "best.sigc")
    assert training.accuracy_of(loaded, *data) == hist.best_val_acc


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_keeps_last_good_state():
    model, data = tiny_task()
    before = model.state_dict()
    with pytest.raises(TrainingDivergence) as info:
        training.train(model, data, data, training.TrainConfig(epochs=2, batch_size=4, initial_lr=1e300,
                                                              warmup_fraction=0.0, optimizer="sgd"))
    state = info.value.checkpoint
    assert state is not None
    for k, v in state.items():
        assert np.all(np.isfinite(v))
        np.testing.assert_array_equal(model.state_dict()[k], v)
    assert set(state) == set(before)


def test_empty_sets_rejected():
    model, (X, y) = tiny_task()
    with pytest.raises(ConfigError):
        training.train(model, (X[:0], y[:0]), (X, y), training.TrainConfig(epochs=1))


@pytest.mark.parametrize("field, value", [("epochs", 0), ("batch_size", 0), ("optimizer", "lbfgs"),
                                          ("warmup_fraction", 1.0), ("initial_lr", 0.0)])
def test_train_config_validation(field, value):
    with pytest.raises(ConfigError):
        training.TrainConfig(**{field: value}).validate()


def test_phase_rotation_hand_example_and_envelope():
    X = np.array([[[1.0, 0.0, 2.0], [0.0, 1.0, 0.0]]])
    # multiplying by j maps I + jQ to -Q + jI
    np.testing.assert_allclose(training.rotate_phase(X, np.array([np.pi / 2])), [[[0.0, -1.0, 0.0], [1.0, 0.0, 2.0]]],
                               atol=1e-15)
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((4, 2, 16))
    R = training.rotate_phase(Y, rng.uniform(-np.pi, np.pi, 4))
    np.testing.assert_allclose(R[:, 0] ** 2 + R[:, 1] ** 2, Y[:, 0] ** 2 + Y[:, 1] ** 2, rtol=1e-12)


def test_augmented_training_is_reproducible():
    hists = []
    for _ in range(2):
        model, data = tiny_task()
        _, hist = training.train(model, data, data, training.TrainConfig(epochs=2, batch_size=4, augment_phase=True))
        hists.append(hist.train_loss)
    assert hists[0] == hists[1]
