import numpy as np
import pytest

from bodyimage.approximator import (
    FeedforwardNet,
    Minibatch,
    TrainConfig,
    fit,
    forward,
    load,
    save,
    train_minibatch,
)
from bodyimage.errors import DimensionError, FormatError, TrainingDivergedError, VersionError


@pytest.fixture
def net():
    return FeedforwardNet(3, 5, 2, seed=0)


def test_forward_single_and_batch(net, rng):
    x = rng.normal(size=(4, 3))
    batch = forward(net, x)
    assert batch.shape == (4, 2)
    np.testing.assert_allclose(forward(net, x[1]), batch[1])


def test_forward_rejects_wrong_size(net):
    with pytest.raises(DimensionError):
        net.forward(np.zeros(4))
    with pytest.raises(DimensionError):
        net.forward(np.array([0.0, np.inf, 0.0]))


def test_zero_net_outputs_zero(rng):
    net = FeedforwardNet.zeros(3, 5, 2)
    np.testing.assert_array_equal(net.forward(rng.normal(size=(6, 3))), 0.0)


@pytest.mark.parametrize("scaled", [False, True])
def test_gradients_match_finite_differences(net, rng, scaled):
    if scaled:
        net.fit_scaling(rng.uniform([-2.0, 0.0, 10.0], [1.0, 0.5, 30.0], size=(20, 3)))
    inputs = rng.normal(size=(7, 3))
    targets = rng.normal(size=(7, 2))
    _, grads = net.gradients(inputs, targets)
    h = 1e-6
    for name, param in net.parameters().items():
        numeric = np.zeros_like(param)
        for index in np.ndindex(param.shape):
            original = param[index]
            param[index] = original + h
            plus = net.loss(inputs, targets)
            param[index] = original - h
            minus = net.loss(inputs, targets)
            param[index] = original
            numeric[index] = (plus - minus) / (2 * h)
        error = np.linalg.norm(grads[name] - numeric) / max(np.linalg.norm(numeric), 1e-12)
        assert error < 1e-5, name


def test_train_minibatch_reduces_loss(net, rng):
    inputs = rng.normal(size=(16, 3))
    targets = np.column_stack([np.sin(inputs[:, 0]), inputs[:, 1] * 0.5])
    before = net.loss(inputs, targets)
    after = train_minibatch(net, list(zip(inputs, targets)), TrainConfig(learning_rate=0.05, epochs=50))
    assert after < before


def test_train_minibatch_with_momentum_and_adam(rng):
    inputs = rng.normal(size=(16, 3))
    targets = inputs[:, :2] ** 2
    for optimizer in ("momentum", "adam"):
        net = FeedforwardNet(3, 8, 2, seed=1)
        before = net.loss(inputs, targets)
        after = train_minibatch(net, Minibatch(inputs, targets),
                                TrainConfig(optimizer=optimizer, learning_rate=0.01, epochs=40))
        assert after < before


def test_divergence_rolls_back_parameters(net):
    snapshot = {k: v.copy() for k, v in net.parameters().items()}
    batch = Minibatch(np.ones((2, 3)), np.full((2, 2), 1e200))
    with pytest.raises(TrainingDivergedError):
        train_minibatch(net, batch, TrainConfig(learning_rate=1.0, epochs=3))
    for name, value in net.parameters().items():
        np.testing.assert_array_equal(value, snapshot[name])


def test_empty_minibatch_is_rejected(net):
    with pytest.raises(DimensionError):
        train_minibatch(net, [], TrainConfig())


def test_fit_learns_a_smooth_function(rng):
    inputs = rng.uniform(-1, 1, size=(256, 2))
    targets = np.column_stack([np.sin(2 * inputs[:, 0]) + inputs[:, 1]])
    net = FeedforwardNet(2, 16, 1, seed=3)
    cfg = TrainConfig(optimizer="adam", learning_rate=0.02, batch_size=32, max_epochs=150, patience=30)
    report = fit(net, inputs, targets, cfg)
    assert report.epochs == len(report.history)
    assert report.stopped in ("plateau", "epoch cap")
    assert report.final_loss < 0.1 * report.history[0]


def test_fit_is_deterministic(rng):
    inputs = rng.uniform(-1, 1, size=(64, 2))
    targets = inputs[:, :1] * 3.0
    cfg = TrainConfig(optimizer="adam", batch_size=16, max_epochs=10, seed=5)
    first, second = FeedforwardNet(2, 4, 1, seed=0), FeedforwardNet(2, 4, 1, seed=0)
    fit(first, inputs, targets, cfg)
    fit(second, inputs, targets, cfg)
    assert save(first) == save(second)


def test_serialization_is_bit_exact(net):
    data = save(net)
    restored = load(data)
    assert restored.sizes == net.sizes
    assert save(restored) == data


def test_load_rejects_corrupt_streams(net):
    data = save(net)
    with pytest.raises(FormatError):
        load(b"XXXXXX" + data[6:])
    with pytest.raises(FormatError):
        load(data[:-8])
    with pytest.raises(FormatError):
        load(data + b"\x00")
    with pytest.raises(VersionError):
        load(data[:6] + (3).to_bytes(2, "little") + data[8:])


def test_train_config_rejects_unknown_fields():
    with pytest.raises(ValueError):
        TrainConfig(learning_rat=0.1)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


def test_fit_scaling_maps_inputs_to_unit_box(rng):
    inputs = rng.uniform([-1.5, 0.0], [0.5, 2.0], size=(200, 2))
    inputs[:, 1] = 4.0
    net = FeedforwardNet(2, 6, 1, seed=2)
    net.fit_scaling(inputs)
    scaled = (inputs - net.x_offset) / net.x_scale
    np.testing.assert_allclose([scaled[:, 0].min(), scaled[:, 0].max()], [-1.0, 1.0])
    np.testing.assert_array_equal(scaled[:, 1], 0.0)
    assert net.x_scale[1] == 1.0


def test_scaling_survives_copy_and_serialization(net, rng):
    net.fit_scaling(rng.uniform(-3.0, 3.0, size=(30, 3)))
    x = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(net.copy().forward(x), net.forward(x))
    restored = load(save(net))
    np.testing.assert_array_equal(restored.forward(x), net.forward(x))
    np.testing.assert_array_equal(restored.x_scale, net.x_scale)


def test_load_rejects_non_positive_input_scale(net):
    data = bytearray(save(net))
    # x_scale follows the header and x_offset
    start = 20 + 8 * 3
    data[start:start + 8] = np.array([-1.0], dtype="<f8").tobytes()
    with pytest.raises(FormatError):
        load(bytes(data))
