import io

import numpy as np
import pytest

from balnorm.autodiff import Node, backward, conv2d, grad_check
from balnorm.errors import ConfigurationError, InsufficientBatch
from balnorm.norms import BatchNormState, Mode, batchnorm_forward, identity_forward
from balnorm.norms.batchnorm import dump_batchnorm_state, load_batchnorm_state


def test_three_values_normalized():
    state = BatchNormState.create(1, eps=1e-12)
    out = batchnorm_forward(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3), state).value
    np.testing.assert_allclose(out.ravel(), [-1.224744871, 0.0, 1.224744871], rtol=1e-6, atol=1e-12)


def test_constant_channel_maps_to_zero():
    out = batchnorm_forward(np.full((2, 1, 2, 2), 4.0), BatchNormState.create(1)).value
    np.testing.assert_array_equal(out, np.zeros((2, 1, 2, 2)))


def test_train_moments(positive_batch):
    state = BatchNormState.create(3)
    out = batchnorm_forward(positive_batch, state).value
    var = positive_batch.var(axis=(0, 2, 3))
    assert np.abs(out.mean(axis=(0, 2, 3))).max() <= 1e-9
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), var / (var + state.eps), atol=1e-6)


def test_affine_can_undo_normalization(positive_batch):
    state = BatchNormState.create(3)
    mean = positive_batch.mean(axis=(0, 2, 3))
    var = positive_batch.var(axis=(0, 2, 3))
    out = batchnorm_forward(positive_batch, state, gamma=Node(np.sqrt(var + state.eps)), beta=Node(mean)).value
    np.testing.assert_allclose(out, positive_batch, rtol=1e-12, atol=1e-12)


def test_single_value_per_channel():
    with pytest.raises(InsufficientBatch):
        batchnorm_forward(np.ones((1, 2, 1, 1)), BatchNormState.create(2))


def test_eps_must_be_positive():
    with pytest.raises(ConfigurationError):
        BatchNormState.create(2, eps=0.0)


def test_running_statistics(positive_batch):
    state = BatchNormState.create(3, momentum=0.1)
    batchnorm_forward(positive_batch, state)
    np.testing.assert_allclose(state.running_mean, 0.1 * positive_batch.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * positive_batch.var(axis=(0, 2, 3), ddof=1), rtol=1e-12)


def test_frozen_statistics(positive_batch):
    state = BatchNormState.create(3)
    batchnorm_forward(positive_batch, state, update_stats=False)
    np.testing.assert_array_equal(state.running_mean, np.zeros(3))


def test_eval_uses_running_statistics(positive_batch):
    state = BatchNormState.create(3)
    state.running_mean = np.array([0.5, 0.25, 0.0])
    state.running_var = np.array([4.0, 1.0, 0.25])
    out = batchnorm_forward(positive_batch, state, Mode.EVAL).value
    expected = (positive_batch - state.running_mean[None, :, None, None]) / np.sqrt(
        state.running_var[None, :, None, None] + state.eps
    )
    np.testing.assert_allclose(out, expected, rtol=1e-12)
    alone = batchnorm_forward(positive_batch[2:3], state, Mode.EVAL).value
    np.testing.assert_array_equal(alone[0], out[2])


def test_gradient_matches_finite_differences(rng):
    projection = rng.normal(size=(3, 2, 3, 3))

    def objective(p):
        state = BatchNormState.create(2)
        return (batchnorm_forward(p["x"], state, gamma=p["gamma"], beta=p["beta"]) * projection).sum()

    params = {"x": rng.normal(size=(3, 2, 3, 3)), "gamma": rng.uniform(0.5, 2.0, size=2), "beta": rng.normal(size=2)}
    report = grad_check(objective, params)
    assert report.passed, report.worst


def test_state_dump_and_load():
    state = BatchNormState(
        np.array([0.5, 1.5]), np.array([2.0, 0.25]), np.array([1.0, -1.0]), np.array([0.0, 0.125])
    )
    stream = io.BytesIO()
    dump_batchnorm_state(stream, state)
    stream.seek(0)
    loaded = load_batchnorm_state(stream)
    for name in ("running_mean", "running_var", "gamma", "beta"):
        np.testing.assert_array_equal(getattr(loaded, name), getattr(state, name))


def test_identity_passes_through(rng):
    x = Node.leaf(rng.normal(size=(2, 3, 4, 4)))
    out = identity_forward(conv2d(x, rng.normal(size=(2, 3, 3, 3))))
    np.testing.assert_array_equal(identity_forward(x).value, x.value)
    assert backward(out.sum(), [x])[x].shape == x.shape
    np.testing.assert_array_equal(backward(identity_forward(x).sum(), [x])[x], np.ones(x.shape))
