import math

import numpy as np
import pytest

from balnorm.autodiff import Node, backward
from balnorm.commands.gradcheck import network_check, network_inputs
from balnorm.errors import ConfigurationError, FormatError, NonFiniteError, ShapeMismatchError, ZeroInputSum
from balnorm.model import (
    LayerSpec,
    NormKind,
    build_network,
    build_tinynet,
    cross_entropy_loss,
    gradcheck_specs,
    load_checkpoint,
    save_checkpoint,
    validate_layers,
)
from balnorm.norms import Mode


def warm_up(net, rng, batch=8, side=8):
    x = rng.uniform(size=(batch, 3, side, side))
    net.forward(x, Mode.TRAIN)
    return x


class TestLayout:
    def test_tinynet_logits_shape(self, norm_flag, rng):
        net = build_tinynet(norm_flag, num_classes=5, seed=0)
        assert net.forward(rng.uniform(size=(4, 3, 8, 8)), Mode.TRAIN).shape == (4, 5)
        assert net.num_outputs == 5

    def test_layer_names(self):
        net = build_tinynet("balnorm", seed=0)
        assert net.layer_names[:3] == ["conv0", "relu1", "conv2"]
        assert net.balanced_layers() == ["conv0", "conv2", "conv4"]
        assert {"conv0.weight", "conv0.gain", "conv0.bias", "linear7.weight", "linear7.bias"} <= set(net.params)

    def test_norm_flags(self):
        assert NormKind.from_flag("balnorm") is NormKind.BALNORM_SINGLE
        assert NormKind.from_flag("balnorm-two-pass") is NormKind.BALNORM_TWO
        with pytest.raises(ValueError):
            NormKind.from_flag("layernorm")

    def test_balanced_conv_needs_relu(self):
        specs = [
            LayerSpec.conv(3, 4, norm=NormKind.BALNORM_SINGLE),
            LayerSpec.conv(4, 4, norm=NormKind.BALNORM_SINGLE),
        ]
        with pytest.raises(ConfigurationError):
            validate_layers(specs)

    def test_channel_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            validate_layers([LayerSpec.conv(3, 4), LayerSpec.relu(), LayerSpec.conv(5, 4)])

    def test_linear_needs_pooling(self):
        with pytest.raises(ConfigurationError):
            validate_layers([LayerSpec.conv(3, 4), LayerSpec.linear(4, 2)])


class TestForward:
    def test_identity_network_pools_input(self, rng):
        net = build_network([LayerSpec.conv(3, 3, kernel=1), LayerSpec.pool()], seed=0)
        net.params["conv0.weight"] = np.eye(3).reshape(3, 3, 1, 1)
        x = rng.uniform(size=(2, 3, 4, 4))
        np.testing.assert_allclose(net.forward(x).value, x.mean(axis=(2, 3)), rtol=1e-12)

    def test_balanced_layer_output_is_centred(self):
        net = build_network([LayerSpec.conv(2, 1, kernel=1, norm=NormKind.BALNORM_TWO)], seed=0)
        net.params["conv0.weight"] = np.array([3.0, -1.0]).reshape(1, 2, 1, 1)
        out = net.forward(np.array([2.0, 4.0]).reshape(1, 2, 1, 1)).value
        assert abs(out.item()) <= 1e-15
        np.testing.assert_allclose(net.states["conv0"].s, [3.0 / 16.0], rtol=1e-14)

    def test_dead_input_names_layer(self):
        net = build_tinynet("balnorm", seed=0)
        with pytest.raises(ZeroInputSum) as info:
            net.forward(np.zeros((2, 3, 8, 8)))
        assert info.value.layer == "conv0"

    def test_same_seed_same_network(self, rng):
        x = rng.uniform(size=(2, 3, 8, 8))
        a, b = build_tinynet("balnorm", seed=3), build_tinynet("balnorm", seed=3)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])
        np.testing.assert_array_equal(a.forward(x).value, b.forward(x).value)
        c = build_tinynet("balnorm", seed=4)
        assert not np.array_equal(a.params["conv0.weight"], c.params["conv0.weight"])

    @pytest.mark.parametrize("norm", ["balnorm", "balnorm-two-pass", "batchnorm"])
    def test_eval_ignores_batch_composition(self, norm, rng):
        net = build_tinynet(norm, num_classes=4, seed=1)
        warm_up(net, rng)
        x = rng.uniform(size=(6, 3, 8, 8))
        alone = net.forward(x[:1], Mode.EVAL).value
        together = net.forward(x, Mode.EVAL).value
        np.testing.assert_allclose(alone[0], together[0], rtol=1e-9, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = cross_entropy_loss(np.zeros((3, 10)), [0, 4, 9])
        assert loss.value == pytest.approx(math.log(10), rel=1e-15)

    def test_confident_prediction_beats_uniform(self):
        logits = np.array([[5.0, 0.0, 0.0, 0.0]])
        assert cross_entropy_loss(logits, [0]).value < math.log(4)

    def test_matches_extended_precision(self, rng):
        logits = rng.normal(scale=4.0, size=(5, 6))
        labels = rng.integers(0, 6, size=5)
        wide = logits.astype(np.longdouble)
        log_probs = wide - np.log(np.exp(wide).sum(axis=1, keepdims=True))
        expected = float(-log_probs[np.arange(5), labels].mean())
        assert cross_entropy_loss(logits, labels).value == pytest.approx(expected, rel=1e-12)

    def test_soft_labels(self):
        logits = np.log(np.array([[0.5, 0.25, 0.25]]))
        loss = cross_entropy_loss(logits, np.array([[0.5, 0.5, 0.0]]))
        assert loss.value == pytest.approx(-(0.5 * math.log(0.5) + 0.5 * math.log(0.25)), rel=1e-12)

    def test_gradient_is_softmax_minus_target(self, rng):
        logits = Node.leaf(rng.normal(size=(2, 3)))
        grad = backward(cross_entropy_loss(logits, [1, 2]), [logits])[logits]
        probs = np.exp(logits.value) / np.exp(logits.value).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(grad, (probs - np.eye(3)[[1, 2]]) / 2.0, rtol=1e-12, atol=1e-15)

    def test_soft_rows_must_sum_to_one(self):
        with pytest.raises(ConfigurationError):
            cross_entropy_loss(np.zeros((1, 2)), np.array([[0.5, 0.6]]))

    def test_non_finite_logits(self):
        with pytest.raises(NonFiniteError):
            cross_entropy_loss(np.array([[np.inf, 0.0]]), [0])


class TestGradients:
    @pytest.mark.parametrize("norm", ["balnorm", "balnorm-two-pass", "batchnorm", "none"])
    def test_small_network(self, norm):
        net = build_network(gradcheck_specs(norm, 3), seed=0)
        x, labels = network_inputs(0, 3, 6, 2, 3)
        report = network_check(net, x, labels)
        assert report.passed, report.worst

    def test_small_network_with_frozen_sums(self):
        net = build_network(gradcheck_specs("balnorm", 3), seed=0, stop_grad_v=True)
        x, labels = network_inputs(0, 3, 6, 2, 3)
        assert network_check(net, x, labels).passed


class TestCheckpoint:
    @pytest.mark.parametrize("norm", ["balnorm-two-pass", "batchnorm", "none"])
    def test_round_trip(self, norm, tmp_path, rng):
        net = build_tinynet(norm, num_classes=3, seed=2)
        warm_up(net, rng)
        path = save_checkpoint(net, tmp_path / "net.bnt1")
        assert (tmp_path / "net.bnt1.manifest").is_file()

        loaded = load_checkpoint(path)
        assert loaded.specs == net.specs
        x = rng.uniform(size=(3, 3, 8, 8))
        np.testing.assert_allclose(
            loaded.forward(x, Mode.EVAL).value, net.forward(x, Mode.EVAL).value, rtol=1e-4, atol=1e-5
        )

    def test_manifest_is_validated(self, tmp_path, rng):
        net = build_tinynet("balnorm", num_classes=3, seed=2)
        warm_up(net, rng)
        path = save_checkpoint(net, tmp_path / "net.bnt1")
        manifest = tmp_path / "net.bnt1.manifest"
        manifest.write_text(manifest.read_text().replace("format=balnorm-checkpoint", "format=other"))
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_manifest_lines_need_separator(self, tmp_path, rng):
        net = build_tinynet("none", num_classes=3, seed=2)
        path = save_checkpoint(net, tmp_path / "net.bnt1")
        manifest = tmp_path / "net.bnt1.manifest"
        manifest.write_text(manifest.read_text() + "garbage\n")
        with pytest.raises(FormatError):
            load_checkpoint(path)
