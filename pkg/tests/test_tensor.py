import numpy as np
import pytest

from gazeclass.errors import LabelError, NonFiniteError, ShapeMismatchError, TraceMismatchError
from gazeclass.tensor import (
    LayerSpec,
    Network,
    SGDHyper,
    backward,
    conv_forward,
    dropout_mask,
    forward,
    grad_check,
    inv_learning_rate,
    logits_of,
    loss_softmax_xent,
    maxpool_backward,
    maxpool_forward,
    sgd_step,
)
from gazeclass.verify import gradient_nets


def direct_conv(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    k = w.shape[2]
    oh = (xp.shape[2] - k) // stride + 1
    ow = (xp.shape[3] - k) // stride + 1
    out = np.zeros((x.shape[0], w.shape[0], oh, ow))
    for n in range(x.shape[0]):
        for o in range(w.shape[0]):
            for r in range(oh):
                for c in range(ow):
                    patch = xp[n, :, r * stride : r * stride + k, c * stride : c * stride + k]
                    out[n, o, r, c] = np.sum(patch * w[o]) + b[o]
    return out


class TestLayerSpec:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            LayerSpec("pool3d")

    def test_maxpool_stride_defaults_to_kernel(self):
        assert LayerSpec.maxpool2d(3).stride == 3

    def test_dropout_rate_range(self):
        with pytest.raises(ValueError):
            LayerSpec.dropout(1.0)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeMismatchError):
            Network.build([LayerSpec.conv2d(2, 5)], (1, 3, 3))


class TestConvAndPool:
    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_conv_matches_direct_loops(self, rng, stride, pad):
        x = rng.normal(size=(2, 3, 7, 6))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        np.testing.assert_allclose(
            conv_forward(x, w, b, stride, pad), direct_conv(x, w, b, stride, pad), atol=1e-12
        )

    def test_maxpool_matches_sliding_window(self, rng):
        x = rng.normal(size=(1, 2, 6, 6))
        out, _ = maxpool_forward(x, 2, 2)
        expected = x.reshape(1, 2, 3, 2, 3, 2).max(axis=(3, 5))
        np.testing.assert_array_equal(out, expected)

    def test_maxpool_ties_go_to_first_position(self):
        x = np.ones((1, 1, 2, 2))
        _, argmax = maxpool_forward(x, 2, 2)
        assert argmax[0, 0, 0, 0] == 0


    @pytest.mark.parametrize("kernel,stride", [(2, 2), (3, 3)])
    def test_maxpool_backward_routes_to_argmax(self, rng, kernel, stride):
        x = rng.normal(size=(2, 3, 6, 6))
        out, argmax = maxpool_forward(x, kernel, stride)
        grad = rng.normal(size=out.shape)
        d_x = maxpool_backward(x.shape, argmax, kernel, stride, grad)
        winners = x == np.repeat(np.repeat(out, kernel, axis=2), kernel, axis=3)
        spread = np.repeat(np.repeat(grad, kernel, axis=2), kernel, axis=3)
        np.testing.assert_array_equal(d_x, np.where(winners, spread, 0.0))
        assert d_x.sum() == pytest.approx(grad.sum(), rel=1e-12)

    def test_maxpool_backward_conserves_mass_with_overlap(self, rng):
        x = rng.normal(size=(1, 2, 7, 7))
        out, argmax = maxpool_forward(x, 3, 2)
        grad = rng.random(out.shape)
        d_x = maxpool_backward(x.shape, argmax, 3, 2, grad)
        assert d_x.sum() == pytest.approx(grad.sum(), rel=1e-12)
        assert np.count_nonzero(d_x) <= grad.size


class TestForward:
    def test_unbatched_input_is_promoted(self, rng):
        net = Network.build([LayerSpec.fc(3)], (4,), seed=0)
        trace = forward(net, rng.normal(size=4))
        assert trace.output.shape == (1, 3)

    def test_wrong_shape(self):
        net = Network.build([LayerSpec.fc(3)], (4,), seed=0)
        with pytest.raises(ShapeMismatchError):
            forward(net, np.zeros((2, 5)))

    def test_train_dropout_needs_seed(self):
        net = Network.build([LayerSpec.dropout(0.5)], (4,), seed=0)
        with pytest.raises(ValueError):
            forward(net, np.ones((1, 4)), "train")

    def test_dropout_is_identity_in_eval(self, rng):
        net = Network.build([LayerSpec.dropout(0.5)], (8,), seed=0)
        x = rng.normal(size=(2, 8))
        np.testing.assert_array_equal(forward(net, x).output, x)

    def test_dropout_mask_is_seeded(self):
        a = dropout_mask((4, 100), 0.5, (3, 17), 5, np.float64)
        b = dropout_mask((4, 100), 0.5, (3, 17), 5, np.float64)
        c = dropout_mask((4, 100), 0.5, (3, 18), 5, np.float64)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        assert set(np.unique(a)) <= {0.0, 2.0}

    def test_dropout_train_mean_matches_eval(self):
        net = Network.build([LayerSpec.dropout(0.5)], (20,), seed=0)
        x = np.full((1, 20), 3.0)
        total = sum(forward(net, x, "train", rng_seed=(0, s)).output for s in range(10_000))
        mean = total / 10_000
        assert abs(mean.mean() / forward(net, x).output.mean() - 1.0) < 0.02

    def test_eval_forward_is_bit_identical(self, rng):
        layers = [
            LayerSpec.conv2d(4, 3, pad=1),
            LayerSpec.relu(),
            LayerSpec.maxpool2d(2),
            LayerSpec.flatten(),
            LayerSpec.fc(5),
            LayerSpec.dropout(0.5),
            LayerSpec.fc(2),
            LayerSpec.softmax(),
        ]
        x = rng.normal(size=(3, 2, 8, 8))
        first = forward(Network.build(layers, (2, 8, 8), seed=4), x)
        second = forward(Network.build(layers, (2, 8, 8), seed=4), x)
        for a, b in zip(first.activations, second.activations):
            np.testing.assert_array_equal(a, b)

    def test_non_finite_input(self):
        net = Network.build([LayerSpec.fc(3)], (2,), seed=0)
        with pytest.raises(NonFiniteError):
            forward(net, np.array([[np.nan, 1.0]]))

    def test_softmax_output_sums_to_one(self, rng):
        net = Network.build([LayerSpec.fc(3), LayerSpec.softmax()], (4,), seed=0)
        trace = forward(net, rng.normal(size=(5, 4)))
        np.testing.assert_allclose(trace.output.sum(axis=1), 1.0)
        assert logits_of(net, trace).shape == (5, 3)


class TestLoss:
    def test_matches_log_softmax(self):
        logits = np.array([0.5, -1.0, 2.0])
        loss, grad = loss_softmax_xent(logits, 2)
        p = np.exp(logits) / np.exp(logits).sum()
        assert loss == pytest.approx(-np.log(p[2]), rel=1e-12)
        np.testing.assert_allclose(grad, p - np.array([0, 0, 1]))

    def test_extreme_logits_stay_finite(self):
        loss, grad = loss_softmax_xent(np.array([1000.0, -1000.0]), 1)
        assert loss == pytest.approx(2000.0)
        assert np.all(np.isfinite(grad))

    def test_tiny_loss_keeps_precision(self):
        loss, _ = loss_softmax_xent(np.array([40.0, 0.0]), 0)
        assert loss == pytest.approx(np.exp(-40.0), rel=1e-9)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            loss_softmax_xent(np.zeros(2), 2)


class TestBackward:
    @pytest.mark.parametrize("name", sorted(gradient_nets()))
    def test_matches_finite_differences(self, rng, name):
        net = gradient_nets()[name]
        x = rng.normal(size=(2, *net.input_shape))
        report = grad_check(net, x, [0, 1])
        assert report.passed, report.max_rel_error

    def test_frozen_network_collects_nothing(self, rng):
        net = Network.build([LayerSpec.fc(2)], (3,), seed=0, frozen=True)
        trace = forward(net, rng.normal(size=(1, 3)))
        grads = backward(net, trace, np.ones((1, 2)))
        assert grads.params == {}

    def test_input_gradient_of_linear_layer(self, rng):
        net = Network.build([LayerSpec.fc(2)], (3,), seed=0)
        trace = forward(net, rng.normal(size=(1, 3)))
        grads = backward(net, trace, np.array([[1.0, 0.0]]), need_input_grad=True)
        np.testing.assert_allclose(grads.input[0], net.params[0]["weight"][0])

    def test_trace_from_other_network(self, rng):
        a = Network.build([LayerSpec.fc(2)], (3,), seed=0)
        b = Network.build([LayerSpec.fc(2), LayerSpec.relu()], (3,), seed=0)
        trace = forward(a, rng.normal(size=(1, 3)))
        with pytest.raises(TraceMismatchError):
            backward(b, trace, np.ones((1, 2)))


class TestSGD:
    def test_inv_policy(self):
        hyper = SGDHyper(base_lr=0.1, gamma=0.5, power=2.0)
        assert inv_learning_rate(0, hyper) == pytest.approx(0.1)
        assert inv_learning_rate(2, hyper) == pytest.approx(0.1 / 4)

    def test_negative_iteration(self):
        with pytest.raises(ValueError):
            inv_learning_rate(-1, SGDHyper())

    def test_zero_learning_rate_changes_nothing(self, rng):
        hyper = SGDHyper(base_lr=0.0)
        params = {(0, "weight"): rng.normal(size=(3, 2)), (0, "bias"): np.zeros(3)}
        current, velocity = params, None
        for it in range(5):
            grads = {key: rng.normal(size=p.shape) for key, p in params.items()}
            current, velocity = sgd_step(current, grads, it, hyper, velocity)
        for key, p in params.items():
            np.testing.assert_array_equal(current[key], p)

    def test_momentum_update(self):
        hyper = SGDHyper(base_lr=0.1, gamma=0.0, power=0.0, momentum=0.9)
        params = {(0, "weight"): np.array([1.0])}
        grads = {(0, "weight"): np.array([2.0])}
        p1, v1 = sgd_step(params, grads, 0, hyper)
        p2, _ = sgd_step(p1, grads, 1, hyper, v1)
        assert p1[(0, "weight")][0] == pytest.approx(0.8)
        assert p2[(0, "weight")][0] == pytest.approx(0.8 - 0.9 * 0.2 - 0.2)
        assert params[(0, "weight")][0] == 1.0


class TestNetwork:
    def test_checksum_tracks_parameters(self):
        net = Network.build([LayerSpec.fc(2)], (3,), seed=0)
        same = Network.build([LayerSpec.fc(2)], (3,), seed=0)
        other = Network.build([LayerSpec.fc(2)], (3,), seed=1)
        assert net.checksum() == same.checksum() != other.checksum()

    def test_astype(self):
        net = Network.build([LayerSpec.fc(2)], (3,), seed=0).astype(np.float32)
        assert net.params[0]["weight"].dtype == np.float32
        assert forward(net, np.ones((1, 3))).output.dtype == np.float32

    def test_param_count(self):
        net = Network.build([LayerSpec.conv2d(4, 3), LayerSpec.flatten(), LayerSpec.fc(2)], (2, 5, 5))
        assert net.param_count == 4 * 2 * 9 + 4 + 2 * 36 + 2
