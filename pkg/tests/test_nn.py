import json
import os

import numpy as np
import pytest

from twnkit import quantizer
from twnkit.errors import AllZeroWeights, NonFiniteLoss, ShapeMismatch
from twnkit.kernels import reference_conv2d, reference_matmul
from twnkit.nn import (
    BatchNorm,
    Conv2d,
    FullyConnected,
    HingeLoss,
    LayerSpec,
    MaxPool2d,
    Network,
    ReLU,
    build_network,
    network_from_records,
    quantize_layer,
)
from twnkit.tensor import Rng

from conftest import DATA_DIR, finite_difference_check


def mlp_specs(mode="full", loss="hinge_loss", hidden=8, classes=4, features=10, bn=True):
    specs = [
        LayerSpec("input", {"shape": (features,)}),
        LayerSpec("fully_connected", {"out": hidden, "mode": mode}),
    ]
    if bn:
        specs.append(LayerSpec("batch_norm", {}))
    specs += [
        LayerSpec("relu", {}),
        LayerSpec("fully_connected", {"out": classes, "mode": mode}),
        LayerSpec(loss, {"squared": 1} if loss == "hinge_loss" else {}),
    ]
    return specs


def conv_specs(mode="full"):
    return [
        LayerSpec("input", {"shape": (2, 8, 8)}),
        LayerSpec("conv2d", {"out": 3, "kh": 3, "kw": 3, "stride": 1, "pad": 1, "mode": mode}),
        LayerSpec("batch_norm", {}),
        LayerSpec("relu", {}),
        LayerSpec("max_pool2d", {"k": 2}),
        LayerSpec("fully_connected", {"out": 5, "mode": mode}),
        LayerSpec("hinge_loss", {"squared": 1}),
    ]


def batch(rng_seed, shape, classes):
    rng = Rng(rng_seed)
    n = int(np.prod(shape))
    X = rng.normal(6 * n).reshape((6,) + tuple(shape))
    y = (rng.next_u64(6) % classes).astype(np.int64)
    return X, y


class TestForward:
    def test_identity_fc(self):
        net = build_network(
            [
                LayerSpec("input", {"shape": (3,)}),
                LayerSpec("fully_connected", {"out": 3, "mode": "full"}),
                LayerSpec("hinge_loss", {}),
            ]
        )
        net.layers[0].W = np.eye(3, dtype=np.float32)
        X = Rng(1).normal(9).reshape(3, 3)
        res = net.forward(X)
        assert (res.scores == X).all()

    def test_full_mode_equals_reference_kernels_bitwise(self):
        net = build_network(conv_specs("full"), Rng(11))
        X, y = batch(12, (2, 8, 8), 5)
        res = net.forward(X, y, mode="train")
        # replay the exact same computation with the reference kernels
        conv, bn, relu, pool, fc = net.layers
        z = reference_conv2d(X, conv.W, conv.bias, stride=1, pad=1).nd()
        z = bn.forward(z, "probe")
        z = np.maximum(z, 0)
        z = pool.forward(z, "eval")
        want = reference_matmul(z.reshape(6, -1), fc.W, fc.bias).nd()
        assert (res.scores == want).all()

    def test_golden_toy_loss(self):
        golden = json.load(open(os.path.join(DATA_DIR, "golden_toyloss.json")))
        specs = [
            LayerSpec("input", {"shape": (5,)}),
            LayerSpec("fully_connected", {"out": 8, "mode": "full"}),
            LayerSpec("relu", {}),
            LayerSpec("fully_connected", {"out": 3, "mode": "full"}),
            LayerSpec("hinge_loss", {"squared": 1}),
        ]
        net = build_network(specs, Rng(42))
        X = Rng(43).normal(6 * 5).reshape(6, 5)
        y = (Rng(44).next_u64(6) % 3).astype(np.int64)
        assert net.forward(X, y).loss == golden["loss"]

    def test_shape_mismatch(self):
        net = build_network(mlp_specs(), Rng(1))
        with pytest.raises(ShapeMismatch):
            net.forward(np.zeros((2, 11), np.float32))

    def test_non_finite_loss_raises(self):
        net = build_network(mlp_specs(bn=False), Rng(1))
        net.layers[0].W[:] = np.float32(1e30)
        net.layers[-1].W[:] = np.float32(1e30)  # scores overflow float32
        X, y = batch(2, (10,), 4)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteLoss):
                net.forward(X, y)


class TestGradients:
    """Criterion-style finite-difference checks, layer kinds in isolation."""

    def test_fully_connected(self):
        net = build_network(mlp_specs(bn=False), Rng(3))
        X, y = batch(4, (10,), 4)
        finite_difference_check(net, X, y, params=["fully_connected1.W", "fully_connected1.bias"])

    def test_conv2d(self):
        specs = [
            LayerSpec("input", {"shape": (2, 6, 6)}),
            LayerSpec("conv2d", {"out": 3, "kh": 3, "kw": 3, "stride": 1, "pad": 1, "mode": "full"}),
            LayerSpec("fully_connected", {"out": 4, "mode": "full"}),
            LayerSpec("hinge_loss", {"squared": 1}),
        ]
        net = build_network(specs, Rng(5))
        X, y = batch(6, (2, 6, 6), 4)
        finite_difference_check(net, X, y, params=["conv2d1.W", "conv2d1.bias"])

    def test_batch_norm_2d(self):
        net = build_network(conv_specs("full"), Rng(7))
        X, y = batch(8, (2, 8, 8), 5)
        finite_difference_check(net, X, y, params=["batch_norm1.gamma", "batch_norm1.beta"])

    def test_batch_norm_1d(self):
        net = build_network(mlp_specs(), Rng(9))
        X, y = batch(10, (10,), 4)
        finite_difference_check(net, X, y, params=["batch_norm1.gamma", "batch_norm1.beta"])

    def test_through_relu_and_pool(self):
        net = build_network(conv_specs("full"), Rng(13))
        X, y = batch(14, (2, 8, 8), 5)
        finite_difference_check(net, X, y, params=["conv2d1.W", "fully_connected1.W"])

    def test_softmax_cross_entropy(self):
        net = build_network(mlp_specs(loss="softmax_cross_entropy"), Rng(15))
        X, y = batch(16, (10,), 4)
        finite_difference_check(net, X, y)

    def test_plain_hinge(self):
        specs = mlp_specs(bn=False)
        specs[-1] = LayerSpec("hinge_loss", {"squared": 0})
        net = build_network(specs, Rng(17))
        X, y = batch(18, (10,), 4)
        finite_difference_check(net, X, y)

    def test_ternary_input_gradient(self):
        # quantization is constant w.r.t. X: dX must match finite differences
        net = build_network(mlp_specs("ternary"), Rng(19))
        X, y = batch(20, (10,), 4)
        dX = net.input_gradient(X, y)
        npr = np.random.default_rng(0)
        checked = 0
        for _ in range(25):
            i = tuple(npr.integers(0, s) for s in X.shape)
            orig = X[i]
            X[i] = orig + 1e-3
            lp = net.forward(X, y, mode="probe").loss
            X[i] = orig - 1e-3
            lm = net.forward(X, y, mode="probe").loss
            X[i] = orig
            fd = (lp - lm) / 2e-3
            if max(abs(fd), abs(dX[i])) < 5e-3:
                continue
            checked += 1
            assert abs(fd - dX[i]) / max(abs(fd), abs(dX[i])) < 2e-2
        assert checked >= 5

    def test_degenerate_zero_batch_hinge_finite(self):
        # zero inputs + zero weights: gradients must stay finite
        net = build_network(mlp_specs(bn=False), Rng(21))
        for _, value, _ in net.parameters():
            value[:] = 0
        X = np.zeros((4, 10), np.float32)
        y = np.zeros(4, np.int64)
        net.forward(X, y, mode="train")
        net.backward()
        for name, _, grad in net.parameters():
            assert np.isfinite(grad).all(), name


class TestQuantizeLayer:
    def test_conv_per_output_channel(self):
        layer = Conv2d(2, 3, 3, 3, weight_mode="ternary")
        layer.name = "conv"
        layer.initialize(Rng(1))
        quantize_layer(layer)
        assert layer.alphas.shape == (3,)
        assert len(set(layer.alphas.tolist())) == 3  # independent scales
        for g in range(3):
            sol = quantizer.ternarize_heuristic(layer.W[g].ravel())
            assert (layer.codes[g] == sol.codes).all()
            assert layer.alphas[g] == pytest.approx(sol.alpha, rel=1e-6)

    def test_fc_per_layer(self):
        layer = FullyConnected(20, 5, weight_mode="ternary")
        layer.name = "fc"
        layer.initialize(Rng(2))
        quantize_layer(layer)
        assert layer.alphas.shape == (1,)
        sol = quantizer.ternarize_heuristic(layer.W.ravel())
        assert (layer.codes.ravel() == sol.codes).all()

    def test_scale_equivariance_end_to_end(self):
        layer = Conv2d(2, 3, 3, 3, weight_mode="ternary")
        layer.name = "conv"
        layer.initialize(Rng(3))
        quantize_layer(layer)
        codes0, alphas0 = layer.codes.copy(), layer.alphas.copy()
        layer.W *= np.float32(2.0)
        quantize_layer(layer)
        assert (layer.codes == codes0).all()
        assert layer.alphas == pytest.approx(2.0 * alphas0, rel=1e-5)

    def test_full_mode_no_cache(self):
        layer = FullyConnected(4, 2, weight_mode="full")
        layer.name = "fc"
        layer.initialize(Rng(4))
        quantize_layer(layer)
        assert layer.W_used is layer.W
        assert layer.alphas is None

    def test_binary_mode_same_grouping(self):
        layer = Conv2d(2, 3, 3, 3, weight_mode="binary")
        layer.name = "conv"
        layer.initialize(Rng(5))
        quantize_layer(layer)
        assert layer.alphas.shape == (3,)
        assert set(np.unique(layer.codes)) <= {-1, 1}

    def test_all_zero_channel_identified(self):
        layer = Conv2d(1, 2, 2, 2, weight_mode="ternary")
        layer.name = "conv9"
        layer.initialize(Rng(6))
        layer.W[1] = 0
        with pytest.raises(AllZeroWeights, match="conv9"):
            quantize_layer(layer)


class TestHinge:
    def test_margin_satisfied_zero_loss(self):
        hl = HingeLoss()
        scores = np.array([[5.0, 0.0, 0.0]], np.float32)
        loss = hl.loss(scores, np.array([0]), "train")
        assert loss == 0.0
        assert not hl.backward_scores().any()

    def test_two_class_hand_value(self):
        hl = HingeLoss()
        assert hl.loss(np.zeros((1, 2), np.float32), np.array([0]), "eval") == pytest.approx(1.0)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            HingeLoss().loss(np.zeros((1, 2), np.float32), np.array([2]), "eval")


class TestBatchNorm:
    def test_constant_channel_outputs_beta(self):
        bn = BatchNorm(2)
        bn.name = "bn"
        bn.beta = np.array([0.3, -0.3], np.float32)
        X = np.ones((4, 2, 3, 3), np.float32) * 7.0
        out = bn.forward(X, "train")
        assert np.allclose(out[:, 0], 0.3, atol=1e-4)
        assert np.allclose(out[:, 1], -0.3, atol=1e-4)

    def test_eval_deterministic_and_pure(self):
        bn = BatchNorm(3)
        bn.name = "bn"
        X = Rng(1).normal(5 * 3).reshape(5, 3)
        bn.forward(X, "train")  # build running stats
        rm, rv = bn.running_mean.copy(), bn.running_var.copy()
        a = bn.forward(X, "eval")
        b = bn.forward(X, "eval")
        assert (a == b).all()
        assert (bn.running_mean == rm).all() and (bn.running_var == rv).all()

    def test_train_updates_running_stats(self):
        bn = BatchNorm(2)
        bn.name = "bn"
        X = Rng(2).normal(8 * 2).reshape(8, 2) + np.float32(3.0)
        bn.forward(X, "train")
        assert not np.allclose(bn.running_mean, 0)

    def test_batch_of_one_rejected(self):
        bn = BatchNorm(2)
        bn.name = "bn"
        with pytest.raises(ValueError):
            bn.forward(np.zeros((1, 2), np.float32), "train")

    def test_running_var_positive(self):
        bn = BatchNorm(2)
        bn.name = "bn"
        for seed in range(5):
            bn.forward(Rng(seed).normal(6 * 2).reshape(6, 2), "train")
            assert (bn.running_var > 0).all()


class TestMaxPool:
    def test_tie_goes_to_first_in_scan_order(self):
        pool = MaxPool2d(2)
        pool.name = "pool"
        X = np.ones((1, 1, 2, 2), np.float32)  # all tied
        out = pool.forward(X, "train")
        assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 1.0
        dX = pool.backward(np.ones((1, 1, 1, 1), np.float32))
        assert dX[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]

    def test_gradient_routed_to_argmax(self):
        pool = MaxPool2d(2)
        pool.name = "pool"
        X = np.array([[[[1, 2], [3, 4.0]]]], np.float32)
        pool.forward(X, "train")
        dX = pool.backward(np.array([[[[10.0]]]], np.float32))
        assert dX[0, 0].tolist() == [[0, 0], [0, 10.0]]

    def test_indivisible_rejected(self):
        pool = MaxPool2d(2)
        pool.name = "pool"
        with pytest.raises(ShapeMismatch):
            pool.forward(np.zeros((1, 1, 3, 3), np.float32), "eval")


class TestSTE:
    def test_step_changes_masters_not_codes_directly(self):
        net = build_network(mlp_specs("ternary"), Rng(30))
        X, y = batch(31, (10,), 4)
        net.forward(X, y, mode="train")
        codes_before = net.layers[0].codes.copy()
        net.backward()
        W_before = net.layers[0].W.copy()
        for name, value, grad in net.parameters():
            value -= np.float32(0.01) * grad
        net.mark_updated()
        assert not (net.layers[0].W == W_before).all()
        assert (net.layers[0].codes == codes_before).all()  # stale until next forward
        net.forward(X, y, mode="train")
        net._phase = "ready"

    def test_train_forward_requantizes(self):
        net = build_network(mlp_specs("ternary"), Rng(32))
        X, y = batch(33, (10,), 4)
        net.forward(X, y, mode="train")
        net._phase = "ready"
        alphas0 = net.layers[0].alphas.copy()
        net.layers[0].W *= np.float32(3.0)
        net.forward(X, y, mode="train")
        net._phase = "ready"
        assert net.layers[0].alphas == pytest.approx(3.0 * alphas0, rel=1e-5)

    def test_eval_quantization_idempotent(self):
        net = build_network(mlp_specs("ternary"), Rng(34))
        X, _ = batch(35, (10,), 4)
        a = net.forward(X).scores
        b = net.forward(X).scores
        assert (a == b).all()

    def test_phase_order_enforced(self):
        net = build_network(mlp_specs(), Rng(36))
        X, y = batch(37, (10,), 4)
        with pytest.raises(RuntimeError):
            net.backward()  # no forward yet
        net.forward(X, y, mode="train")
        with pytest.raises(RuntimeError):
            net.forward(X, y, mode="train")  # forward twice without backward
        net.backward()
        net.mark_updated()


class TestRecords:
    def test_roundtrip_quantized_network(self):
        net = build_network(conv_specs("ternary"), Rng(40))
        X, _ = batch(41, (2, 8, 8), 5)
        scores = net.forward(X).scores
        mf = net.to_records()
        net2 = network_from_records(mf, (2, 8, 8))
        scores2 = net2.forward(X).scores
        assert (scores == scores2).all()

    def test_roundtrip_full_network(self):
        net = build_network(mlp_specs("full"), Rng(42))
        X, _ = batch(43, (10,), 4)
        net.forward(X)
        mf = net.to_records()
        net2 = network_from_records(mf, (10,))
        assert (net2.forward(X).scores == net.forward(X).scores).all()

    def test_loss_layer_and_pool_preserved(self):
        net = build_network(conv_specs("binary"), Rng(44))
        mf = net.to_records()
        kinds = [r.kind for r in mf.layers]
        assert kinds[-1] == "hinge_loss" and "max_pool2d" in kinds


class TestBuildNetwork:
    def test_loss_must_be_last_and_unique(self):
        with pytest.raises(ValueError):
            Network([HingeLoss(), ReLU()], (4,))
        with pytest.raises(ValueError):
            Network([HingeLoss(), HingeLoss()], (4,))

    def test_geometry_chain_checked(self):
        specs = [
            LayerSpec("input", {"shape": (1, 5, 5)}),
            LayerSpec("max_pool2d", {"k": 2}),
            LayerSpec("hinge_loss", {}),
        ]
        with pytest.raises(ValueError):
            build_network(specs)

    def test_init_std_scales_with_fan_in(self):
        net = build_network(conv_specs("full"), Rng(50))
        conv = net.layers[0]
        # He init: std = sqrt(2 / (2*3*3)) = 0.333
        assert abs(conv.W.std() - np.sqrt(2 / 18)) < 0.08
