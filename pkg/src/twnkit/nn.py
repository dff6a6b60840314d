"""Layers and the straight-through ternary training semantics.

Weighted layers keep full-precision master weights W. At the start of every
training forward pass the masters are re-quantized per scale group (one group
per output channel for conv, one per layer for fully connected); the forward
and backward passes then run entirely on the effective weights alpha * codes.
The backward gradient w.r.t. the effective weight is taken as the gradient of
the master (straight-through), so SGD updates the masters and the codes only
change at the next re-quantization. weight_mode "full" bypasses quantization
and is bit-identical to the plain dense reference kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quantizer
from .errors import AllZeroWeights, NonFiniteLoss, ShapeMismatch
from .kernels import col2im, conv2d_from_cols, im2col, matmul_f64, _conv_geometry
from .packfmt import (
    TAG_TO_WEIGHT_MODE,
    WEIGHT_MODE_TAGS,
    LayerRecord,
    ModelFile,
    PackedTernaryTensor,
    pack,
    unpack,
)
from .tensor import Rng, Shape

WEIGHT_MODES = ("full", "ternary", "binary")
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


@dataclass
class LayerSpec:
    """One parsed config line: layer kind plus its geometry/mode params."""

    kind: str
    params: dict = field(default_factory=dict)


def _quantize_groups(W2d: np.ndarray, mode: str, owner: str):
    """Quantize each row of [groups, group_size] masters; returns
    (effective float32 weights, alphas, codes)."""
    try:
        if mode == "ternary":
            alphas, codes = quantizer.heuristic_grouped(W2d)
        else:
            alphas, codes = quantizer.binarize_grouped(W2d)
    except AllZeroWeights as e:
        raise AllZeroWeights(f"{owner}: {e}") from None
    effective = codes.astype(np.float32) * alphas[:, None]
    return effective, alphas, codes


TRAIN, EVAL, PROBE = "train", "eval", "probe"


class Layer:
    kind = "?"
    name = "?"
    needs_input_grad = True

    def initialize(self, rng: Rng):
        pass

    def parameters(self):
        """Yields (param_name, value_array, grad_array) for trainable state."""
        return iter(())

    def forward(self, X: np.ndarray, mode: str) -> np.ndarray:
        """mode: "train" caches for backward and updates state; "eval" uses
        running statistics and the existing quantize cache; "probe" uses
        train-mode statistics but mutates nothing (finite-difference probes).
        """
        raise NotImplementedError

    def backward(self, dZ: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def to_record(self) -> LayerRecord:
        return LayerRecord(self.kind)


class WeightedLayer(Layer):
    """Shared quantization cache handling for conv2d / fully_connected."""

    weight_mode = "full"
    W: np.ndarray
    bias: np.ndarray
    codes = None
    alphas = None

    def _group_view(self) -> np.ndarray:
        raise NotImplementedError

    def quantize(self):
        """Rebuild the effective-weight cache from the masters."""
        if self.weight_mode == "full":
            self.W_used = self.W
            self.alphas = None
            self.codes = None
        else:
            W2d = self._group_view()
            eff, self.alphas, self.codes = _quantize_groups(W2d, self.weight_mode, self.name)
            self.W_used = eff.reshape(self.W.shape)

    def _weights_for(self, mode: str) -> np.ndarray:
        if mode == TRAIN or getattr(self, "W_used", None) is None:
            self.quantize()  # training never reuses a stale cache
        return self.W_used

    def _pack_weights(self) -> PackedTernaryTensor:
        W2d = self._group_view()
        return pack(self.codes.ravel(), self.alphas, W2d.shape[1], Shape(self.W.shape))

    def set_quantized(self, packed: PackedTernaryTensor):
        """Install deployment weights: masters become alpha * codes."""
        codes, alphas = unpack(packed)
        self.codes = codes.reshape(self._group_view().shape)
        self.alphas = alphas
        eff = self.codes.astype(np.float32) * alphas[:, None]
        self.W = eff.reshape(self.W.shape)
        self.W_used = self.W


class Conv2d(WeightedLayer):
    kind = "conv2d"

    def __init__(self, cin, cout, kh, kw, stride=1, pad=0, weight_mode="full"):
        self.cin, self.cout, self.kh, self.kw = cin, cout, kh, kw
        self.stride, self.pad = stride, pad
        self.weight_mode = weight_mode
        self.W = np.zeros((cout, cin, kh, kw), dtype=np.float32)
        self.bias = np.zeros(cout, dtype=np.float32)
        self.dW = np.zeros_like(self.W)
        self.dbias = np.zeros_like(self.bias)
        self.W_used = None

    def initialize(self, rng: Rng):
        fan_in = self.cin * self.kh * self.kw
        std = float(np.sqrt(2.0 / fan_in))
        self.W = rng.normal(self.W.size, std).reshape(self.W.shape)
        self.bias[:] = 0
        self.W_used = None

    def _group_view(self):
        return self.W.reshape(self.cout, -1)  # one scale group per output channel

    def parameters(self):
        yield f"{self.name}.W", self.W, self.dW
        yield f"{self.name}.bias", self.bias, self.dbias

    def forward(self, X, mode):
        W_used = self._weights_for(mode)
        if X.ndim != 4 or X.shape[1] != self.cin:
            raise ShapeMismatch(f"{self.name}: input {X.shape}, expected [b,{self.cin},h,w]")
        b, _, h, w = X.shape
        oh, ow = _conv_geometry(h, w, self.kh, self.kw, self.stride, self.pad)
        cols = im2col(X, self.kh, self.kw, self.stride, self.pad)
        Z = conv2d_from_cols(cols, W_used.reshape(self.cout, -1), self.bias, b, oh, ow)
        if mode == TRAIN:
            self._cols = cols
            self._x_shape = X.shape
        return Z

    def backward(self, dZ):
        dZ2d = np.ascontiguousarray(dZ.transpose(1, 0, 2, 3).reshape(self.cout, -1))
        # straight-through: gradient w.r.t. the effective weight lands on W
        self.dW = np.matmul(dZ2d, self._cols.T).reshape(self.W.shape)
        self.dbias = dZ.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        dX = None
        if self.needs_input_grad:
            dcols = np.matmul(self.W_used.reshape(self.cout, -1).T, dZ2d)
            dX = col2im(dcols, self._x_shape, self.kh, self.kw, self.stride, self.pad)
        self._cols = None
        return dX

    def to_record(self):
        params = {
            "stride": self.stride,
            "pad": self.pad,
            "mode": WEIGHT_MODE_TAGS[self.weight_mode],
        }
        if self.weight_mode == "full":
            return LayerRecord(self.kind, params, None, {"weight": self.W, "bias": self.bias})
        if self.codes is None:
            self.quantize()
        return LayerRecord(self.kind, params, self._pack_weights(), {"bias": self.bias})


class FullyConnected(WeightedLayer):
    kind = "fully_connected"

    def __init__(self, in_features, out_features, weight_mode="full"):
        self.in_features, self.out_features = in_features, out_features
        self.weight_mode = weight_mode
        self.W = np.zeros((out_features, in_features), dtype=np.float32)
        self.bias = np.zeros(out_features, dtype=np.float32)
        self.dW = np.zeros_like(self.W)
        self.dbias = np.zeros_like(self.bias)
        self.W_used = None

    def initialize(self, rng: Rng):
        std = float(np.sqrt(2.0 / self.in_features))
        self.W = rng.normal(self.W.size, std).reshape(self.W.shape)
        self.bias[:] = 0
        self.W_used = None

    def _group_view(self):
        return self.W.reshape(1, -1)  # one scale group for the whole layer

    def parameters(self):
        yield f"{self.name}.W", self.W, self.dW
        yield f"{self.name}.bias", self.bias, self.dbias

    def forward(self, X, mode):
        W_used = self._weights_for(mode)
        if X.ndim > 2:
            flat = X.reshape(X.shape[0], -1)
        else:
            flat = X
        if flat.shape[1] != self.in_features:
            raise ShapeMismatch(f"{self.name}: input {X.shape}, expected [b,{self.in_features}]")
        Z = matmul_f64(flat, W_used.T) + self.bias[None, :]
        if mode == TRAIN:
            self._X = flat
            self._in_shape = X.shape
        return Z

    def backward(self, dZ):
        self.dW = np.matmul(dZ.T, self._X)
        self.dbias = dZ.sum(axis=0, dtype=np.float64).astype(np.float32)
        dX = None
        if self.needs_input_grad:
            dX = np.matmul(dZ, self.W_used).reshape(self._in_shape)
        self._X = None
        return dX

    def to_record(self):
        params = {"mode": WEIGHT_MODE_TAGS[self.weight_mode]}
        if self.weight_mode == "full":
            return LayerRecord(self.kind, params, None, {"weight": self.W, "bias": self.bias})
        if self.codes is None:
            self.quantize()
        return LayerRecord(self.kind, params, self._pack_weights(), {"bias": self.bias})


class BatchNorm(Layer):
    """Per-channel (rank-4 input) or per-feature (rank-2) normalization."""

    kind = "batch_norm"

    def __init__(self, channels):
        self.channels = channels
        self.gamma = np.ones(channels, dtype=np.float32)
        self.beta = np.zeros(channels, dtype=np.float32)
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.dgamma = np.zeros_like(self.gamma)
        self.dbeta = np.zeros_like(self.beta)

    def parameters(self):
        yield f"{self.name}.gamma", self.gamma, self.dgamma
        yield f"{self.name}.beta", self.beta, self.dbeta

    def _axes_and_shape(self, X):
        if X.ndim == 4:
            return (0, 2, 3), (1, self.channels, 1, 1)
        if X.ndim == 2:
            return (0,), (1, self.channels)
        raise ShapeMismatch(f"{self.name}: rank {X.ndim} input not supported")

    def forward(self, X, mode):
        if X.shape[1] != self.channels:
            raise ShapeMismatch(f"{self.name}: {X.shape[1]} channels, expected {self.channels}")
        axes, bshape = self._axes_and_shape(X)
        if mode in (TRAIN, PROBE):
            if X.shape[0] < 2:
                raise ValueError(f"{self.name}: batch size must be >= 2 in train mode")
            mu = X.mean(axis=axes, dtype=np.float64).astype(np.float32)
            xc = X - mu.reshape(bshape)
            var = (xc * xc).mean(axis=axes, dtype=np.float64)
            if mode == TRAIN:
                self.running_mean = (
                    BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mu
                ).astype(np.float32)
                self.running_var = (
                    BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
                ).astype(np.float32)
        else:
            mu = self.running_mean
            var = self.running_var.astype(np.float64)
            xc = X - mu.reshape(bshape)
        inv = (1.0 / np.sqrt(var + BN_EPS)).astype(np.float32)
        xhat = xc * inv.reshape(bshape)
        out = self.gamma.reshape(bshape) * xhat + self.beta.reshape(bshape)
        if mode == TRAIN:
            self._xhat, self._inv, self._axes, self._bshape = xhat, inv, axes, bshape
        return out

    def backward(self, dout):
        xhat, inv, axes, bshape = self._xhat, self._inv, self._axes, self._bshape
        nred = 1
        for ax in axes:
            nred *= dout.shape[ax]
        self.dgamma = (dout * xhat).sum(axis=axes, dtype=np.float64).astype(np.float32)
        self.dbeta = dout.sum(axis=axes, dtype=np.float64).astype(np.float32)
        # sum(dxhat) = gamma * dbeta and sum(dxhat * xhat) = gamma * dgamma
        coef = (self.gamma * inv / np.float32(nred)).reshape(bshape)
        dX = coef * (np.float32(nred) * dout - self.dbeta.reshape(bshape) - xhat * self.dgamma.reshape(bshape))
        self._xhat = None
        return dX.astype(np.float32)

    def to_record(self):
        return LayerRecord(
            self.kind,
            {},
            None,
            {
                "gamma": self.gamma,
                "beta": self.beta,
                "running_mean": self.running_mean,
                "running_var": self.running_var,
            },
        )


class ReLU(Layer):
    kind = "relu"

    def forward(self, X, mode):
        if mode == TRAIN:
            self._mask = X > 0
        return np.maximum(X, 0)

    def backward(self, dZ):
        return dZ * self._mask


class MaxPool2d(Layer):
    """Non-overlapping pooling (stride == window); ties go to the first
    window position in row-major scan order, forward and backward."""

    kind = "max_pool2d"

    def __init__(self, k=2):
        self.k = k

    def _windows(self, X):
        b, c, h, w = X.shape
        k = self.k
        # strided views, scan order (ky, kx) row-major
        return [X[:, :, ky::k, kx::k] for ky in range(k) for kx in range(k)]

    def forward(self, X, mode):
        b, c, h, w = X.shape
        k = self.k
        if h % k or w % k:
            raise ShapeMismatch(f"{self.name}: {h}x{w} not divisible by window {k}")
        views = self._windows(X)
        out = views[0]
        for v in views[1:]:
            out = np.maximum(out, v)
        if mode == TRAIN:
            # winner = first view (scan order) equal to the max
            taken = np.zeros(out.shape, dtype=bool)
            masks = []
            for v in views:
                m = (v == out) & ~taken
                taken |= m
                masks.append(m)
            self._masks, self._in_shape = masks, X.shape
        return np.ascontiguousarray(out)

    def backward(self, dZ):
        dX = np.zeros(self._in_shape, dtype=np.float32)
        k = self.k
        i = 0
        for ky in range(k):
            for kx in range(k):
                dX[:, :, ky::k, kx::k] = dZ * self._masks[i]
                i += 1
        return dX

    def to_record(self):
        return LayerRecord(self.kind, {"k": self.k})


class LossLayer(Layer):
    def loss(self, scores: np.ndarray, labels: np.ndarray, mode: str) -> float:
        raise NotImplementedError

    def backward_scores(self) -> np.ndarray:
        return self._dscores


class HingeLoss(LossLayer):
    """Multi-class SVM hinge: sum over j != y of max(0, 1 + s_j - s_y),
    squared by default, averaged over the batch."""

    kind = "hinge_loss"

    def __init__(self, squared=True):
        self.squared = squared

    def loss(self, scores, labels, mode):
        b, c = scores.shape
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError(f"labels must lie in [0, {c})")
        rows = np.arange(b)
        correct = scores[rows, labels][:, None]
        margins = scores - correct + np.float32(1.0)
        margins[rows, labels] = 0.0
        act = np.maximum(margins, 0)
        if self.squared:
            total = float((act.astype(np.float64) ** 2).sum())
            d = (2.0 / b) * act
        else:
            total = float(act.sum(dtype=np.float64))
            d = (act > 0).astype(np.float32) / np.float32(b)
        if mode == TRAIN:
            d = d.astype(np.float32)
            d[rows, labels] = -d.sum(axis=1)
            self._dscores = d
        return total / b

    def to_record(self):
        return LayerRecord(self.kind, {"squared": int(self.squared)})


class SoftmaxCrossEntropy(LossLayer):
    kind = "softmax_cross_entropy"

    def loss(self, scores, labels, mode):
        b, c = scores.shape
        if labels.min() < 0 or labels.max() >= c:
            raise ValueError(f"labels must lie in [0, {c})")
        shifted = scores - scores.max(axis=1, keepdims=True)
        exp = np.exp(shifted.astype(np.float64))
        p = exp / exp.sum(axis=1, keepdims=True)
        rows = np.arange(b)
        total = float(-np.log(np.maximum(p[rows, labels], 1e-300)).sum())
        if mode == TRAIN:
            d = p.astype(np.float32)
            d[rows, labels] -= 1.0
            self._dscores = d / np.float32(b)
        return total / b


@dataclass
class ForwardResult:
    scores: np.ndarray
    predictions: np.ndarray
    loss: float | None


class Network:
    """Ordered layers ending in a loss layer; drives forward/backward and the
    quantize -> forward -> backward -> update phase contract."""

    def __init__(self, layers, input_shape):
        if not layers or not isinstance(layers[-1], LossLayer):
            raise ValueError("network must end with exactly one loss layer")
        if any(isinstance(l, LossLayer) for l in layers[:-1]):
            raise ValueError("loss layer must be last and unique")
        self.layers = layers[:-1]
        self.loss_layer = layers[-1]
        self.input_shape = tuple(input_shape)
        counts: dict = {}
        for layer in layers:
            counts[layer.kind] = counts.get(layer.kind, 0) + 1
            layer.name = f"{layer.kind}{counts[layer.kind]}"
        if self.layers:
            self.layers[0].needs_input_grad = False  # nothing upstream to feed
        self._phase = "ready"

    def initialize(self, rng: Rng):
        for layer in self.layers:
            layer.initialize(rng)
        self._phase = "ready"

    def set_weight_mode(self, mode: str):
        if mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {mode!r}")
        for layer in self.layers:
            if isinstance(layer, WeightedLayer):
                layer.weight_mode = mode
                layer.W_used = None

    def quantize_all(self):
        for layer in self.layers:
            if isinstance(layer, WeightedLayer):
                layer.quantize()

    def forward(self, X, labels=None, mode: str = EVAL) -> ForwardResult:
        if mode not in (TRAIN, EVAL, PROBE):
            raise ValueError(f"mode must be train/eval/probe, got {mode!r}")
        if X.ndim - 1 != len(self.input_shape) or X.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"input {X.shape[1:]} does not match network input {self.input_shape}")
        if mode == TRAIN:
            if self._phase != "ready":
                raise RuntimeError(f"train forward in phase {self._phase}; step order is "
                                   "quantize/forward -> backward -> update")
            if labels is None:
                raise ValueError("training forward needs labels")
        out = np.ascontiguousarray(X, dtype=np.float32)
        for layer in self.layers:
            out = layer.forward(out, mode)
        loss = None
        if labels is not None:
            labels = np.asarray(labels)
            if labels.shape[0] != out.shape[0]:
                raise ShapeMismatch(f"{labels.shape[0]} labels for batch {out.shape[0]}")
            loss = self.loss_layer.loss(out, labels, mode)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss is {loss}")
        if mode == TRAIN:
            self._phase = "forwarded"
        return ForwardResult(out, out.argmax(axis=1), loss)

    def backward(self):
        if self._phase != "forwarded":
            raise RuntimeError("backward requires a train-mode forward with no update in between")
        d = self.loss_layer.backward_scores()
        for layer in reversed(self.layers):
            d = layer.backward(d)
        self._phase = "backwarded"
        return d

    def input_gradient(self, X, labels):
        """d(loss)/d(input) on a probe basis (used by gradient checks)."""
        first = self.layers[0]
        saved = first.needs_input_grad
        first.needs_input_grad = True
        try:
            self.forward(X, labels, mode=TRAIN)
            d = self.backward()
            self._phase = "ready"
        finally:
            first.needs_input_grad = saved
        return d

    def mark_updated(self):
        if self._phase != "backwarded":
            raise RuntimeError(f"update in phase {self._phase}; run backward first")
        self._phase = "ready"

    def parameters(self):
        for layer in self.layers:
            yield from layer.parameters()

    def gradients(self) -> dict:
        return {name: grad for name, _, grad in self.parameters()}

    def to_records(self) -> ModelFile:
        recs = [l.to_record() for l in self.layers] + [self.loss_layer.to_record()]
        return ModelFile(recs)


def quantize_layer(layer: WeightedLayer):
    """Refresh a weighted layer's quantization cache in place."""
    layer.quantize()
    return layer


def build_network(specs, rng: Rng | None = None) -> Network:
    """Assemble a Network from LayerSpecs; the first spec must be `input`."""
    if not specs or specs[0].kind != "input":
        raise ValueError("first spec must declare the input shape")
    input_shape = tuple(specs[0].params["shape"])
    cur = input_shape
    layers = []
    for spec in specs[1:]:
        k = spec.kind
        p = spec.params
        if k == "conv2d":
            if len(cur) != 3:
                raise ValueError(f"conv2d needs [c,h,w] input, have {cur}")
            cin, h, w = cur
            oh, ow = _conv_geometry(h, w, p["kh"], p["kw"], p["stride"], p["pad"])
            layers.append(
                Conv2d(cin, p["out"], p["kh"], p["kw"], p["stride"], p["pad"], p["mode"])
            )
            cur = (p["out"], oh, ow)
        elif k == "fully_connected":
            feats = int(np.prod(cur))
            layers.append(FullyConnected(feats, p["out"], p["mode"]))
            cur = (p["out"],)
        elif k == "batch_norm":
            layers.append(BatchNorm(cur[0]))
        elif k == "relu":
            layers.append(ReLU())
        elif k == "max_pool2d":
            if len(cur) != 3:
                raise ValueError(f"max_pool2d needs [c,h,w] input, have {cur}")
            c, h, w = cur
            kk = p["k"]
            if h % kk or w % kk:
                raise ValueError(f"pool window {kk} does not divide {h}x{w}")
            layers.append(MaxPool2d(kk))
            cur = (c, h // kk, w // kk)
        elif k == "hinge_loss":
            layers.append(HingeLoss(bool(p.get("squared", 1))))
        elif k == "softmax_cross_entropy":
            layers.append(SoftmaxCrossEntropy())
        else:
            raise ValueError(f"unknown layer kind {k!r}")
    net = Network(layers, input_shape)
    if rng is not None:
        net.initialize(rng)
    return net


def network_from_records(mf: ModelFile, input_shape) -> Network:
    """Rebuild an inference-ready network from a deserialized model.

    Quantized layers come back with masters equal to alpha * codes; resuming
    training from a deployment file is not supported.
    """
    cur = tuple(input_shape)
    layers = []
    for rec in mf.layers:
        if rec.kind == "conv2d":
            mode = TAG_TO_WEIGHT_MODE[rec.params["mode"]]
            if mode == "full":
                cout, cin, kh, kw = rec.floats["weight"].shape
            else:
                cout, cin, kh, kw = rec.packed.shape.dims
            layer = Conv2d(cin, cout, kh, kw, rec.params["stride"], rec.params["pad"], mode)
            if mode == "full":
                layer.W = rec.floats["weight"].astype(np.float32)
                layer.W_used = layer.W
            else:
                layer.set_quantized(rec.packed)
            layer.bias = rec.floats["bias"].astype(np.float32).ravel()
            oh, ow = _conv_geometry(cur[1], cur[2], kh, kw, layer.stride, layer.pad)
            cur = (cout, oh, ow)
        elif rec.kind == "fully_connected":
            mode = TAG_TO_WEIGHT_MODE[rec.params["mode"]]
            if mode == "full":
                out, feats = rec.floats["weight"].shape
            else:
                out, feats = rec.packed.shape.dims
            layer = FullyConnected(feats, out, mode)
            if mode == "full":
                layer.W = rec.floats["weight"].astype(np.float32)
                layer.W_used = layer.W
            else:
                layer.set_quantized(rec.packed)
            layer.bias = rec.floats["bias"].astype(np.float32).ravel()
            cur = (out,)
        elif rec.kind == "batch_norm":
            layer = BatchNorm(rec.floats["gamma"].size)
            layer.gamma = rec.floats["gamma"].astype(np.float32).ravel()
            layer.beta = rec.floats["beta"].astype(np.float32).ravel()
            layer.running_mean = rec.floats["running_mean"].astype(np.float32).ravel()
            layer.running_var = rec.floats["running_var"].astype(np.float32).ravel()
        elif rec.kind == "relu":
            layer = ReLU()
        elif rec.kind == "max_pool2d":
            layer = MaxPool2d(rec.params["k"])
            cur = (cur[0], cur[1] // layer.k, cur[2] // layer.k)
        elif rec.kind == "hinge_loss":
            layer = HingeLoss(bool(rec.params.get("squared", 1)))
        elif rec.kind == "softmax_cross_entropy":
            layer = SoftmaxCrossEntropy()
        else:
            raise ValueError(f"unknown record kind {rec.kind!r}")
        layers.append(layer)
    return Network(layers, input_shape)
