"""Quantization-aware layers.

A dense or conv block runs ``linear -> [batchnorm] -> [relu -> activation
quantizer]``.  Weights use a signed grid, post-ReLU activations an unsigned
one that starts at zero.  Biases stay in full precision unless
``quantize_bias`` is set, in which case they share the weight grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff import RngStream, Tensor, conv2d, matmul, maxpool2x2, relu, reshape
from ..quant import Mode, QuantizerState, hard_quantize, quantize

PHASES = ("train", "eval_relaxed", "eval_hard", "calibrate")


class UninitializedGrid(RuntimeError):
    pass


@dataclass
class ForwardContext:
    """Per-call settings threaded through the layers.

    ``bn`` picks the batchnorm behaviour: ``"batch"`` normalizes with and
    updates running statistics, ``"batch_frozen"`` normalizes with batch
    statistics only, ``"running"`` uses stored statistics and ``"collect"``
    uses batch statistics while accumulating them for re-estimation.
    """

    phase: str = "train"
    rng: RngStream | None = None
    bn: str = "batch"
    ranges: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")


def apply_quantizer(x: Tensor, q: QuantizerState | None, ctx: ForwardContext, where: str) -> Tensor:
    if q is None:
        return x
    if ctx.phase == "calibrate":
        lo, hi = ctx.ranges.get(where, (np.inf, -np.inf))
        ctx.ranges[where] = (min(lo, float(x.data.min())), max(hi, float(x.data.max())))
        return x
    if q.mode is Mode.IDENTITY:
        return x
    if not q.initialized:
        raise UninitializedGrid(f"quantizer {where} has no initialized grid; call init_quantizers first")
    if ctx.phase == "eval_hard":
        return hard_quantize(x, q.grid)
    return quantize(x, q, ctx.rng)


class Layer:
    name = "layer"

    def forward(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return []

    def quantizers(self) -> dict[str, QuantizerState]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def output_shape(self, input_shape: tuple) -> tuple:
        return input_shape


class BatchNorm(Layer):
    def __init__(self, features: int, momentum: float = 0.9, eps: float = 1e-5, name: str = "bn"):
        self.name = name
        self.gamma = Tensor(np.ones(features), requires_grad=True, name=f"{name}.gamma")
        self.shift = Tensor(np.zeros(features), requires_grad=True, name=f"{name}.shift")
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.momentum = momentum
        self.eps = eps
        self._acc = None

    def _axes(self, x: Tensor):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _view(self, v, x: Tensor):
        return v.reshape((1, -1)) if x.ndim == 2 else v.reshape((1, -1, 1, 1))

    def forward(self, x, ctx):
        axes = self._axes(x)
        if ctx.bn == "running":
            mu = self._view(self.running_mean, x)
            inv = self._view(1.0 / np.sqrt(self.running_var + self.eps), x)
            xn = (x - mu) * inv
        else:
            mu = x.mean(axis=axes, keepdims=True)
            xc = x - mu
            var = (xc * xc).mean(axis=axes, keepdims=True)
            xn = xc * (var + self.eps) ** -0.5
            bm = mu.data.reshape(-1)
            bv = var.data.reshape(-1)
            if ctx.bn == "batch" and ctx.phase == "train":
                self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * bm
                self.running_var = self.momentum * self.running_var + (1 - self.momentum) * bv
            elif ctx.bn == "collect":
                count = x.size // bm.size
                s, ss, n = self._acc or (0.0, 0.0, 0)
                # accumulate E[x] and E[x^2] so the final variance is over all samples
                self._acc = (s + bm * count, ss + (bv + bm**2) * count, n + count)
        return xn * self._view(self.gamma, x) + self._view(self.shift, x)

    def begin_collect(self):
        self._acc = None

    def end_collect(self):
        if self._acc is None:
            return
        s, ss, n = self._acc
        mean = s / n
        self.running_mean = mean
        self.running_var = np.maximum(ss / n - mean**2, 0.0)
        self._acc = None

    def parameters(self):
        return [self.gamma, self.shift]

    def buffers(self):
        return {f"{self.name}.running_mean": self.running_mean, f"{self.name}.running_var": self.running_var}


def _reshape_param(p: Tensor, shape) -> Tensor:
    return reshape(p, shape) if p.shape != tuple(shape) else p


class _QuantBlock(Layer):
    """Shared plumbing for QuantDense / QuantConv2d."""

    def __init__(self, name, out_features, weight_quantizer, activation_quantizer, activation, batchnorm,
                 quantize_bias):
        self.name = name
        self.weight_quantizer = weight_quantizer
        self.activation_quantizer = activation_quantizer if activation == "relu" else None
        self.activation = activation
        self.quantize_bias = quantize_bias
        self.bn = BatchNorm(out_features, name=f"{name}.bn") if batchnorm else None

    def _weights(self, ctx):
        w = apply_quantizer(self.weight, self.weight_quantizer, ctx, f"{self.name}.weight")
        b = self.bias
        if self.quantize_bias and ctx.phase != "calibrate":
            b = apply_quantizer(self.bias, self.weight_quantizer, ctx, f"{self.name}.weight")
        return w, b

    def _post(self, h, ctx):
        if self.bn is not None:
            h = self.bn.forward(h, ctx)
        if self.activation == "relu":
            h = relu(h)
            h = apply_quantizer(h, self.activation_quantizer, ctx, f"{self.name}.activation")
        return h

    def parameters(self):
        ps = [self.weight, self.bias]
        if self.bn is not None:
            ps += self.bn.parameters()
        for q in self.quantizers().values():
            if q.mode is not Mode.IDENTITY:
                ps += q.parameters()
        return ps

    def quantizers(self):
        qs = {}
        if self.weight_quantizer is not None:
            qs[f"{self.name}.weight"] = self.weight_quantizer
        if self.activation_quantizer is not None:
            qs[f"{self.name}.activation"] = self.activation_quantizer
        return qs

    def buffers(self):
        return self.bn.buffers() if self.bn is not None else {}


def glorot_uniform(rng: RngStream, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return (rng.uniform(shape) * 2 - 1) * limit


class QuantDense(_QuantBlock):
    def __init__(self, in_features: int, out_features: int, rng: RngStream, weight_quantizer=None,
                 activation_quantizer=None, activation: str | None = "relu", batchnorm: bool = False,
                 quantize_bias: bool = False, name: str = "dense"):
        super().__init__(name, out_features, weight_quantizer, activation_quantizer, activation, batchnorm,
                         quantize_bias)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(glorot_uniform(rng, (in_features, out_features), in_features, out_features),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.bias")

    def forward(self, x, ctx):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"{self.name}: expected input (N, {self.in_features}), got {x.shape}")
        w, b = self._weights(ctx)
        return self._post(matmul(x, w) + b, ctx)

    def output_shape(self, input_shape):
        return (self.out_features,)


class QuantConv2d(_QuantBlock):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: RngStream, padding: int = 0,
                 weight_quantizer=None, activation_quantizer=None, activation: str | None = "relu",
                 batchnorm: bool = False, quantize_bias: bool = False, name: str = "conv"):
        super().__init__(name, out_channels, weight_quantizer, activation_quantizer, activation, batchnorm,
                         quantize_bias)
        self.in_channels, self.out_channels, self.kernel, self.padding = in_channels, out_channels, kernel, padding
        fan_in, fan_out = in_channels * kernel * kernel, out_channels * kernel * kernel
        self.weight = Tensor(glorot_uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, fan_out),
                             requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias")

    def forward(self, x, ctx):
        w, b = self._weights(ctx)
        h = conv2d(x, w, padding=self.padding)
        return self._post(h + _reshape_param(b, (1, self.out_channels, 1, 1)), ctx)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        p, k = self.padding, self.kernel
        return (self.out_channels, h + 2 * p - k + 1, w + 2 * p - k + 1)


class MaxPool2x2(Layer):
    def __init__(self, name="pool"):
        self.name = name

    def forward(self, x, ctx):
        return maxpool2x2(x)

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, h // 2, w // 2)


class Flatten(Layer):
    def __init__(self, name="flatten"):
        self.name = name

    def forward(self, x, ctx):
        return reshape(x, (x.shape[0], -1))

    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)
