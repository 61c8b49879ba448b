"""Sequential quantized models built from layer descriptors."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from ..autodiff import RngStream, Tensor, no_grad
from ..quant import Mode, QuantizerState, hard_quantize, init_grid_params
from .layers import (
    BatchNorm,
    Flatten,
    ForwardContext,
    Layer,
    MaxPool2x2,
    QuantConv2d,
    QuantDense,
)

LAYER_TYPES = ("dense", "conv", "maxpool", "flatten")


@dataclass
class ModelSpec:
    """Input shape plus an ordered list of layer descriptors.

    Descriptor keys: ``type`` (dense | conv | maxpool | flatten); ``units`` for
    dense; ``channels``, ``kernel``, ``padding`` for conv; optional
    ``activation`` (relu | none), ``batchnorm``, ``quantize_bias``,
    ``bits_w``, ``bits_a`` and ``mode`` overriding the model-wide settings.
    """

    input_shape: tuple
    layers: list[dict] = field(default_factory=list)
    bits_w: int | None = 8
    bits_a: int | None = 8
    mode: str = "rq-st"
    temperature: float | None = None
    delta: float | str | None = "auto"
    fuzz: float = 1e-9
    min_neighbors: int = 1

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape), "layers": self.layers, "bits_w": self.bits_w,
            "bits_a": self.bits_a, "mode": self.mode, "temperature": self.temperature, "delta": self.delta,
            "fuzz": self.fuzz, "min_neighbors": self.min_neighbors,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def _relax_overrides(spec: ModelSpec, desc: dict, bits: int) -> dict:
    out = {"fuzz": float(desc.get("fuzz", spec.fuzz)),
           "min_neighbors": int(desc.get("min_neighbors", spec.min_neighbors))}
    temperature = desc.get("temperature", spec.temperature)
    if temperature not in (None, "auto"):
        out["temperature"] = float(temperature)
    delta = desc.get("delta", spec.delta)
    if delta != "auto":
        out["delta"] = None if delta in (None, "none") else float(delta)
    return out


def _make_quantizer(spec, desc, bits, signed, name):
    if bits is None:
        return None
    mode = desc.get("mode", spec.mode)
    return QuantizerState.create(int(bits), signed, mode=mode, name=name, **_relax_overrides(spec, desc, bits))


def build_model(spec: ModelSpec, seed: int = 0) -> "Model":
    """Instantiate layers; weights are drawn from a stream derived from ``seed``."""
    rng = RngStream(seed)
    shape = tuple(spec.input_shape)
    layers: list[Layer] = []
    for i, desc in enumerate(spec.layers):
        kind = desc.get("type")
        name = desc.get("name", f"layer{i}")
        if kind not in LAYER_TYPES:
            raise ValueError(f"{name}: unknown layer type {kind!r}; expected one of {LAYER_TYPES}")
        if kind in ("dense", "conv"):
            bits_w = desc.get("bits_w", spec.bits_w)
            bits_a = desc.get("bits_a", spec.bits_a)
            activation = desc.get("activation", "relu")
            activation = None if activation in (None, "none") else activation
            wq = _make_quantizer(spec, desc, bits_w, True, f"{name}.weight")
            aq = _make_quantizer(spec, desc, bits_a, False, f"{name}.activation") if activation else None
            common = dict(weight_quantizer=wq, activation_quantizer=aq, activation=activation,
                          batchnorm=bool(desc.get("batchnorm", False)),
                          quantize_bias=bool(desc.get("quantize_bias", False)), name=name)
            if kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"{name}: dense layer needs a flat input, got shape {shape}; add a flatten layer")
                layer = QuantDense(shape[0], int(desc["units"]), rng, **common)
            else:
                if len(shape) != 3:
                    raise ValueError(f"{name}: conv layer needs a (C, H, W) input, got shape {shape}")
                layer = QuantConv2d(shape[0], int(desc["channels"]), int(desc["kernel"]), rng,
                                    padding=int(desc.get("padding", 0)), **common)
        elif kind == "maxpool":
            if len(shape) != 3 or shape[1] % 2 or shape[2] % 2:
                raise ValueError(f"{name}: maxpool needs a (C, H, W) input with even H, W, got {shape}")
            layer = MaxPool2x2(name)
        else:
            layer = Flatten(name)
        shape = layer.output_shape(shape)
        layers.append(layer)
    return Model(spec, layers)


class Model:
    def __init__(self, spec: ModelSpec, layers: list[Layer]):
        self.spec = spec
        self.layers = layers

    def forward(self, x, phase: str = "train", rng: RngStream | None = None, bn: str | None = None) -> Tensor:
        """Logits for a batch.

        ``train`` and ``eval_relaxed`` sample the configured stochastic
        quantizers; ``eval_hard`` rounds every quantizer to its nearest grid
        point.  Batchnorm defaults to batch statistics when training and
        stored statistics otherwise.
        """
        if bn is None:
            bn = "batch" if phase == "train" else "running"
        ctx = ForwardContext(phase=phase, rng=rng, bn=bn)
        h = x if isinstance(x, Tensor) else Tensor(x)
        for layer in self.layers:
            h = layer.forward(h, ctx)
        return h

    __call__ = forward

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.layers:
            ps += layer.parameters()
        return ps

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            for p in layer.parameters():
                out[p.name] = p
            for q in layer.quantizers().values():
                for p in q.parameters():
                    out[p.name] = p
        return out

    def quantizers(self) -> dict[str, QuantizerState]:
        qs = {}
        for layer in self.layers:
            qs.update(layer.quantizers())
        return qs

    def batchnorms(self) -> list[BatchNorm]:
        return [layer.bn for layer in self.layers if getattr(layer, "bn", None) is not None]

    def compute_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if isinstance(layer, (QuantDense, QuantConv2d))]

    def set_mode(self, mode) -> None:
        for q in self.quantizers().values():
            q.mode = Mode.parse(mode)

    def init_quantizers(self, x_batch) -> None:
        """Initialize every grid from the weights and from the activation
        ranges seen on ``x_batch`` in a full-precision forward pass."""
        ctx = ForwardContext(phase="calibrate", bn="batch_frozen")
        h = x_batch if isinstance(x_batch, Tensor) else Tensor(x_batch)
        with no_grad():
            for layer in self.layers:
                h = layer.forward(h, ctx)
        for layer in self.compute_layers():
            wq = layer.weight_quantizer
            if wq is not None:
                w = layer.weight.data
                alpha, sigma = init_grid_params(float(w.min()), float(w.max()), wq.grid.bits, "weights")
                wq.initialize(alpha, sigma)
            aq = layer.activation_quantizer
            if aq is not None:
                key = f"{layer.name}.activation"
                lo, hi = ctx.ranges.get(key, (0.0, 0.0))
                if not hi > lo:
                    raise ValueError(f"{key}: degenerate activation range [{lo}, {hi}] on the calibration batch")
                alpha, sigma = init_grid_params(lo, hi, aq.grid.bits, "activations")
                aq.initialize(alpha, sigma)

    def reestimate_batchnorm(self, batches: Iterable) -> None:
        """Replace batchnorm running statistics by those of the hard-quantized
        network over ``batches`` (arrays or (x, y) pairs)."""
        bns = self.batchnorms()
        if not bns:
            return
        for bn in bns:
            bn.begin_collect()
        seen = 0
        with no_grad():
            for batch in batches:
                x = batch[0] if isinstance(batch, tuple) else batch
                self.forward(x, phase="eval_hard", bn="collect")
                seen += 1
        if not seen:
            raise ValueError("reestimate_batchnorm: empty data iterator")
        for bn in bns:
            bn.end_collect()

    # state

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters().items()}
        for layer in self.layers:
            for k, v in layer.buffers().items():
                state[k] = np.array(v, copy=True)
        return state

    def load_state_dict(self, state: dict) -> None:
        params = self.named_parameters()
        for name, p in params.items():
            if name not in state:
                raise KeyError(f"missing parameter {name} in state")
            p.data = np.array(state[name], dtype=p.data.dtype, copy=True)
        for bn in self.batchnorms():
            bn.running_mean = np.array(state[f"{bn.name}.running_mean"], copy=True)
            bn.running_var = np.array(state[f"{bn.name}.running_var"], copy=True)

    def quantizer_meta(self) -> dict:
        return {k: {"bits": q.grid.bits, "signed": q.grid.signed, "mode": q.mode.value,
                    "initialized": q.initialized, "temperature": q.relax.temperature,
                    "delta": q.relax.delta, "fuzz": q.relax.fuzz,
                    "min_neighbors": q.relax.min_neighbors}
                for k, q in self.quantizers().items()}

    def load_quantizer_meta(self, meta: dict) -> None:
        for k, q in self.quantizers().items():
            m = meta.get(k)
            if m is None:
                continue
            q.mode = Mode.parse(m["mode"])
            q.initialized = bool(m["initialized"])

    def clone(self) -> "Model":
        return copy.deepcopy(self)


def grid_distance(w: np.ndarray, q: QuantizerState) -> float:
    """Mean |w - hard_quantize(w)| in units of alpha."""
    return float(np.mean(np.abs(w - hard_quantize(w, q.grid).data)) / q.grid.alpha_value)


def clustering_report(model: Model, bins: int = 100) -> dict:
    """Per-layer weight histograms with grid overlay and distance-to-grid."""
    layers = []
    for layer in model.compute_layers():
        q = layer.weight_quantizer
        w = layer.weight.data.reshape(-1)
        counts, edges = np.histogram(w, bins=bins)
        entry = {"layer": layer.name, "n_weights": int(w.size),
                 "histogram": {"counts": counts.tolist(), "bin_edges": edges.tolist()}}
        if q is not None and q.initialized and q.mode is not Mode.IDENTITY:
            g = q.grid
            entry.update(bits=g.bits, alpha=g.alpha_value, beta=g.beta_value, sigma=q.noise.sigma_value,
                         grid_points=(g.alpha_value * g.base + g.beta_value).tolist(),
                         mean_grid_distance=grid_distance(w, q))
        layers.append(entry)
    return {"layers": layers}


def report_to_json(report: dict) -> str:
    return json.dumps(report, indent=2)


def report_csv_rows(report: dict) -> list[dict]:
    """Flat per-layer rows (histograms omitted) for CSV output."""
    rows = []
    for entry in report["layers"]:
        rows.append({k: entry.get(k) for k in ("layer", "n_weights", "bits", "alpha", "sigma", "mean_grid_distance")})
    return rows
