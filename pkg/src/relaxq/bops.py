"""Bit-operation (BOPs) cost accounting for dense and conv layers.

A layer with n inputs per output, kernel k, m outputs and P output positions
costs

    m * P * n * k**2 * (b_w * b_a + b_w + b_a + log2(n * k**2))

bit operations: one b_w x b_a multiply per weight, plus an accumulator wide
enough to add n*k**2 products without overflow.  ``bops_per_position`` is the
only place the formula lives so it can be swapped.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .nn.model import Model, ModelSpec

FULL_PRECISION_BITS = 32


@dataclass(frozen=True)
class LayerCost:
    name: str
    kind: str  # "dense" or "conv"
    n: int  # input features / channels
    m: int  # output features / channels
    k: int = 1
    positions: int = 1  # output spatial positions, 1 for dense
    bits_w: int = FULL_PRECISION_BITS
    bits_a: int = FULL_PRECISION_BITS

    def __post_init__(self):
        if self.kind not in ("dense", "conv"):
            raise ValueError(f"{self.name}: kind must be 'dense' or 'conv', got {self.kind!r}")
        for field_name in ("n", "m", "k", "positions"):
            value = getattr(self, field_name)
            if int(value) != value or value < 1:
                raise ValueError(f"{self.name}: {field_name} must be a positive integer, got {value}")
        for field_name in ("bits_w", "bits_a"):
            value = getattr(self, field_name)
            if int(value) != value or not 1 <= value <= 32:
                raise ValueError(f"{self.name}: {field_name} must be an integer in 1..32, got {value}")


def bops_per_position(n: int, k: int, bits_w: int, bits_a: int) -> float:
    fan_in = n * k * k
    return fan_in * (bits_w * bits_a + bits_w + bits_a + math.log2(fan_in))


def layer_bops(cost: LayerCost) -> int:
    per = bops_per_position(cost.n, cost.k, cost.bits_w, cost.bits_a)
    return int(round(cost.m * cost.positions * per))


@dataclass
class BopsReport:
    layers: list[LayerCost]
    per_layer: list[int]
    total: int
    dominant: str | None  # name of the most expensive layer

    def shares(self) -> list[float]:
        return [b / self.total if self.total else 0.0 for b in self.per_layer]

    def to_dict(self) -> dict:
        rows = []
        for cost, bops, share in zip(self.layers, self.per_layer, self.shares()):
            rows.append({**asdict(cost), "bops": bops, "share": share, "dominant": cost.name == self.dominant})
        return {"total": self.total, "dominant": self.dominant, "layers": rows}


def _bits(value) -> int:
    return FULL_PRECISION_BITS if value is None else int(value)


def layer_costs(spec: ModelSpec, overrides: dict | None = None, input_bits: int | None = None) -> list[LayerCost]:
    """Cost descriptors for every dense/conv layer of ``spec``.

    A layer's activation bit width is that of its *input*: the previous
    layer's activation quantizer, or ``input_bits`` (default full precision)
    for the first layer.  ``overrides`` maps a layer name or index to a
    ``(bits_w, bits_a)`` pair replacing both.
    """
    overrides = overrides or {}
    shape = tuple(spec.input_shape)
    incoming = _bits(input_bits)
    costs = []
    for i, desc in enumerate(spec.layers):
        kind = desc.get("type")
        name = desc.get("name", f"layer{i}")
        if kind == "flatten":
            shape = (math.prod(shape),)
            continue
        if kind == "maxpool":
            c, h, w = shape
            shape = (c, h // 2, w // 2)
            continue
        if kind not in ("dense", "conv"):
            raise ValueError(f"{name}: unknown layer type {kind!r}")
        bits_w = _bits(desc.get("bits_w", spec.bits_w))
        bits_a = incoming
        override = overrides.get(name, overrides.get(i))
        if override is not None:
            bits_w, bits_a = (int(b) for b in override)
        if kind == "dense":
            m = int(desc["units"])
            costs.append(LayerCost(name, "dense", shape[0], m, 1, 1, bits_w, bits_a))
            shape = (m,)
        else:
            c, h, w = shape
            k, p, m = int(desc["kernel"]), int(desc.get("padding", 0)), int(desc["channels"])
            oh, ow = h + 2 * p - k + 1, w + 2 * p - k + 1
            costs.append(LayerCost(name, "conv", c, m, k, oh * ow, bits_w, bits_a))
            shape = (m, oh, ow)
        activation = desc.get("activation", "relu")
        incoming = _bits(desc.get("bits_a", spec.bits_a)) if activation not in (None, "none") else FULL_PRECISION_BITS
    return costs


def model_bops(model: Model | ModelSpec, overrides: dict | None = None, input_bits: int | None = None) -> BopsReport:
    spec = model.spec if isinstance(model, Model) else model
    costs = layer_costs(spec, overrides, input_bits)
    per = [layer_bops(c) for c in costs]
    dominant = costs[per.index(max(per))].name if costs else None
    return BopsReport(costs, per, sum(per), dominant)
