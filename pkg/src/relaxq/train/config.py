"""Training configuration and its INI file format.

A config file has a ``[model]`` section, a ``[train]`` section and one
``[layer.N]`` section per layer, ordered by N::

    [model]
    input_shape = 1, 28, 28
    bits_w = 8
    bits_a = 8
    mode = rq-st

    [train]
    epochs = 15
    lr = 0.001

    [layer.0]
    type = flatten

    [layer.1]
    type = dense
    units = 256

Values ``none`` and ``auto`` are recognised everywhere; numbers and
booleans are converted.  Command-line flags override file values.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, fields

from ..nn.model import ModelSpec

_LAYER_SECTION = re.compile(r"^layer\.(\d+)$")


@dataclass
class TrainConfig:
    model: ModelSpec
    epochs: int = 15
    batch_size: int = 128
    lr: float = 1e-3
    anneal_epochs: int = 5
    seed: int = 0
    patience: int | None = None
    weight_decay: float = 0.0
    val_size: int = 5000
    eval_batch_size: int = 1000
    eval_seeds: int = 1
    dtype: str = "float64"
    data: str = "mnist"
    data_dir: str = "data/mnist"
    synthetic_classes: int = 4
    synthetic_n: int = 2000

    def __post_init__(self):
        for name in ("epochs", "batch_size", "val_size", "eval_batch_size", "eval_seeds"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.anneal_epochs <= self.epochs:
            raise ValueError(f"anneal_epochs must be in [0, epochs={self.epochs}], got {self.anneal_epochs}")
        if self.patience is not None and self.patience <= 0:
            raise ValueError(f"patience must be positive or none, got {self.patience}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be nonnegative, got {self.weight_decay}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"dtype must be float64 or float32, got {self.dtype!r}")
        if self.data not in ("mnist", "synthetic"):
            raise ValueError(f"data must be 'mnist' or 'synthetic', got {self.data!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["model"] = ModelSpec.from_dict(d["model"])
        return cls(**d)

    def with_overrides(self, **overrides) -> "TrainConfig":
        """Copy with train fields and model-wide quantizer settings replaced.

        ``None`` values are ignored, so argparse namespaces can be passed
        straight through.
        """
        d = self.to_dict()
        model_keys = {f.name for f in fields(ModelSpec)}
        for key, value in overrides.items():
            if value is None:
                continue
            if key in model_keys:
                d["model"][key] = value
            elif key in d:
                d[key] = value
            else:
                raise KeyError(f"unknown config key {key!r}")
        return TrainConfig.from_dict(d)


def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("none", "null", ""):
        return None
    if low == "auto":
        return "auto"
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def _model_fields(section) -> dict:
    out = {}
    for key, raw in section.items():
        if key == "input_shape":
            out[key] = tuple(int(v) for v in raw.split(","))
        else:
            out[key] = parse_value(raw)
    return out


def parse_config(text: str, source: str = "<string>") -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as err:
        raise ValueError(f"{source}: {err}") from None
    if not parser.has_section("model"):
        raise ValueError(f"{source}: missing [model] section")
    model_known = {f.name for f in fields(ModelSpec)} - {"layers"}
    model_kw = _model_fields(parser["model"])
    unknown = set(model_kw) - model_known
    if unknown:
        raise ValueError(f"{source}: unknown [model] keys {sorted(unknown)}")
    if "input_shape" not in model_kw:
        raise ValueError(f"{source}: [model] needs input_shape")

    layers = []
    for name in parser.sections():
        match = _LAYER_SECTION.match(name)
        if match:
            desc = {k: parse_value(v) for k, v in parser[name].items()}
            layers.append((int(match.group(1)), desc))
        elif name not in ("model", "train"):
            raise ValueError(f"{source}: unknown section [{name}]")
    if not layers:
        raise ValueError(f"{source}: no [layer.N] sections")
    layers.sort(key=lambda item: item[0])
    spec = ModelSpec(layers=[d for _, d in layers], **model_kw)

    train_kw = {}
    if parser.has_section("train"):
        train_known = {f.name for f in fields(TrainConfig)} - {"model"}
        for key, raw in parser["train"].items():
            if key not in train_known:
                raise ValueError(f"{source}: unknown [train] key {key!r}")
            train_kw[key] = parse_value(raw)
    return TrainConfig(model=spec, **train_kw)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read(), source=str(path))
