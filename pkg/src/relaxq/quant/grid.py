"""Learnable fixed-point grids and the per-quantizer state."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import Tensor, exp


class Mode(str, enum.Enum):
    RQ = "rq"
    RQ_ST = "rq-st"
    SR = "sr"
    HARD = "hard"
    IDENTITY = "identity"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for m in cls:
            if m.value == key:
                return m
        raise ValueError(f"unknown quantizer mode {value!r}; expected one of {[m.value for m in cls]}")


class QuantGrid:
    """K = 2**bits uniformly spaced points ``alpha * G + beta``.

    ``alpha`` is stored as ``log_alpha`` so it stays positive under gradient
    steps.  ``beta`` is a constant zero unless ``learn_beta`` is set.
    """

    def __init__(self, bits: int, alpha: float = 1.0, beta: float = 0.0, signed: bool = True,
                 learn_beta: bool = False, name: str = "grid"):
        if not 2 <= int(bits) <= 8:
            raise ValueError(f"bits must be in 2..8, got {bits}")
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        self.bits = int(bits)
        self.signed = bool(signed)
        self.log_alpha = Tensor(math.log(alpha), requires_grad=True, name=f"{name}.log_alpha")
        self.beta = Tensor(float(beta), requires_grad=learn_beta, name=f"{name}.beta")

    @property
    def K(self) -> int:
        return 2**self.bits

    @property
    def lo(self) -> int:
        """Smallest integer of the base grid G."""
        return -(2 ** (self.bits - 1)) if self.signed else 0

    @property
    def base(self) -> np.ndarray:
        return np.arange(self.lo, self.lo + self.K, dtype=np.float64)

    @property
    def alpha_value(self) -> float:
        return float(np.exp(self.log_alpha.data))

    @property
    def beta_value(self) -> float:
        return float(self.beta.data)

    def alpha(self) -> Tensor:
        return exp(self.log_alpha)

    def set_alpha(self, alpha: float) -> None:
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        self.log_alpha.data = np.asarray(math.log(alpha), dtype=self.log_alpha.data.dtype)

    def parameters(self) -> list[Tensor]:
        return [self.log_alpha] + ([self.beta] if self.beta.requires_grad else [])

    def __repr__(self):
        kind = "signed" if self.signed else "unsigned"
        return f"QuantGrid(bits={self.bits}, {kind}, alpha={self.alpha_value:.6g}, beta={self.beta_value:.6g})"


class NoiseModel:
    """Logistic input noise with scale ``sigma = exp(log_sigma)``."""

    def __init__(self, sigma: float = 1.0, name: str = "noise"):
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.log_sigma = Tensor(math.log(sigma), requires_grad=True, name=f"{name}.log_sigma")

    @property
    def sigma_value(self) -> float:
        return float(np.exp(self.log_sigma.data))

    def sigma(self) -> Tensor:
        return exp(self.log_sigma)

    def set_sigma(self, sigma: float) -> None:
        if not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.log_sigma.data = np.asarray(math.log(sigma), dtype=self.log_sigma.data.dtype)


@dataclass
class RelaxationParams:
    temperature: float = 2.0
    fuzz: float = 1e-9
    delta: float | None = 3.0
    min_neighbors: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not self.fuzz >= 0:
            raise ValueError(f"fuzz must be nonnegative, got {self.fuzz}")
        if self.delta is not None and not self.delta > 0:
            raise ValueError(f"delta must be positive or None, got {self.delta}")
        if self.min_neighbors < 0:
            raise ValueError(f"min_neighbors must be nonnegative, got {self.min_neighbors}")

    @classmethod
    def for_bits(cls, bits: int, **overrides) -> "RelaxationParams":
        """Defaults used for MNIST: local grid (delta=3) only above 2 bits,
        temperature 1 at 2 bits and 2 otherwise."""
        params = {"temperature": 1.0 if bits <= 2 else 2.0, "delta": 3.0 if bits > 2 else None}
        params.update({k: v for k, v in overrides.items()})
        return cls(**params)


@dataclass
class QuantizerState:
    grid: QuantGrid
    noise: NoiseModel
    relax: RelaxationParams = field(default_factory=RelaxationParams)
    mode: Mode = Mode.RQ
    name: str = "quantizer"
    initialized: bool = False

    def __post_init__(self):
        self.mode = Mode.parse(self.mode)

    @classmethod
    def create(cls, bits: int, signed: bool, mode="rq", name: str = "quantizer", alpha: float = 1.0,
               sigma: float | None = None, learn_beta: bool = False, **relax) -> "QuantizerState":
        grid = QuantGrid(bits, alpha=alpha, signed=signed, learn_beta=learn_beta, name=name)
        noise = NoiseModel(alpha / 3 if sigma is None else sigma, name=name)
        return cls(grid, noise, RelaxationParams.for_bits(bits, **relax), Mode.parse(mode), name)

    def parameters(self) -> list[Tensor]:
        return self.grid.parameters() + [self.noise.log_sigma]

    def initialize(self, alpha: float, sigma: float) -> None:
        self.grid.set_alpha(alpha)
        self.noise.set_sigma(sigma)
        self.initialized = True


def init_grid_params(x_min: float, x_max: float, bits: int, kind: str = "weights") -> tuple[float, float]:
    """Initial (alpha, sigma) from the observed input range.

    With t = (max - min) / 2**b: weights use t + 3t/2**b; activations use
    the same above 4 bits, t + 3t/2**(b+1) for 3-4 bits and t at 2 bits.
    sigma starts at alpha / 3.
    """
    if not x_max > x_min:
        raise ValueError(f"init_grid_params: need max > min, got min={x_min}, max={x_max}")
    if not 2 <= bits <= 8:
        raise ValueError(f"init_grid_params: bits must be in 2..8, got {bits}")
    t = (x_max - x_min) / 2**bits
    if kind == "weights":
        alpha = t + 3 * t / 2**bits
    elif kind == "activations":
        if bits > 4:
            alpha = t + 3 * t / 2**bits
        elif bits > 2:
            alpha = t + 3 * t / 2 ** (bits + 1)
        else:
            alpha = t
    else:
        raise ValueError(f"init_grid_params: kind must be 'weights' or 'activations', got {kind!r}")
    return alpha, alpha / 3
