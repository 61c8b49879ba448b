"""Counter-based random streams (Philox) with serializable state."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor

GUMBEL_CLAMP = 1e-12


class RngStream:
    """A reproducible stream of random draws keyed by a 64-bit seed.

    Independent consumers should use :meth:`spawn` so their draws never
    interleave.
    """

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._bitgen = np.random.Philox(key=self.seed, counter=counter)
        self.generator = np.random.Generator(self._bitgen)
        self._children = 0

    def spawn(self) -> "RngStream":
        self._children += 1
        child_seed = np.random.SeedSequence([self.seed, self._children]).generate_state(1, np.uint64)[0]
        return RngStream(int(child_seed))

    def uniform(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def get_state(self) -> dict:
        return {"seed": self.seed, "children": self._children, "bitgen": self._bitgen.state}

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self._children = int(state["children"])
        self._bitgen.state = state["bitgen"]

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(int(state["seed"]))
        rng.set_state(state)
        return rng


def gumbel_from_uniform(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
    return -np.log(-np.log(u))


def sample_uniform(rng: RngStream, shape) -> Tensor:
    return Tensor(rng.uniform(shape))


def sample_gumbel(rng: RngStream, shape) -> Tensor:
    return Tensor(gumbel_from_uniform(rng.uniform(shape)))
