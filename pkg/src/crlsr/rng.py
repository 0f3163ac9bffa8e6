"""Seeded, portable random streams.

Every stream is a Philox-4x64 counter-based generator (numpy's
``np.random.Philox``) keyed through ``np.random.SeedSequence``. Philox output
is defined by the Random123 reference constants, so a given seed yields the
same bits on every platform numpy supports. Sub-streams are derived from a
parent seed plus integer keys, which keeps per-image and per-step randomness
independent of evaluation order.
"""

from __future__ import annotations

from typing import Any

import numpy as np

MASK64 = (1 << 64) - 1


class Rng:
    """Deterministic random stream with derivable children.

    >>> Rng(7).uniform(0.0, 1.0) == Rng(7).uniform(0.0, 1.0)
    True
    """

    def __init__(self, seed: int, keys: tuple[int, ...] = ()):
        if not 0 <= seed <= MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.keys)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def derive(self, *keys: int) -> "Rng":
        """Child stream for ``keys``; does not consume from this stream."""
        return Rng(self.seed, self.keys + tuple(keys))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low: float, high: float, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None, dtype=np.float64):
        return self._gen.standard_normal(size, dtype=dtype)

    def integers(self, low: int, high: int, size=None):
        """Integers in ``[low, high)``."""
        return self._gen.integers(low, high, size)

    def next_u64(self) -> int:
        return int(self._gen.integers(0, MASK64, dtype=np.uint64, endpoint=True))

    def get_state(self) -> dict[str, Any]:
        return {"seed": self.seed, "keys": list(self.keys),
                "bit_generator": _jsonable(self._gen.bit_generator.state)}

    def set_state(self, state: dict[str, Any]) -> None:
        if state["seed"] != self.seed or list(state["keys"]) != list(self.keys):
            raise ValueError("state belongs to a different stream")
        self._gen.bit_generator.state = _from_jsonable(state["bit_generator"])

    @classmethod
    def from_state(cls, state: dict[str, Any]) -> "Rng":
        rng = cls(state["seed"], tuple(state["keys"]))
        rng.set_state(state)
        return rng


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": [int(v) for v in obj.tolist()], "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _from_jsonable(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _from_jsonable(v) for k, v in obj.items()}
    return obj
