"""Counter-based random number generation.

Every stochastic quantity in the simulator is a pure function of integer keys
(seed, instance index, step counter, channel), so trajectories replay
bit-exactly regardless of how environments are sharded across workers and the
full RNG state serializes as a handful of integers.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

# Channel ids keep independent noise streams from colliding on the same
# (seed, env, step) key.  Add new channels at the end only.
CH_EPISODE = 1
CH_TELEPORT = 2
CH_KICK = 3
CH_CAMERA = 4
CH_OBS_NOISE = 5
CH_GRAVITY = 6
CH_RESET = 7
CH_TERRAIN = 8
CH_ACTION_NOISE = 9
CH_INIT = 10
CH_SHUFFLE = 11
CH_DETECT = 12


def _mix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _GOLDEN
        x ^= x >> np.uint64(30)
        x *= _MIX1
        x ^= x >> np.uint64(27)
        x *= _MIX2
        x ^= x >> np.uint64(31)
    return x


def hash_u64(*keys) -> np.ndarray:
    """Mix integer keys (scalars or broadcastable arrays) into uint64 words."""
    acc = np.uint64(0)
    for k in keys:
        k = np.asarray(k, dtype=np.uint64)
        acc = _mix(acc ^ k)
    return acc


def keyed_uniform(*keys, lanes: int | None = None) -> np.ndarray:
    """Uniform floats in [0, 1) keyed by the given integers.

    With ``lanes`` set, an extra trailing axis of that many independent draws
    is appended to the broadcast key shape.
    """
    h = hash_u64(*keys)
    if lanes is not None:
        lane_ids = np.arange(lanes, dtype=np.uint64)
        h = _mix(h[..., None] ^ _mix(lane_ids))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def keyed_normal(*keys, lanes: int | None = None) -> np.ndarray:
    """Standard normals via Box-Muller on two keyed uniform streams."""
    u1 = keyed_uniform(*keys, np.uint64(0x5EED), lanes=lanes)
    u2 = keyed_uniform(*keys, np.uint64(0xFACE), lanes=lanes)
    u1 = np.maximum(u1, 2.0 ** -53)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


class CounterRng:
    """Stateful convenience wrapper: a (seed, stream) pair plus a call counter.

    State is three integers, so checkpoints capture it exactly.
    """

    def __init__(self, seed: int, stream: int = 0, counter: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self.counter = int(counter)

    def _next_key(self) -> int:
        c = self.counter
        self.counter += 1
        return c

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray | float:
        lanes = int(np.prod(size)) if size is not None else 1
        u = keyed_uniform(self.seed, self.stream, self._next_key(), lanes=lanes)
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def normal(self, size=None) -> np.ndarray | float:
        lanes = int(np.prod(size)) if size is not None else 1
        z = keyed_normal(self.seed, self.stream, self._next_key(), lanes=lanes)
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def exponential(self, mean: float, size=None) -> np.ndarray | float:
        lanes = int(np.prod(size)) if size is not None else 1
        u = keyed_uniform(self.seed, self.stream, self._next_key(), lanes=lanes)
        out = -mean * np.log(np.maximum(1.0 - u, 2.0 ** -53))
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        keys = keyed_uniform(self.seed, self.stream, self._next_key(), lanes=n)
        return np.argsort(keys, kind="stable")

    def integers(self, low: int, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in [low, high)."""
        lanes = int(np.prod(size)) if size is not None else 1
        u = keyed_uniform(self.seed, self.stream, self._next_key(), lanes=lanes)
        out = (low + np.floor(u * (high - low))).astype(np.int64)
        if size is None:
            return int(out[0])
        return out.reshape(size)

    def state_dict(self) -> dict:
        return {"seed": self.seed, "stream": self.stream, "counter": self.counter}

    @classmethod
    def from_state(cls, state: dict) -> "CounterRng":
        return cls(state["seed"], state["stream"], state["counter"])
