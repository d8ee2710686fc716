"""
Random number plumbing.

Samplers in this package only call ``rng.random(shape)`` with the first axis
equal to the number of items being sampled, so they accept either a
``numpy.random.Generator`` or a ``CounterStream``. The counter stream derives
every number from (item key, draw counter) and is therefore independent of
evaluation order, batching and threading.
"""

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def hash_keys(*keys) -> np.ndarray:
    """Combines broadcastable integer keys into one 64-bit hash per element."""
    arrays = np.broadcast_arrays(*[np.asarray(k).astype(np.uint64) for k in keys])
    h = np.zeros(arrays[0].shape, dtype=np.uint64)
    for k in arrays:
        h = splitmix64(h ^ splitmix64(k))
    return h


def to_unit_float(h: np.ndarray) -> np.ndarray:
    """Top 53 bits to a float in [0, 1)."""
    return (np.asarray(h, dtype=np.uint64) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


class CounterStream:
    """Generator-compatible ``random`` keyed per item."""

    def __init__(self, keys: np.ndarray, counter: int = 0):
        self.keys = np.asarray(keys, dtype=np.uint64).reshape(-1)
        self.counter = counter

    def __len__(self) -> int:
        return self.keys.size

    def random(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        if shape[0] != self.keys.size:
            raise ValueError(f"CounterStream has {self.keys.size} items, asked for leading dimension {shape[0]}")
        per_item = int(np.prod(shape[1:], dtype=np.int64)) if len(shape) > 1 else 1
        draws = np.arange(self.counter, self.counter + per_item, dtype=np.uint64)
        self.counter += per_item
        values = to_unit_float(splitmix64(self.keys[:, None] ^ splitmix64(draws)[None, :]))
        return values.reshape(shape)

    def subset(self, mask: np.ndarray) -> "CounterStream":
        """Stream over a subset of items that continues the same counter."""
        return CounterStream(self.keys[mask], self.counter)


def spawn_generator(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator stream for (seed, keys), e.g. one per render tile."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def radical_inverse(base: int, indices: np.ndarray) -> np.ndarray:
    """Van der Corput radical inverse of non-negative integers."""
    n = np.asarray(indices, dtype=np.int64).copy()
    result = np.zeros(n.shape, dtype=np.float64)
    scale = 1.0 / base
    while np.any(n > 0):
        result += (n % base) * scale
        n //= base
        scale /= base
    return result


def halton_pairs(count: int, shift: np.ndarray | None = None) -> np.ndarray:
    """
    First ``count`` points of the (2, 3) Halton sequence, optionally
    Cranley-Patterson rotated by ``shift`` (..., 2). Returns (..., count, 2).
    """
    i = np.arange(1, count + 1)
    points = np.stack([radical_inverse(2, i), radical_inverse(3, i)], axis=-1)
    if shift is None:
        return points
    return np.mod(points + np.asarray(shift)[..., None, :], 1.0)
