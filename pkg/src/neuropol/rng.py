"""Counter-based random streams shared by every stochastic component.

All sampling in the package goes through Philox substreams derived from a
64-bit user seed plus an integer path (e.g. ``(seed, sample_index)``), so
datasets and training runs are reproducible bit-for-bit and batches can be
generated out of order or in parallel.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, *path: int) -> int:
    """Collapse (seed, path...) into a single 64-bit Philox key."""
    key = _splitmix64(seed & _MASK64)
    for p in path:
        key = _splitmix64(key ^ _splitmix64(p & _MASK64))
    return key


def substream(seed: int, *path: int) -> np.random.Generator:
    """Independent generator for the given seed/path combination."""
    return np.random.Generator(np.random.Philox(key=stream_key(seed, *path)))


def uniform(gen: np.random.Generator, lo: float, hi: float, size=None) -> np.ndarray:
    return lo + (hi - lo) * gen.random(size)


def normal(gen: np.random.Generator, size=None) -> np.ndarray:
    """Standard normals via Box-Muller on the generator's uniform stream.

    Using an explicit Box-Muller keeps the draw sequence independent of any
    library-internal ziggurat tables, so streams stay stable across numpy
    versions.
    """
    shape = () if size is None else tuple(np.atleast_1d(size))
    n = int(np.prod(shape)) if shape else 1
    m = (n + 1) // 2
    # 1 - u in (0, 1] keeps the log finite.
    u1 = 1.0 - gen.random(m)
    u2 = gen.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
    if size is None:
        return float(z[0])
    return z.reshape(shape)
