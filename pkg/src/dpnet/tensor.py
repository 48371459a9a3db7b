"""Dense float64 arrays, seeded random streams, and parameter initialization.

Tensors are plain ``numpy.ndarray`` objects with dtype float64 laid out
row-major (C order). Feature maps are channel-major: ``[C, H, W]`` for a
single sample and ``[N, C, H, W]`` for a batch.

Random streams use numpy's Philox4x64 counter-based generator. A stream is
identified by a tuple of non-negative integers (for example
``(seed, epoch, sample_index)``), hashed through ``numpy.random.SeedSequence``
into a Philox key, so any sub-stream can be reconstructed without drawing
from any other stream first.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

DTYPE = np.float64

_ELEMENTWISE = {
    "max": np.maximum,
    "mul": np.multiply,
    "add": np.add,
}


class Rng:
    """Deterministic Philox4x64 stream keyed by ``(seed, *stream)``."""

    algorithm = "philox4x64-10"

    def __init__(self, seed: int, *stream: int):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
        if any(s < 0 for s in stream):
            raise ValueError(f"stream ids must be non-negative, got {stream}")
        self.seed = int(seed)
        self.stream = tuple(int(s) for s in stream)
        seq = np.random.SeedSequence([self.seed, *self.stream])
        self.generator = np.random.Generator(np.random.Philox(seq))

    def child(self, *stream: int) -> "Rng":
        """Independent sub-stream; does not consume draws from this one."""
        return Rng(self.seed, *self.stream, *stream)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.generator.normal(0.0, scale, size=shape)

    def uniform(self, low, high, shape=None):
        return self.generator.uniform(low, high, size=shape)

    def integers(self, low, high, shape=None):
        """Uniform integers in the closed range ``[low, high]``."""
        return self.generator.integers(low, high, size=shape, endpoint=True)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def he_init(rng: Rng, shape: Sequence[int], fan_in: int) -> np.ndarray:
    """Gaussian init with mean 0 and variance ``2 / fan_in``."""
    shape = tuple(int(s) for s in shape)
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    if not shape or any(s <= 0 for s in shape):
        raise ValueError(f"he_init needs a non-empty positive shape, got {shape}")
    return rng.normal(shape, scale=np.sqrt(2.0 / fan_in)).astype(DTYPE)


def elementwise(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact-shape entry-wise ``max``, ``mul`` or ``add``; no broadcasting."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return fn(a, b)


def flat_offset(index: Sequence[int], shape: Sequence[int]) -> int:
    """Row-major offset of a multi-index, by the strided formula."""
    if len(index) != len(shape):
        raise ValueError("index rank does not match shape rank")
    offset = 0
    for i, n in zip(index, shape):
        if not 0 <= i < n:
            raise IndexError(f"index {tuple(index)} out of bounds for {tuple(shape)}")
        offset = offset * n + i
    return offset


def unflat_offset(offset: int, shape: Sequence[int]) -> tuple:
    size = int(np.prod(shape))
    if not 0 <= offset < size:
        raise IndexError(f"offset {offset} out of bounds for {tuple(shape)}")
    index = []
    for n in reversed(shape):
        offset, i = divmod(offset, n)
        index.append(i)
    return tuple(reversed(index))


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
