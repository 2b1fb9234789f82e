"""Stochastic multi-level gradient quantization, codec, and variance accounting.

A gradient vector with dynamic range ``delta = g_max - g_min`` is quantized
onto ``k`` uniformly spaced levels; each entry rounds randomly to one of the
two adjacent levels with probabilities that make the result unbiased.  The
per-entry variance is at most ``delta^2 / (4 (k-1)^2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

__all__ = [
    "QuantizedGradient",
    "QuantizerRng",
    "analytic_bits",
    "decode_bits",
    "dequantize",
    "encode_bits",
    "level_value",
    "quantize",
    "variance_bound",
    "wire_bits",
]


@dataclass(frozen=True)
class QuantizedGradient:
    """Per-user quantizer output: range endpoints, budget, and level indices."""

    g_min: float
    g_max: float
    k: int
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"quantization budget k must be >= 2, got {self.k}")
        if not (math.isfinite(self.g_min) and math.isfinite(self.g_max)):
            raise ValueError("g_min/g_max must be finite")
        if self.g_max < self.g_min:
            raise ValueError(f"g_max ({self.g_max}) < g_min ({self.g_min})")
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("indices must be a nonempty 1-D sequence")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("indices must be integers")
        if idx.min() < 0 or idx.max() > self.k - 1:
            raise ValueError("indices out of range [0, k-1]")
        if self.g_max == self.g_min and idx.max() != 0:
            raise ValueError("degenerate range requires all-zero indices")
        object.__setattr__(self, "indices", idx)

    @property
    def delta(self) -> float:
        return self.g_max - self.g_min

    @property
    def dim(self) -> int:
        return int(self.indices.size)


class QuantizerRng:
    """Counter-based uniform random source keyed on (seed, stream, t, m, i).

    Built on the Philox counter-based generator: the draw for element ``i`` of
    round ``t`` and user ``m`` is position ``i`` of the stream keyed by
    (seed, stream, t, m), so identical coordinates always reproduce the same
    value regardless of evaluation order or vector length.  ``stream``
    separates independent consumers (quantizer draws, ternary draws, data
    generation, ...) that share one experiment seed.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= stream < 2**8:
            raise ValueError("stream must fit in 8 bits")
        self.seed = int(seed) & (2**64 - 1)
        self.stream = int(stream)

    def _key(self, t: int, m: int) -> np.ndarray:
        if not 0 <= t < 2**32:
            raise ValueError("iteration index t must fit in 32 bits")
        if not 0 <= m < 2**24:
            raise ValueError("user index m must fit in 24 bits")
        word = (self.stream << 56) | (t << 24) | m
        return np.array([self.seed, word], dtype=np.uint64)

    def uniforms(self, t: int, m: int, n: int) -> np.ndarray:
        """First ``n`` uniform [0,1) draws of the (seed, stream, t, m) stream."""
        return Generator(Philox(key=self._key(t, m))).random(n)

    def uniform(self, t: int, m: int, i: int) -> float:
        """The single draw at element coordinate ``i``."""
        return float(self.uniforms(t, m, i + 1)[i])


def level_value(g_min: float, delta: float, k: int, r: int) -> float:
    """Value of quantization level ``r``: g_min + r * delta / (k - 1).

    Level 0 is exactly ``g_min`` and level ``k - 1`` is exactly
    ``g_min + delta``.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if not 0 <= r <= k - 1:
        raise ValueError(f"level index {r} out of range [0, {k - 1}]")
    # r/(k-1) is exactly 0.0 and 1.0 at the endpoints.
    return g_min + (r / (k - 1)) * delta


def quantize(g, k: int, rng: QuantizerRng, t: int = 0, m: int = 0) -> QuantizedGradient:
    """Stochastically round each entry of ``g`` onto a k-level grid.

    An entry in [G(r), G(r+1)) maps to r+1 with probability
    (g_i - G(r)) / (G(r+1) - G(r)), else to r; entries exactly on a level
    stay there deterministically, and the maximum always maps to k - 1.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("gradient must be a nonempty 1-D vector")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient entries must be finite")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")

    g_min = float(g.min())
    g_max = float(g.max())
    delta = g_max - g_min
    if delta == 0.0:
        idx = np.zeros(g.size, dtype=np.int64)
        return QuantizedGradient(g_min, g_max, k, idx)

    x = (g - g_min) * ((k - 1) / delta)
    np.clip(x, 0.0, k - 1, out=x)
    low = np.floor(x).astype(np.int64)
    np.minimum(low, k - 1, out=low)
    frac = x - low
    u = rng.uniforms(t, m, g.size)
    idx = low + (u < frac)
    return QuantizedGradient(g_min, g_max, k, idx)


def dequantize(q: QuantizedGradient) -> np.ndarray:
    """Map level indices back to gradient values in [g_min, g_max]."""
    if q.delta == 0.0:
        return np.full(q.dim, q.g_min)
    values = q.g_min + (q.indices / (q.k - 1)) * q.delta
    # Guard against 1-ulp drift above g_max at the top level.
    np.clip(values, q.g_min, q.g_max, out=values)
    return values


def variance_bound(delta: float, k: int, d: int) -> float:
    """Worst-case variance of a quantized d-vector: d * delta^2 / (4 (k-1)^2)."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if delta < 0:
        raise ValueError("delta must be >= 0")
    if d < 1:
        raise ValueError("d must be >= 1")
    return d * delta * delta / (4.0 * (k - 1) ** 2)


def analytic_bits(d: int, k) -> float:
    """Information-theoretic payload size d * log2(k), used for rate checks."""
    return d * math.log2(k)


def wire_bits(d: int, k: int) -> int:
    """Fixed-width wire payload size d * ceil(log2 k), before byte padding."""
    return d * _field_width(k)


def _field_width(k: int) -> int:
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    return max(1, (k - 1).bit_length())


def encode_bits(q: QuantizedGradient) -> bytes:
    """Pack level indices into a byte string.

    Layout: each index occupies a fixed ceil(log2 k)-bit field, most
    significant bit first; fields appear in element order; the last byte is
    zero-padded.  Reading the byte string's bits left to right therefore
    reproduces the index stream.
    """
    w = _field_width(q.k)
    shifts = np.arange(w - 1, -1, -1, dtype=np.int64)
    bits = (q.indices[:, None] >> shifts[None, :]) & 1
    return np.packbits(bits.astype(np.uint8).ravel()).tobytes()


def decode_bits(payload: bytes, d: int, k: int, g_min: float, g_max: float) -> QuantizedGradient:
    """Inverse of :func:`encode_bits`; rejects truncated payloads and indices >= k."""
    if d < 1:
        raise ValueError("d must be >= 1")
    w = _field_width(k)
    nbits = d * w
    if len(payload) * 8 < nbits:
        raise ValueError(f"payload truncated: need {nbits} bits, got {len(payload) * 8}")
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8), count=nbits)
    fields = bits.reshape(d, w)
    weights = 1 << np.arange(w - 1, -1, -1, dtype=np.int64)
    idx = fields @ weights
    if idx.max() > k - 1:
        raise ValueError(f"decoded index {int(idx.max())} >= k ({k})")
    return QuantizedGradient(g_min, g_max, k, idx)
