"""Competing digital gradient-compression schemes with rate accounting.

Sign quantization (1 bit/dimension, magnitude restored from a side scalar),
stochastic ternarization (levels {-1, 0, +1} scaled by the max magnitude),
and a sparsifying scheme that keeps the q highest and q lowest entries and
replaces the dominant sign group by its mean.  Rates feed the same
capacity-region feasibility checks as the multi-level quantizer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from macquant.channel import MacSpec, is_feasible, subset_constraints
from macquant.quantizer import QuantizerRng

__all__ = [
    "InfeasibleTopQError",
    "SignPayload",
    "TernaryPayload",
    "TopQConfig",
    "TopQPayload",
    "log2_binom",
    "max_feasible_q",
    "sign_quantize",
    "sign_rate",
    "terngrad_quantize",
    "terngrad_rate",
    "topq_quantize",
    "topq_rate",
]


class InfeasibleTopQError(Exception):
    """The capacity region admits no q >= 1 for the sparsifying scheme."""


@dataclass(frozen=True)
class TopQConfig:
    """Budget for the sparsifying baseline: q survivors per sign side, c scalar bits."""

    q: int
    scalar_bits: int = 32

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.scalar_bits < 1:
            raise ValueError("scalar_bits must be >= 1")


@dataclass(frozen=True)
class SignPayload:
    signs: np.ndarray  # int8 entries in {-1, +1}
    scale: float       # mean |g|, sent at full resolution

    def dequantize(self) -> np.ndarray:
        return self.scale * self.signs.astype(np.float64)


@dataclass(frozen=True)
class TernaryPayload:
    levels: np.ndarray  # int8 entries in {-1, 0, +1}
    scale: float        # max |g|

    def dequantize(self) -> np.ndarray:
        return self.scale * self.levels.astype(np.float64)


@dataclass(frozen=True)
class TopQPayload:
    dim: int
    indices: np.ndarray  # sorted positions of the surviving group
    value: float         # the group mean every survivor is set to

    def dequantize(self) -> np.ndarray:
        out = np.zeros(self.dim)
        out[self.indices] = self.value
        return out


def _check_vector(g) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 1 or g.size == 0:
        raise ValueError("gradient must be a nonempty 1-D vector")
    if not np.all(np.isfinite(g)):
        raise ValueError("gradient entries must be finite")
    return g


def sign_quantize(g) -> SignPayload:
    """Entry-wise sign in {-1, +1} (zero maps to +1) plus the mean-|g| scale.

    Deliberately biased: the magnitude information is collapsed to one
    scalar, matching how the scheme is used as a baseline.
    """
    g = _check_vector(g)
    signs = np.where(g >= 0, 1, -1).astype(np.int8)
    return SignPayload(signs=signs, scale=float(np.mean(np.abs(g))))


def sign_rate(d: int) -> float:
    return float(d)


def terngrad_quantize(g, rng: QuantizerRng, t: int = 0, m: int = 0) -> TernaryPayload:
    """Stochastic ternarization: entry i keeps its sign with probability |g_i|/max|g|.

    Scaling the levels by max|g| makes the dequantized vector an unbiased
    estimate of g.
    """
    g = _check_vector(g)
    scale = float(np.max(np.abs(g)))
    if scale == 0.0:
        return TernaryPayload(levels=np.zeros(g.size, dtype=np.int8), scale=0.0)
    u = rng.uniforms(t, m, g.size)
    keep = u < np.abs(g) / scale
    levels = (np.sign(g) * keep).astype(np.int8)
    return TernaryPayload(levels=levels, scale=scale)


def terngrad_rate(d: int) -> float:
    return d * math.log2(3.0)


def topq_quantize(g, cfg: TopQConfig) -> TopQPayload:
    """Keep the q highest and q lowest entries, then collapse the dominant sign group.

    Survivors split by sign; if the positive group's mean exceeds the
    magnitude of the negative group's mean, every positive survivor is set
    to that mean and negative survivors are zeroed (mirrored otherwise).
    Ties at the q-th value break toward the lowest index.
    """
    g = _check_vector(g)
    d = g.size
    if 2 * cfg.q > d:
        raise ValueError(f"need 2q <= d, got q={cfg.q}, d={d}")
    top = np.argsort(-g, kind="stable")[: cfg.q]
    bottom = np.argsort(g, kind="stable")[: cfg.q]
    survivors = np.union1d(top, bottom)
    vals = g[survivors]
    pos = vals > 0
    neg = vals < 0
    a_pos = float(vals[pos].mean()) if pos.any() else 0.0
    a_neg = float(vals[neg].mean()) if neg.any() else 0.0
    if a_pos >= abs(a_neg):
        winners = survivors[pos]
        value = a_pos
    else:
        winners = survivors[neg]
        value = a_neg
    return TopQPayload(dim=d, indices=np.sort(winners), value=value)


def log2_binom(d: int, q: int) -> float:
    """log2 of the binomial coefficient via log-gamma."""
    if not 0 <= q <= d:
        raise ValueError(f"need 0 <= q <= d, got q={q}, d={d}")
    return (math.lgamma(d + 1) - math.lgamma(q + 1) - math.lgamma(d - q + 1)) / math.log(2.0)


def topq_rate(d: int, q: int, scalar_bits: int) -> float:
    """Per-user cost of describing the survivor set plus the c-bit scalar."""
    return log2_binom(d, q) + scalar_bits


def max_feasible_q(spec: MacSpec, scalar_bits: int) -> int:
    """Largest common q whose rate tuple fits the capacity region; 0 if none.

    The rate log2 C(d, q) + c is increasing in q up to d/2, so binary
    search applies; q is capped structurally at d // 2.
    """
    cons = subset_constraints(spec)
    d = spec.dim

    def ok(q: int) -> bool:
        rate = topq_rate(d, q, scalar_bits)
        return is_feasible(spec, [rate] * spec.num_users, cons)

    lo, hi = 1, d // 2
    if hi < 1 or not ok(1):
        return 0
    if ok(hi):
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return lo
