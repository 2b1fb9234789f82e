"""Gaussian MAC capacity region and rate-feasibility checks.

Every nonempty user subset S is rate-limited by the sum capacity
``C_S = 0.5 * log2(1 + sum_{m in S} P_m / noise_var)`` bits per channel use;
a rate tuple is feasible iff each subset's total stays within ``s * C_S``
over the ``s`` channel uses of one iteration.  Transport itself is modeled
as an error-free bit pipe gated by feasibility.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

__all__ = [
    "InfeasibleRateError",
    "MacSpec",
    "budget_cap",
    "is_feasible",
    "subset_constraints",
    "sum_capacity",
    "transmit",
]

# Boundary rates count as feasible; the relative slack only absorbs float
# round-off so exactly-tight allocations are not spuriously rejected.
_FEAS_RTOL = 1e-12

_MAX_USERS_EXHAUSTIVE = 20


class InfeasibleRateError(Exception):
    """A rate tuple violates the capacity region; carries the tightest violated subset."""

    def __init__(self, subset, total_rate: float, cap: float):
        self.subset = tuple(sorted(subset))
        self.total_rate = float(total_rate)
        self.cap = float(cap)
        users = ", ".join(str(m) for m in self.subset)
        super().__init__(
            f"rate {self.total_rate:.6g} bits exceeds cap {self.cap:.6g} bits "
            f"for user subset {{{users}}}"
        )


@dataclass(frozen=True)
class MacSpec:
    """Gaussian MAC description: per-user powers, noise variance, channel uses, model dim."""

    powers: tuple
    noise_var: float = 1.0
    channel_uses: int = 1
    dim: int = 1

    def __post_init__(self):
        powers = tuple(float(p) for p in self.powers)
        if len(powers) < 1:
            raise ValueError("need at least one user")
        if any(p < 0 or not math.isfinite(p) for p in powers):
            raise ValueError("powers must be finite and >= 0")
        if not self.noise_var > 0:
            raise ValueError("noise_var must be > 0")
        if int(self.channel_uses) < 1:
            raise ValueError("channel_uses must be >= 1")
        if int(self.dim) < 1:
            raise ValueError("dim must be >= 1")
        object.__setattr__(self, "powers", powers)
        object.__setattr__(self, "noise_var", float(self.noise_var))
        object.__setattr__(self, "channel_uses", int(self.channel_uses))
        object.__setattr__(self, "dim", int(self.dim))

    @property
    def num_users(self) -> int:
        return len(self.powers)

    def to_dict(self) -> dict:
        return {
            "powers": list(self.powers),
            "noise_var": self.noise_var,
            "channel_uses": self.channel_uses,
            "dim": self.dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MacSpec":
        return cls(
            powers=tuple(d["powers"]),
            noise_var=d.get("noise_var", 1.0),
            channel_uses=d["channel_uses"],
            dim=d["dim"],
        )


def _check_subset(spec: MacSpec, subset) -> tuple:
    users = tuple(sorted(set(int(m) for m in subset)))
    if not users:
        raise ValueError("subset must be nonempty")
    if users[0] < 0 or users[-1] >= spec.num_users:
        raise ValueError(f"subset {users} out of range for {spec.num_users} users")
    return users


def sum_capacity(spec: MacSpec, subset) -> float:
    """Subset sum capacity 0.5 * log2(1 + sum P_m / noise_var), bits per channel use."""
    users = _check_subset(spec, subset)
    snr = sum(spec.powers[m] for m in users) / spec.noise_var
    return 0.5 * math.log2(1.0 + snr)


def budget_cap(spec: MacSpec, subset) -> float:
    """Cap on the product of budgets prod_{m in S} k_m: 2^(s * C_S / d)."""
    exponent = spec.channel_uses * sum_capacity(spec, subset) / spec.dim
    try:
        return 2.0**exponent
    except OverflowError:
        return math.inf


def subset_constraints(spec: MacSpec):
    """All (subset, total-bit cap s * C_S) pairs, one per nonempty subset.

    The returned list can also be built by hand to inject a non-Gaussian
    capacity region into :func:`is_feasible`.
    """
    m = spec.num_users
    if m > _MAX_USERS_EXHAUSTIVE:
        raise ValueError(f"subset enumeration limited to {_MAX_USERS_EXHAUSTIVE} users, got {m}")
    out = []
    for size in range(1, m + 1):
        for users in combinations(range(m), size):
            out.append((users, spec.channel_uses * sum_capacity(spec, users)))
    return out


def _violations(rates, constraints):
    rates = np.asarray(rates, dtype=np.float64)
    worst = None
    for users, cap in constraints:
        total = float(rates[list(users)].sum())
        excess = total - cap * (1.0 + _FEAS_RTOL) - _FEAS_RTOL
        if excess > 0 and (worst is None or excess > worst[3]):
            worst = (users, total, cap, excess)
    return worst


def is_feasible(spec: MacSpec, rates, constraints=None) -> bool:
    """True iff every nonempty subset's summed rate is within its capacity cap."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != (spec.num_users,):
        raise ValueError(f"expected {spec.num_users} rates, got shape {rates.shape}")
    if np.any(rates < 0):
        raise ValueError("rates must be nonnegative")
    if constraints is None:
        constraints = subset_constraints(spec)
    return _violations(rates, constraints) is None


def transmit(spec: MacSpec, rates, constraints=None) -> None:
    """Deliver per-user payloads losslessly, or raise naming the tightest violated subset."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != (spec.num_users,):
        raise ValueError(f"expected {spec.num_users} rates, got shape {rates.shape}")
    if np.any(rates < 0):
        raise ValueError("rates must be nonnegative")
    if constraints is None:
        constraints = subset_constraints(spec)
    worst = _violations(rates, constraints)
    if worst is not None:
        users, total, cap, _ = worst
        raise InfeasibleRateError(users, total, cap)
