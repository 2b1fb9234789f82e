"""Federated gradient-descent loop over a rate-limited MAC.

Each round, every user computes its full-batch local gradient and reports the
range endpoints to the parameter server; the server allocates quantization
budgets per the configured policy, users quantize and transmit, and the
server aggregates the decoded gradients and updates the model.  A bound
evaluator turns the logged per-round ranges and budgets into the
strong-convexity convergence guarantee for comparison against measured
suboptimality.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from macquant import baselines
from macquant.allocator import AllocationProblem, allocate, solve_uniform
from macquant.channel import MacSpec, subset_constraints, transmit
from macquant.quantizer import (
    QuantizerRng,
    analytic_bits,
    dequantize,
    quantize,
    variance_bound,
    wire_bits,
)

__all__ = [
    "ConstantRate",
    "InverseTimeRate",
    "LogisticLoss",
    "LossSpec",
    "Model",
    "POLICIES",
    "QuadraticLoss",
    "RoundMetrics",
    "SoftmaxLoss",
    "TrainingSetup",
    "UserDataset",
    "aggregate",
    "convergence_bound",
    "local_gradient",
    "per_round_second_moment",
    "run_training",
    "update",
]

POLICIES = ("mac-aware", "uniform", "full-resolution", "signsgd", "terngrad", "top-q")

_ALIASES = {
    "signsgd": "signsgd",
    "sign-sgd": "signsgd",
    "terngrad": "terngrad",
    "topq": "top-q",
    "top-q": "top-q",
    "mac-aware": "mac-aware",
    "mac_aware": "mac-aware",
    "uniform": "uniform",
    "full-resolution": "full-resolution",
    "full": "full-resolution",
}

# RNG stream ids; data/init streams are consumed in the CLI layer
STREAM_QUANT = 0
STREAM_TERNARY = 1
STREAM_DATA = 2
STREAM_INIT = 3

_FLOAT_BITS = 64  # full-resolution scalars on the side channel


def canonical_policy(name: str) -> str:
    key = str(name).strip().lower()
    if key not in _ALIASES:
        raise ValueError(f"unknown policy {name!r}; known: {', '.join(POLICIES)}")
    return _ALIASES[key]


# ---------------------------------------------------------------------------
# Data and losses
# ---------------------------------------------------------------------------

@dataclass
class UserDataset:
    """One user's local examples.

    For quadratic losses ``x`` holds target points (n, d) and ``weights`` an
    optional per-coordinate curvature vector; for classifiers ``x`` holds
    features (n, p) and ``y`` integer labels.
    """

    x: np.ndarray
    y: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError("x must be a (n >= 1, features) array")
        if self.y is not None:
            self.y = np.asarray(self.y)
            if self.y.shape != (self.x.shape[0],):
                raise ValueError("y must have one label per row of x")
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.x.shape[1],):
                raise ValueError("weights must match the feature dimension")
            if np.any(self.weights <= 0):
                raise ValueError("weights must be positive")

    @property
    def num_examples(self) -> int:
        return int(self.x.shape[0])


@dataclass(frozen=True)
class LossSpec:
    """Curvature/Lipschitz constants feeding the convergence bound."""

    kind: str
    lam: float
    mu: float
    lipschitz: float

    def __post_init__(self):
        if self.lam <= 0 or self.mu <= 0:
            raise ValueError("lam and mu must be > 0")
        if self.lam > self.mu:
            raise ValueError("strong convexity lam cannot exceed smoothness mu")
        if self.lipschitz <= 0:
            raise ValueError("lipschitz bound must be > 0")


class QuadraticLoss:
    """Mean proximity loss 0.5 * sum_j a_j (w_j - d_j)^2 per data point."""

    kind = "quadratic"

    def _weights(self, ds: UserDataset) -> np.ndarray:
        if ds.weights is None:
            return np.ones(ds.x.shape[1])
        return ds.weights

    def loss(self, w: np.ndarray, ds: UserDataset) -> float:
        diff = w[None, :] - ds.x
        return float(0.5 * np.mean(np.sum(self._weights(ds) * diff**2, axis=1)))

    def gradient(self, w: np.ndarray, ds: UserDataset) -> np.ndarray:
        return self._weights(ds) * (w - ds.x.mean(axis=0))

    def accuracy(self, w, ds):
        return None

    @staticmethod
    def curvature(datasets) -> tuple:
        """(lam, mu): extreme eigenvalues of the averaged diagonal Hessian."""
        stacked = []
        for ds in datasets:
            stacked.append(np.ones(ds.x.shape[1]) if ds.weights is None else ds.weights)
        h = np.mean(stacked, axis=0)
        return float(h.min()), float(h.max())

    @staticmethod
    def minimizer(datasets) -> np.ndarray:
        """Closed-form global optimum of the federated objective."""
        weights = []
        means = []
        for ds in datasets:
            a = np.ones(ds.x.shape[1]) if ds.weights is None else ds.weights
            weights.append(a)
            means.append(ds.x.mean(axis=0))
        weights = np.asarray(weights)
        means = np.asarray(means)
        return np.sum(weights * means, axis=0) / np.sum(weights, axis=0)


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


class LogisticLoss:
    """Binary cross-entropy for a linear model with bias; labels in {0, 1}."""

    kind = "logistic"

    def _scores(self, w, ds):
        return _augment(ds.x) @ w

    def loss(self, w, ds) -> float:
        z = self._scores(w, ds)
        y = ds.y.astype(np.float64)
        # log(1 + exp(z)) - y z, computed stably
        return float(np.mean(np.logaddexp(0.0, z) - y * z))

    def gradient(self, w, ds) -> np.ndarray:
        z = self._scores(w, ds)
        p = 1.0 / (1.0 + np.exp(-z))
        return _augment(ds.x).T @ (p - ds.y.astype(np.float64)) / ds.num_examples

    def accuracy(self, w, ds) -> float:
        return float(np.mean((self._scores(w, ds) > 0) == (ds.y > 0)))


class SoftmaxLoss:
    """Multiclass cross-entropy for a single linear layer with bias.

    Parameters are the flattened (num_classes, features + 1) weight matrix.
    """

    kind = "softmax"

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.num_classes = int(num_classes)

    def _logits(self, w, ds):
        xa = _augment(ds.x)
        wm = w.reshape(self.num_classes, xa.shape[1])
        return xa @ wm.T

    def loss(self, w, ds) -> float:
        z = self._logits(w, ds)
        zmax = z.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
        true = z[np.arange(z.shape[0]), ds.y.astype(int)]
        return float(np.mean(lse - true))

    def gradient(self, w, ds) -> np.ndarray:
        xa = _augment(ds.x)
        z = self._logits(w, ds)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(p.shape[0]), ds.y.astype(int)] -= 1.0
        return (p.T @ xa).ravel() / ds.num_examples

    def accuracy(self, w, ds) -> float:
        return float(np.mean(self._logits(w, ds).argmax(axis=1) == ds.y.astype(int)))


def local_gradient(loss, w: np.ndarray, dataset: UserDataset) -> np.ndarray:
    """Exact mean gradient over the user's full local dataset."""
    g = loss.gradient(np.asarray(w, dtype=np.float64), dataset)
    if g.shape != np.asarray(w).shape:
        raise ValueError(f"gradient shape {g.shape} does not match model shape {np.asarray(w).shape}")
    return g


# ---------------------------------------------------------------------------
# Model updates
# ---------------------------------------------------------------------------

@dataclass
class Model:
    w: np.ndarray
    t: int = 1

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if not np.all(np.isfinite(self.w)):
            raise ValueError("model parameters must be finite")
        if self.t < 1:
            raise ValueError("iteration counter starts at 1")


class InverseTimeRate:
    """eta_t = 1 / (lam * t), the strongly convex schedule."""

    def __init__(self, lam: float):
        if lam <= 0:
            raise ValueError("lam must be > 0")
        self.lam = float(lam)

    def eta(self, t: int) -> float:
        if t < 1:
            raise ValueError("t must be >= 1")
        return 1.0 / (self.lam * t)


class ConstantRate:
    def __init__(self, eta: float):
        if eta <= 0:
            raise ValueError("eta must be > 0")
        self.eta0 = float(eta)

    def eta(self, t: int) -> float:
        return self.eta0


def aggregate(quantized, num_users: int) -> np.ndarray:
    """Mean of the dequantized user gradients."""
    if len(quantized) != num_users:
        raise ValueError(f"expected {num_users} payloads, got {len(quantized)}")
    return np.mean([dequantize(q) for q in quantized], axis=0)


def update(model: Model, ghat: np.ndarray, schedule) -> Model:
    """One step w <- w - eta_t * ghat; rejects non-finite results."""
    ghat = np.asarray(ghat, dtype=np.float64)
    if ghat.shape != model.w.shape:
        raise ValueError("aggregated gradient shape mismatch")
    w_new = model.w - schedule.eta(model.t) * ghat
    if not np.all(np.isfinite(w_new)):
        raise ValueError(f"non-finite model update at t={model.t}")
    return Model(w_new, model.t + 1)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class RoundMetrics:
    """One training round: model quality after the update plus the round's
    quantization decisions and rate accounting."""

    t: int
    loss: float
    accuracy: Optional[float]
    grad_norm: float
    variance_term: float
    deltas: tuple
    budgets: tuple
    analytic_bits: float
    wire_bits: float


@dataclass
class TrainingSetup:
    spec: MacSpec
    loss: object
    datasets: list
    policy: str
    iterations: int
    seed: int
    schedule: object
    w0: Optional[np.ndarray] = None
    eval_every: int = 10
    topq_scalar_bits: int = 32
    count_range_overhead: bool = False

    def __post_init__(self):
        if len(self.datasets) != self.spec.num_users:
            raise ValueError(
                f"{len(self.datasets)} datasets for {self.spec.num_users} users"
            )
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        self.policy = canonical_policy(self.policy)
        if self.w0 is None:
            self.w0 = np.zeros(self.spec.dim)
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        if self.w0.shape != (self.spec.dim,):
            raise ValueError(f"w0 must have dim {self.spec.dim}")


def _global_loss(loss, w, datasets) -> float:
    return float(np.mean([loss.loss(w, ds) for ds in datasets]))


def _global_accuracy(loss, w, datasets):
    accs = [loss.accuracy(w, ds) for ds in datasets]
    if any(a is None for a in accs):
        return None
    sizes = np.array([ds.num_examples for ds in datasets], dtype=np.float64)
    return float(np.dot(accs, sizes) / sizes.sum())


def run_training(setup: TrainingSetup) -> list:
    """Run the federated loop for one policy; deterministic given the seed."""
    spec = setup.spec
    policy = setup.policy
    m_users = spec.num_users
    d = spec.dim
    cons = subset_constraints(spec)
    quant_rng = QuantizerRng(setup.seed, stream=STREAM_QUANT)
    tern_rng = QuantizerRng(setup.seed, stream=STREAM_TERNARY)

    # fixed-rate policies are checked against the region before training starts
    fixed_rates = None
    uniform_k = None
    topq_cfg = None
    if policy == "signsgd":
        fixed_rates = [baselines.sign_rate(d)] * m_users
        transmit(spec, fixed_rates, cons)
    elif policy == "terngrad":
        fixed_rates = [baselines.terngrad_rate(d)] * m_users
        transmit(spec, fixed_rates, cons)
    elif policy == "top-q":
        q = baselines.max_feasible_q(spec, setup.topq_scalar_bits)
        if q < 1:
            raise baselines.InfeasibleTopQError(
                "no q >= 1 fits the capacity region for every user"
            )
        topq_cfg = baselines.TopQConfig(q=q, scalar_bits=setup.topq_scalar_bits)
        fixed_rates = [baselines.topq_rate(d, q, setup.topq_scalar_bits)] * m_users
        transmit(spec, fixed_rates, cons)
    elif policy == "uniform":
        uniform_k = solve_uniform(spec)

    model = Model(setup.w0.copy(), t=1)
    history = []
    for t in range(1, setup.iterations + 1):
        grads = [local_gradient(setup.loss, model.w, ds) for ds in setup.datasets]
        gavg = np.mean(grads, axis=0)
        grad_norm = float(np.linalg.norm(gavg))
        deltas = tuple(float(g.max() - g.min()) for g in grads)

        overhead = 0.0
        if policy == "full-resolution":
            ghat = gavg
            budgets = (0,) * m_users
            a_bits = w_bits = float(m_users * d * _FLOAT_BITS)
            var_term = 0.0
        elif policy in ("mac-aware", "uniform"):
            if policy == "mac-aware":
                budgets = allocate(AllocationProblem(deltas, spec)).k_int
            else:
                budgets = (uniform_k,) * m_users
            rates = [analytic_bits(d, k) for k in budgets]
            transmit(spec, rates, cons)
            qs = [
                quantize(grads[m], budgets[m], quant_rng, t=t, m=m)
                for m in range(m_users)
            ]
            ghat = aggregate(qs, m_users)
            a_bits = float(sum(rates))
            w_bits = float(sum(wire_bits(d, k) for k in budgets))
            var_term = sum(
                variance_bound(deltas[m], budgets[m], d) for m in range(m_users)
            ) / m_users**2
            if setup.count_range_overhead:
                overhead = 2.0 * _FLOAT_BITS * m_users
        elif policy == "signsgd":
            payloads = [baselines.sign_quantize(g) for g in grads]
            transmit(spec, fixed_rates, cons)
            ghat = np.mean([p.dequantize() for p in payloads], axis=0)
            budgets = (2,) * m_users
            a_bits = w_bits = float(sum(fixed_rates))
            var_term = math.nan
            if setup.count_range_overhead:
                overhead = float(_FLOAT_BITS * m_users)
        elif policy == "terngrad":
            payloads = [
                baselines.terngrad_quantize(grads[m], tern_rng, t=t, m=m)
                for m in range(m_users)
            ]
            transmit(spec, fixed_rates, cons)
            ghat = np.mean([p.dequantize() for p in payloads], axis=0)
            budgets = (3,) * m_users
            a_bits = float(sum(fixed_rates))
            w_bits = float(m_users * 2 * d)
            var_term = math.nan
            if setup.count_range_overhead:
                overhead = float(_FLOAT_BITS * m_users)
        elif policy == "top-q":
            payloads = [baselines.topq_quantize(g, topq_cfg) for g in grads]
            transmit(spec, fixed_rates, cons)
            ghat = np.mean([p.dequantize() for p in payloads], axis=0)
            budgets = (0,) * m_users
            a_bits = float(sum(fixed_rates))
            w_bits = float(
                m_users
                * (
                    math.ceil(baselines.log2_binom(d, topq_cfg.q))
                    + topq_cfg.scalar_bits
                )
            )
            var_term = math.nan
        else:  # pragma: no cover
            raise ValueError(f"unhandled policy {policy}")

        model = update(model, ghat, setup.schedule)
        loss_val = _global_loss(setup.loss, model.w, setup.datasets)
        acc = None
        if t % setup.eval_every == 0 or t == setup.iterations:
            acc = _global_accuracy(setup.loss, model.w, setup.datasets)
        history.append(
            RoundMetrics(
                t=t,
                loss=loss_val,
                accuracy=acc,
                grad_norm=grad_norm,
                variance_term=float(var_term),
                deltas=deltas,
                budgets=tuple(int(k) for k in budgets),
                analytic_bits=a_bits + overhead,
                wire_bits=w_bits + overhead,
            )
        )
    return history


# ---------------------------------------------------------------------------
# Convergence bound
# ---------------------------------------------------------------------------

def per_round_second_moment(loss_spec: LossSpec, deltas, budgets, dim: int) -> np.ndarray:
    """Per-round second-moment bound: quantization variance over M^2 plus L^2."""
    deltas = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    budgets = np.atleast_2d(np.asarray(budgets, dtype=np.float64))
    if deltas.shape != budgets.shape:
        raise ValueError("deltas and budgets must have matching (T, M) shapes")
    if np.any(budgets < 2):
        raise ValueError("budgets must be >= 2")
    m_users = deltas.shape[1]
    var = dim * deltas**2 / (4.0 * (budgets - 1.0) ** 2)
    return var.sum(axis=1) / m_users**2 + loss_spec.lipschitz**2


def convergence_bound(loss_spec: LossSpec, deltas, budgets, dim: int) -> float:
    """Upper bound on expected suboptimality after T rounds of the 1/(lam t) schedule.

    Evaluates (2 mu / (lam^2 T^2)) * sum_t G_t^2 from the logged per-round
    dynamic ranges and budgets.
    """
    g2 = per_round_second_moment(loss_spec, deltas, budgets, dim)
    t_rounds = g2.shape[0]
    if t_rounds < 1:
        raise ValueError("need at least one round")
    return float(2.0 * loss_spec.mu / (loss_spec.lam**2 * t_rounds**2) * g2.sum())
