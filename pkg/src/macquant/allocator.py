"""Per-user quantization budget allocation against the MAC capacity region.

The integer program minimizes the total quantization variance
``sum_m d * delta_m^2 / (4 (k_m - 1)^2)`` subject to every user subset's
rate cap.  It is relaxed to real budgets ``k_m >= 2`` and solved in the
log domain ``b_m = log2 k_m`` where all capacity constraints are linear and
the objective stays convex; a two-user instance also has a closed-form
characterization solved by bisection.  Relaxed solutions are rounded
greedily to integers, and a small-scale exhaustive search provides the
exact integer optimum for validation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy import linalg as sla
from scipy import optimize as sopt

from macquant.channel import MacSpec, budget_cap, is_feasible, subset_constraints

__all__ = [
    "Allocation",
    "AllocationProblem",
    "InfeasibleBudgetError",
    "allocate",
    "kkt_residual",
    "objective",
    "round_allocation",
    "solve_exhaustive",
    "solve_relaxed",
    "solve_two_user",
    "solve_uniform",
    "two_user_transition_ratios",
]

_LN2 = math.log(2.0)
_ENUM_GUARD = 10**7


class InfeasibleBudgetError(Exception):
    """The capacity region cannot accommodate the minimum budget k=2 for every user."""


@dataclass(frozen=True)
class AllocationProblem:
    """Per-user gradient dynamic ranges plus the channel they share."""

    deltas: tuple
    spec: MacSpec

    def __post_init__(self):
        deltas = tuple(float(x) for x in self.deltas)
        if len(deltas) != self.spec.num_users:
            raise ValueError(
                f"got {len(deltas)} deltas for {self.spec.num_users} users"
            )
        if any(x < 0 or not math.isfinite(x) for x in deltas):
            raise ValueError("deltas must be finite and >= 0")
        object.__setattr__(self, "deltas", deltas)


@dataclass(frozen=True)
class Allocation:
    """Integer budgets with the relaxed solution they came from."""

    k_int: tuple
    k_real: tuple
    rates: tuple
    objective: float


def objective(problem: AllocationProblem, k) -> float:
    """Total quantization variance sum_m d * delta_m^2 / (4 (k_m - 1)^2)."""
    k = np.asarray(k, dtype=np.float64)
    if k.shape != (problem.spec.num_users,):
        raise ValueError(f"expected {problem.spec.num_users} budgets")
    if np.any(k < 2):
        raise ValueError("budgets must be >= 2")
    deltas = np.asarray(problem.deltas)
    return float(np.sum(problem.spec.dim * deltas**2 / (4.0 * (k - 1.0) ** 2)))


def _rates_for(spec: MacSpec, k) -> np.ndarray:
    return spec.dim * np.log2(np.asarray(k, dtype=np.float64))


# ---------------------------------------------------------------------------
# Relaxed problem in the log domain
# ---------------------------------------------------------------------------

def _check_min_budget_feasible(spec: MacSpec, ctil):
    for users, c in ctil:
        if len(users) > c * (1 + 1e-12) + 1e-12:
            raise InfeasibleBudgetError(
                f"subset {users} cannot carry 1 bit per user per dimension "
                f"(cap {c:.6g} < {len(users)})"
            )


def _obj_terms(c, b):
    u = np.exp2(b)
    um1 = u - 1.0
    f = float(np.sum(c / um1**2))
    g = -2.0 * _LN2 * c * u / um1**3
    h = _LN2**2 * c * u * (4.0 * u + 2.0) / um1**4
    return f, g, h


def _active_rows(rows, rhs, b, tol=1e-5):
    resid = rows @ b - rhs
    return np.where(resid >= -tol * np.maximum(1.0, np.abs(rhs)))[0]


def _independent(rows):
    """Indices of a maximal linearly independent subset of rows."""
    if len(rows) == 0:
        return np.array([], dtype=int)
    _, _, piv = sla.qr(rows.T, pivoting=True)
    rank = np.linalg.matrix_rank(rows)
    return np.sort(piv[:rank])


def _newton_equality(c, rows, rhs, b):
    """Minimize the separable objective subject to rows @ b = rhs."""
    n = b.size
    k = len(rows)
    lam = np.zeros(k)
    for _ in range(100):
        _, g, h = _obj_terms(c, b)
        kkt = np.zeros((n + k, n + k))
        kkt[:n, :n] = np.diag(h)
        if k:
            kkt[:n, n:] = rows.T
            kkt[n:, :n] = rows
        res_stat = g + (rows.T @ lam if k else 0.0)
        res_feas = rows @ b - rhs if k else np.zeros(0)
        scale = max(1.0, float(np.abs(g).max()))
        if np.abs(res_stat).max() <= 1e-12 * scale and (
            k == 0 or np.abs(res_feas).max() <= 1e-12
        ):
            break
        target = np.concatenate([-g, rhs - (rows @ b if k else np.zeros(0))])
        try:
            sol = np.linalg.solve(kkt, target)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(kkt, target, rcond=None)
        db = sol[:n]
        lam_new = sol[n:]
        alpha = 1.0
        # keep 2^b - 1 safely positive
        bad = db < 0
        if np.any(bad):
            alpha = min(1.0, float(np.min((0.5 - b[bad]) / db[bad])) * 0.9)
            alpha = max(alpha, 1e-8)
        merit0 = float(np.abs(res_stat).max() / scale + (np.abs(res_feas).max() if k else 0.0))
        while alpha > 1e-10:
            b_try = b + alpha * db
            _, g_try, _ = _obj_terms(c, b_try)
            rs = g_try + (rows.T @ lam_new if k else 0.0)
            rf = rows @ b_try - rhs if k else np.zeros(0)
            merit = float(np.abs(rs).max() / scale + (np.abs(rf).max() if k else 0.0))
            if merit <= merit0 * (1 - 1e-4) or merit < 1e-12:
                break
            alpha *= 0.5
        b = b + alpha * db
        lam = lam_new
    return b, lam


def _solve_log_domain(c, cons, tol):
    """Minimize sum c_m / (2^b_m - 1)^2 over the polytope {A b <= caps, b >= 1}.

    Returns the optimal b.  Interior-quality solutions from scipy are
    polished with an active-set Newton loop so the KKT residual reaches
    machine precision.
    """
    n = c.size
    scale = float(c.max())
    c = c / scale

    # all inequality rows in "a @ b <= r" form: subsets first, then floors -b_m <= -1
    sub_rows = np.zeros((len(cons), n))
    sub_rhs = np.zeros(len(cons))
    ub = np.full(n, np.inf)
    for i, (T, cap) in enumerate(cons):
        sub_rows[i, list(T)] = 1.0
        sub_rhs[i] = cap
        if len(T) == 1:
            ub[T[0]] = min(ub[T[0]], cap)
    rows = np.vstack([sub_rows, -np.eye(n)])
    rhs = np.concatenate([sub_rhs, -np.ones(n)])

    if n == 1:
        return np.array([max(1.0, float(sub_rhs.min()))])

    # strictly interior start: 1 + tau * (ub - 1), shrunk to satisfy every subset
    tau = 1.0
    span = ub - 1.0
    for i in range(len(cons)):
        grow = float(sub_rows[i] @ span)
        slackc = sub_rhs[i] - float(sub_rows[i].sum())
        if grow > 0:
            tau = min(tau, slackc / grow)
    b0 = 1.0 + max(0.0, 0.9 * tau) * span

    def fun(b):
        return _obj_terms(c, b)[0]

    def jac(b):
        return _obj_terms(c, b)[1]

    def hess(b):
        return np.diag(_obj_terms(c, b)[2])

    b = b0
    try:
        res = sopt.minimize(
            fun,
            b0,
            jac=jac,
            hess=hess,
            method="trust-constr",
            bounds=sopt.Bounds(np.ones(n), ub),
            constraints=[sopt.LinearConstraint(sub_rows, -np.inf, sub_rhs)],
            options={"gtol": 1e-12, "xtol": 1e-14, "maxiter": 2000},
        )
        b = np.maximum(res.x, 1.0)
    except Exception:
        pass

    # active-set polish
    work = set(_active_rows(rows, rhs, b).tolist())
    for _ in range(8 * (len(rows) + 1)):
        wlist = sorted(work)
        wrows = rows[wlist]
        keep = _independent(wrows)
        wlist = [wlist[i] for i in keep]
        wrows = rows[wlist]
        wrhs = rhs[wlist]
        b_new, lam = _newton_equality(c, wrows, wrhs, b.copy())
        # drop the most negative multiplier, if any
        if len(lam) and lam.min() < -1e-9:
            work.discard(wlist[int(np.argmin(lam))])
            continue
        viol = rows @ b_new - rhs
        worst = int(np.argmax(viol))
        if viol[worst] > 1e-10 * max(1.0, abs(rhs[worst])):
            b = b_new
            work = set(wlist)
            work.add(worst)
            continue
        b = b_new
        break
    return np.maximum(b, 1.0)


def solve_relaxed(problem: AllocationProblem, tol: float = 1e-9) -> np.ndarray:
    """Real-valued budgets minimizing the relaxed problem; zero-range users get k=2.

    The capacity constraints become linear under b = log2 k, so the solve
    runs in the log domain and converts back.  Raises
    :class:`InfeasibleBudgetError` when some user cannot even get k = 2.
    """
    spec = problem.spec
    m_users = spec.num_users
    deltas = np.asarray(problem.deltas)
    ctil = [(users, cap / spec.dim) for users, cap in subset_constraints(spec)]
    _check_min_budget_feasible(spec, ctil)

    active = [m for m in range(m_users) if deltas[m] > 0]
    b_full = np.ones(m_users)
    if active:
        pos = {m: j for j, m in enumerate(active)}
        reduced = {}
        for users, cap in ctil:
            t = tuple(pos[m] for m in users if m in pos)
            slack = cap - (len(users) - len(t))
            if t:
                reduced[t] = min(reduced.get(t, math.inf), slack)
        cons = sorted(reduced.items())
        c = spec.dim * deltas[active] ** 2 / 4.0
        b_act = _solve_log_domain(np.asarray(c, dtype=np.float64), cons, tol)
        b_full[active] = b_act

    k = np.exp2(b_full)
    resid = kkt_residual(problem, k)
    if resid > tol:
        raise RuntimeError(f"relaxed solve stalled at KKT residual {resid:.3e} > {tol:g}")
    return k


def kkt_residual(problem: AllocationProblem, k) -> float:
    """Relative KKT residual of a candidate relaxed solution.

    Multipliers for the active constraints are fit by nonnegative least
    squares; the residual is the max of the relative stationarity gap and
    any primal constraint violation.
    """
    spec = problem.spec
    n = spec.num_users
    b = np.log2(np.asarray(k, dtype=np.float64))
    deltas = np.asarray(problem.deltas)
    c = spec.dim * deltas**2 / 4.0
    cscale = float(c.max()) if c.max() > 0 else 1.0
    _, g, _ = _obj_terms(c / cscale, b)

    rows_list = []
    rhs_list = []
    for users, cap in subset_constraints(spec):
        a = np.zeros(n)
        a[list(users)] = 1.0
        rows_list.append(a)
        rhs_list.append(cap / spec.dim)
    rows = np.vstack([np.array(rows_list), -np.eye(n)])
    rhs = np.concatenate([np.array(rhs_list), -np.ones(n)])

    resid = rows @ b - rhs
    primal = float(np.max(resid / np.maximum(1.0, np.abs(rhs))))
    act = _active_rows(rows, rhs, b, tol=1e-7)
    gscale = max(1.0, float(np.abs(g).max()))
    if len(act):
        lam, _ = sopt.nnls(rows[act].T, -g)
        stat = float(np.abs(g + rows[act].T @ lam).max()) / gscale
    else:
        stat = float(np.abs(g).max()) / gscale
    return max(stat, primal, 0.0)


# ---------------------------------------------------------------------------
# Two-user closed form
# ---------------------------------------------------------------------------

def _phi(k1: float, cap_prod: float) -> float:
    return math.sqrt(cap_prod * k1 * (k1 - 1.0) ** 3 / (cap_prod - k1) ** 3)


def solve_two_user(delta1: float, delta2: float, spec: MacSpec):
    """Relaxed optimum for two users from the closed-form budget-ratio equation.

    With the product cap K = 2^(s*C12/d) active, the optimal k1 solves
    phi(k1) = sqrt(K k1 (k1-1)^3 / (K-k1)^3) = delta1/delta2; k2 = K/k1.
    The pair is then clamped to the box [2, 2^(s*C1/d)] x [2, 2^(s*C2/d)]:
    a budget over its individual cap is pinned there and the product cap is
    re-split, and a budget under 2 is pinned at 2 with the remainder handed
    to the other user.
    """
    if spec.num_users != 2:
        raise ValueError("solve_two_user requires exactly 2 users")
    if delta1 < 0 or delta2 < 0:
        raise ValueError("deltas must be >= 0")
    cap1 = budget_cap(spec, [0])
    cap2 = budget_cap(spec, [1])
    cap_prod = budget_cap(spec, [0, 1])
    if cap_prod < 4.0 or cap1 < 2.0 or cap2 < 2.0:
        raise InfeasibleBudgetError(
            f"caps ({cap1:.4g}, {cap2:.4g}, product {cap_prod:.4g}) cannot fit k >= 2 for both users"
        )

    if delta1 == 0.0 and delta2 == 0.0:
        return 2.0, 2.0
    if delta1 == 0.0:
        return 2.0, min(cap_prod / 2.0, cap2)
    if delta2 == 0.0:
        return min(cap_prod / 2.0, cap1), 2.0

    ratio = delta1 / delta2
    eps = 1e-9 * cap_prod
    lo, hi = 1.0 + eps, cap_prod - eps
    if ratio <= _phi(lo, cap_prod):
        k1 = lo
    elif ratio >= _phi(hi, cap_prod):
        k1 = hi
    else:
        for _ in range(500):
            mid = 0.5 * (lo + hi)
            val = _phi(mid, cap_prod)
            if val < ratio:
                lo = mid
            else:
                hi = mid
            if abs(val - ratio) <= 1e-9 * ratio and (hi - lo) <= 1e-10 * cap_prod:
                break
        k1 = 0.5 * (lo + hi)
    k2 = cap_prod / k1

    # individual caps first, then the k >= 2 floor (re-splitting the product cap)
    if k1 > cap1:
        k1 = cap1
        k2 = min(cap_prod / k1, cap2)
    elif k2 > cap2:
        k2 = cap2
        k1 = min(cap_prod / k2, cap1)
    if k1 < 2.0:
        k1 = 2.0
        k2 = min(cap_prod / 2.0, cap2)
    elif k2 < 2.0:
        k2 = 2.0
        k1 = min(cap_prod / 2.0, cap1)
    return float(k1), float(k2)


def two_user_transition_ratios(spec: MacSpec):
    """Dynamic-range ratios where the two-user solution starts clamping.

    Below the first ratio user 2 sits at its individual cap; above the
    second, user 2 is pinned at the minimum budget 2.
    """
    if spec.num_users != 2:
        raise ValueError("requires exactly 2 users")
    cap2 = budget_cap(spec, [1])
    cap_prod = budget_cap(spec, [0, 1])
    low = _phi(cap_prod / cap2, cap_prod) if cap_prod / cap2 > 1.0 else 0.0
    high = _phi(cap_prod / 2.0, cap_prod)
    return low, high


# ---------------------------------------------------------------------------
# Integer solutions
# ---------------------------------------------------------------------------

def round_allocation(problem: AllocationProblem, k_real) -> Allocation:
    """Floor a relaxed solution, then greedily hand out feasible extra levels.

    Each step increments the user with the largest variance decrease
    d*delta^2/4 * (1/(k-1)^2 - 1/k^2) whose new rate tuple stays feasible;
    zero-gain users (delta = 0) are left at their floor.
    """
    spec = problem.spec
    k_real = np.asarray(k_real, dtype=np.float64)
    if k_real.shape != (spec.num_users,):
        raise ValueError(f"expected {spec.num_users} budgets")
    cons = subset_constraints(spec)
    deltas = np.asarray(problem.deltas)
    coef = spec.dim * deltas**2 / 4.0

    k = np.maximum(2, np.floor(k_real + 1e-9).astype(np.int64))
    if not is_feasible(spec, _rates_for(spec, k), cons):
        raise ValueError("floored budgets are infeasible; k_real must satisfy the relaxation")

    while True:
        best_m = -1
        best_gain = 0.0
        for m in range(spec.num_users):
            gain = coef[m] * (1.0 / (k[m] - 1) ** 2 - 1.0 / k[m] ** 2)
            if gain <= best_gain:
                continue
            trial = k.copy()
            trial[m] += 1
            if is_feasible(spec, _rates_for(spec, trial), cons):
                best_m = m
                best_gain = gain
        if best_m < 0:
            break
        k[best_m] += 1

    return Allocation(
        k_int=tuple(int(x) for x in k),
        k_real=tuple(float(x) for x in k_real),
        rates=tuple(float(x) for x in _rates_for(spec, k)),
        objective=objective(problem, k),
    )


def solve_exhaustive(problem: AllocationProblem, cap_per_user: int) -> Allocation:
    """Exact integer optimum by enumerating feasible tuples with 2 <= k_m <= cap.

    Ties are broken toward the lexicographically smallest tuple.  Guarded
    against enumerating more than 10^7 tuples.
    """
    spec = problem.spec
    m_users = spec.num_users
    if cap_per_user < 2:
        raise ValueError("cap_per_user must be >= 2")
    hi = []
    for m in range(m_users):
        cap_m = budget_cap(spec, [m])
        if math.isfinite(cap_m) and cap_m < cap_per_user:
            hi.append(int(math.floor(cap_m + 1e-9)))
        else:
            hi.append(int(cap_per_user))
    if any(h < 2 for h in hi):
        raise InfeasibleBudgetError("some user cannot get k >= 2 within its cap")
    count = 1
    for h in hi:
        count *= h - 1
    if count > _ENUM_GUARD:
        raise ValueError(f"enumeration of {count} tuples exceeds guard {_ENUM_GUARD}")

    cons = subset_constraints(spec)
    deltas = np.asarray(problem.deltas)
    coef = spec.dim * deltas**2 / 4.0
    last = np.arange(2, hi[-1] + 1, dtype=np.int64)
    last_rate = spec.dim * np.log2(last)
    last_obj = coef[-1] / (last - 1.0) ** 2

    best_obj = math.inf
    best_k = None
    for prefix in product(*(range(2, h + 1) for h in hi[:-1])):
        pre_rates = [spec.dim * math.log2(x) for x in prefix]
        feas = np.ones(last.size, dtype=bool)
        for users, cap in cons:
            total = sum(pre_rates[m] for m in users if m < m_users - 1)
            cap_eff = cap * (1 + 1e-12) + 1e-12
            if (m_users - 1) in users:
                feas &= total + last_rate <= cap_eff
            elif total > cap_eff:
                feas[:] = False
                break
        if not feas.any():
            continue
        pre_obj = sum(coef[m] / (prefix[m] - 1.0) ** 2 for m in range(m_users - 1))
        objs = np.where(feas, pre_obj + last_obj, math.inf)
        j = int(np.argmin(objs))
        if objs[j] < best_obj:
            best_obj = float(objs[j])
            best_k = prefix + (int(last[j]),)
    if best_k is None:
        raise InfeasibleBudgetError("no feasible integer tuple in the search box")

    return Allocation(
        k_int=tuple(best_k),
        k_real=tuple(float(x) for x in best_k),
        rates=tuple(float(x) for x in _rates_for(spec, best_k)),
        objective=best_obj,
    )


def solve_uniform(spec: MacSpec) -> int:
    """Largest common integer budget whose uniform rate tuple is feasible."""
    cons = subset_constraints(spec)

    def ok(k):
        return is_feasible(spec, _rates_for(spec, [k] * spec.num_users), cons)

    b_hi = min(cap / (spec.dim * len(users)) for users, cap in cons)
    k = int(math.floor(2.0**b_hi + 1e-9))
    while k >= 2 and not ok(k):
        k -= 1
    if k < 2:
        raise InfeasibleBudgetError("uniform allocation cannot fit k = 2 for all users")
    while ok(k + 1):
        k += 1
    return k


def allocate(problem: AllocationProblem) -> Allocation:
    """Relax (closed form for two users), then round to a feasible integer allocation."""
    if problem.spec.num_users == 2:
        k_real = np.array(solve_two_user(problem.deltas[0], problem.deltas[1], problem.spec))
    else:
        k_real = solve_relaxed(problem)
    return round_allocation(problem, k_real)
