import math

import numpy as np
import pytest

from macquant.allocator import (
    AllocationProblem,
    InfeasibleBudgetError,
    allocate,
    kkt_residual,
    objective,
    round_allocation,
    solve_exhaustive,
    solve_relaxed,
    solve_two_user,
    solve_uniform,
    two_user_transition_ratios,
)
from macquant.channel import MacSpec, budget_cap, is_feasible

D = 7850


def paper_spec(dim=D):
    return MacSpec(powers=(80.0, 20.0), noise_var=1.0, channel_uses=2 * dim, dim=dim)


def random_spec(rng, dim=200):
    p1, p2 = rng.uniform(5.0, 150.0, size=2)
    factor = rng.uniform(1.0, 3.0)
    return MacSpec(powers=(p1, p2), noise_var=1.0, channel_uses=int(factor * dim), dim=dim)


def test_objective_values():
    spec = paper_spec()
    assert objective(AllocationProblem((0.0, 0.0), spec), (5, 7)) == 0.0
    one = MacSpec(powers=(80.0,), noise_var=1.0, channel_uses=2, dim=1)
    assert objective(AllocationProblem((50.0,), one), (10,)) == pytest.approx(2500.0 / 324.0)
    prob = AllocationProblem((3.0, 4.0), spec)
    doubled = AllocationProblem((6.0, 8.0), spec)
    k = (5, 9)
    assert objective(doubled, k) == pytest.approx(4.0 * objective(prob, k))
    with pytest.raises(ValueError):
        objective(prob, (1.5, 5))


def test_two_user_symmetry_at_equal_ranges():
    spec = paper_spec()
    k1, k2 = solve_two_user(50.0, 50.0, spec)
    cap_prod = budget_cap(spec, [0, 1])
    assert k1 == pytest.approx(k2, rel=1e-8)
    assert k1 == pytest.approx(math.sqrt(cap_prod), rel=1e-8)


def test_two_user_reference_allocations():
    spec = paper_spec()
    for ratio, expected in ((1.0, (10, 10)), (100.0, (50, 2)), (0.1, (4, 21))):
        k_real = solve_two_user(ratio * 50.0, 50.0, spec)
        alloc = round_allocation(AllocationProblem((ratio * 50.0, 50.0), spec), k_real)
        assert alloc.k_int == expected


def test_two_user_transition_ratios_in_reported_windows():
    low, high = two_user_transition_ratios(paper_spec())
    assert 0.15 <= low <= 0.18
    assert 69.0 <= high <= 69.5


def test_two_user_zero_range_handling():
    spec = paper_spec()
    cap_prod = budget_cap(spec, [0, 1])
    assert solve_two_user(0.0, 0.0, spec) == (2.0, 2.0)
    k1, k2 = solve_two_user(0.0, 50.0, spec)
    assert k1 == 2.0
    assert k2 == pytest.approx(min(cap_prod / 2.0, budget_cap(spec, [1])))
    k1, k2 = solve_two_user(50.0, 0.0, spec)
    assert k2 == 2.0
    assert k1 == pytest.approx(min(cap_prod / 2.0, budget_cap(spec, [0])))


def test_two_user_rejects_tiny_region():
    spec = MacSpec(powers=(0.3, 0.3), noise_var=1.0, channel_uses=2, dim=2)
    with pytest.raises(InfeasibleBudgetError):
        solve_two_user(1.0, 1.0, spec)


def test_interior_stationarity_relation():
    # at an interior optimum: d1^2 / (k2 (k1-1)^3) = d2^2 / (k1 (k2-1)^3)
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 40:
        spec = random_spec(rng)
        d2 = rng.uniform(1.0, 60.0)
        d1 = d2 * rng.uniform(0.3, 3.0)
        k1, k2 = solve_two_user(d1, d2, spec)
        cap1, cap2 = budget_cap(spec, [0]), budget_cap(spec, [1])
        interior = 2.0 + 1e-6 < k1 < cap1 * (1 - 1e-9) and 2.0 + 1e-6 < k2 < cap2 * (1 - 1e-9)
        if not interior:
            continue
        lhs = d1**2 / (k2 * (k1 - 1.0) ** 3)
        rhs = d2**2 / (k1 * (k2 - 1.0) ** 3)
        assert lhs == pytest.approx(rhs, rel=1e-6)
        checked += 1


def test_relaxed_matches_two_user_on_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(100):
        spec = random_spec(rng)
        d2 = rng.uniform(0.5, 80.0)
        d1 = d2 * 10 ** rng.uniform(-2.5, 2.5)
        k_closed = np.array(solve_two_user(d1, d2, spec))
        prob = AllocationProblem((d1, d2), spec)
        k_relax = solve_relaxed(prob)
        assert np.allclose(k_relax, k_closed, rtol=1e-6, atol=1e-6), (
            spec,
            (d1, d2),
            k_relax,
            k_closed,
        )
        assert kkt_residual(prob, k_relax) <= 1e-9


def test_relaxed_zero_delta_user_gets_minimum():
    spec = paper_spec()
    k = solve_relaxed(AllocationProblem((50.0, 0.0), spec))
    assert k[1] == pytest.approx(2.0)
    assert k[0] == pytest.approx(min(budget_cap(spec, [0, 1]) / 2.0, budget_cap(spec, [0])))


def test_relaxed_three_users_kkt_and_feasible():
    rng = np.random.default_rng(17)
    for _ in range(25):
        powers = tuple(rng.uniform(5.0, 120.0, size=3))
        spec = MacSpec(powers=powers, noise_var=1.0, channel_uses=400, dim=150)
        deltas = tuple(rng.uniform(0.5, 30.0, size=3))
        prob = AllocationProblem(deltas, spec)
        k = solve_relaxed(prob)
        assert np.all(k >= 2.0 - 1e-12)
        assert is_feasible(spec, spec.dim * np.log2(k))
        assert kkt_residual(prob, k) <= 1e-9


def test_relaxed_infeasible_caps_raise():
    spec = MacSpec(powers=(0.5, 0.5), noise_var=1.0, channel_uses=4, dim=4)
    with pytest.raises(InfeasibleBudgetError):
        solve_relaxed(AllocationProblem((1.0, 1.0), spec))


def test_relaxed_monotone_in_resources():
    rng = np.random.default_rng(23)
    for _ in range(10):
        spec = random_spec(rng)
        deltas = tuple(rng.uniform(1.0, 40.0, size=2))
        base = objective(AllocationProblem(deltas, spec), solve_relaxed(AllocationProblem(deltas, spec)))
        more_uses = MacSpec(
            powers=spec.powers,
            noise_var=spec.noise_var,
            channel_uses=spec.channel_uses * 2,
            dim=spec.dim,
        )
        more_power = MacSpec(
            powers=(spec.powers[0] * 2.0, spec.powers[1]),
            noise_var=spec.noise_var,
            channel_uses=spec.channel_uses,
            dim=spec.dim,
        )
        for better in (more_uses, more_power):
            prob = AllocationProblem(deltas, better)
            val = objective(prob, solve_relaxed(prob))
            assert val <= base * (1 + 1e-9)


def test_relaxed_scale_invariance():
    spec = paper_spec()
    k1 = solve_relaxed(AllocationProblem((7.0, 3.0), spec))
    k2 = solve_relaxed(AllocationProblem((70.0, 30.0), spec))
    assert np.allclose(k1, k2, rtol=1e-7)


def test_round_allocation_reference_cases():
    spec = paper_spec()
    alloc = round_allocation(AllocationProblem((50.0, 50.0), spec), (10.04, 10.04))
    assert alloc.k_int == (10, 10)
    alloc = round_allocation(AllocationProblem((5.0, 50.0), spec), (4.80, 21.0))
    assert alloc.k_int == (4, 21)


def test_round_allocation_fixed_point_when_tight():
    spec = MacSpec(powers=(49.5, 49.5), noise_var=1.0, channel_uses=40, dim=20)
    # product cap is exactly 100 here; (10, 10) is integral and tight
    alloc = round_allocation(AllocationProblem((5.0, 5.0), spec), (10.0, 10.0))
    assert alloc.k_int == (10, 10)


def test_round_allocation_invariants():
    rng = np.random.default_rng(4)
    for _ in range(30):
        spec = random_spec(rng)
        deltas = tuple(rng.uniform(0.0, 40.0, size=2))
        prob = AllocationProblem(deltas, spec)
        alloc = allocate(prob)
        assert all(k >= 2 for k in alloc.k_int)
        assert is_feasible(spec, np.asarray(alloc.rates))
        assert alloc.objective == pytest.approx(objective(prob, alloc.k_int))


def test_exhaustive_reference_and_guard():
    spec = paper_spec()
    prob = AllocationProblem((50.0, 50.0), spec)
    best = solve_exhaustive(prob, 128)
    assert best.k_int == (10, 10)
    with pytest.raises(ValueError):
        big = MacSpec(powers=(1e5, 1e5, 1e5, 1e5), noise_var=1.0, channel_uses=10**6, dim=10)
        solve_exhaustive(AllocationProblem((1.0, 1.0, 1.0, 1.0), big), 128)


def test_exhaustive_single_user_cap():
    spec = MacSpec(powers=(80.0,), noise_var=1.0, channel_uses=20, dim=10)
    cap = budget_cap(spec, [0])
    best = solve_exhaustive(AllocationProblem((3.0,), spec), 1000)
    assert best.k_int == (int(math.floor(cap + 1e-9)),)


def test_exhaustive_zero_range_user_takes_minimum():
    spec = paper_spec(dim=50)
    best = solve_exhaustive(AllocationProblem((5.0, 0.0), spec), 128)
    assert best.k_int[1] == 2
    # user 0 gets the largest budget feasible alongside k2 = 2
    k1 = best.k_int[0]
    assert is_feasible(spec, 50 * np.log2([k1, 2]))
    assert not is_feasible(spec, 50 * np.log2([k1 + 1, 2]))


def test_greedy_never_beats_exhaustive_and_matches_in_clamped_corners():
    # the exhaustive search is the exact integer optimum, so greedy can only
    # tie or lose; in the deep-clamped regimes (one budget pinned at 2 or at
    # its cap with the other maximal) both land on the same corner
    rng = np.random.default_rng(11)
    for _ in range(30):
        spec = random_spec(rng, dim=120)
        d2 = rng.uniform(0.5, 50.0)
        d1 = d2 * 10 ** rng.uniform(-2.0, 2.0)
        prob = AllocationProblem((d1, d2), spec)
        greedy = allocate(prob)
        exact = solve_exhaustive(prob, 128)
        assert greedy.objective >= exact.objective - 1e-12
    spec = paper_spec(dim=100)
    for ratio in (1e-3, 1e3):
        prob = AllocationProblem((ratio * 50.0, 50.0), spec)
        assert allocate(prob).k_int == solve_exhaustive(prob, 128).k_int


def test_solve_uniform_paper_setup():
    spec = MacSpec(powers=(95.0, 5.0), noise_var=1.0, channel_uses=2 * D, dim=D)
    # worst-user cap 2 * C2 = log2(6) pins the budget at exactly 6 levels
    assert solve_uniform(spec) == 6
    assert solve_uniform(paper_spec()) == 10  # k^2 <= 101


def test_solve_uniform_infeasible():
    spec = MacSpec(powers=(0.2, 0.2), noise_var=1.0, channel_uses=2, dim=8)
    with pytest.raises(InfeasibleBudgetError):
        solve_uniform(spec)
