import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conductance_lab.environment import WindowError, plant_defect, validate
from conductance_lab.interval_solver import (
    CONFINEMENT,
    EXIT,
    SolverRecord,
    build_collapsed_chain,
    commute_time_check,
    confinement_curve,
    confinement_rate,
    confinement_tail,
    dirichlet_form,
    effective_conductance,
    effective_conductance_laplacian,
    escape_bound,
    escape_probability,
    exit_distribution,
    exit_time_bound,
    expected_exit_time,
    locate_margin,
    reversal_identity_check,
    series_lower_bound,
    solve_escape,
)

from conftest import homogeneous, iid, two_range

# hand-computed from the (1, 0.05) field: (omega_{1,0} + omega_{1,-1}) / C'_1 = 1.05 / 2.1
TWO_RANGE_P1B = 0.5
# nearest-neighbour [0, 4], x = 2: E^2 tau_B = 12 (reflection at the E state), E^B tau_2 = 4,
# total mass 2+2+2+1+1 = 8 times R_eff = 2
NN_COMMUTE = 16.0
# 3 interior points, start in the middle, two steps: first step always to an end,
# second step stays with probability 1/2
NN_TAIL_3x3 = 0.5


def random_two_range(seed):
    return iid((-80, 80), seed=seed, support_radius=2)


# ---------------------------------------------------------------- collapsed chain


def test_nn_chain_is_srw():
    p = build_collapsed_chain(homogeneous((-10, 10)), 0, 4)
    assert p.labels == (1, 2, 3, "B", "E")
    assert p.P[p.index(1), p.state("B")] == 0.5
    assert p.P[p.index(3), p.state("E")] == 0.5
    assert np.allclose(p.Q, [[0, 0.5, 0], [0.5, 0, 0.5], [0, 0.5, 0]])


def test_two_range_boundary_row():
    p = build_collapsed_chain(two_range(), 0, 4)
    env = p.env
    hand = (env.conductance(1, 0) + env.conductance(1, -1)) / env.total_conductance(1)
    assert hand == pytest.approx(TWO_RANGE_P1B, abs=1e-15)
    assert p.P[p.index(1), p.state("B")] == pytest.approx(TWO_RANGE_P1B, abs=1e-15)


def test_no_collapsed_to_collapsed_moves():
    p = build_collapsed_chain(two_range(), 0, 6)
    B, E = p.state("B"), p.state("E")
    assert p.P[B, E] == p.P[E, B] == p.P[B, B] == p.P[E, E] == 0.0


def test_build_errors():
    env = two_range((-10, 10))
    with pytest.raises(ValueError):
        build_collapsed_chain(env, 0, 1)
    with pytest.raises(WindowError):
        build_collapsed_chain(env, 0, 10)
    with pytest.raises(ValueError):
        build_collapsed_chain(env, 0, 4, "sideways")


@given(st.integers(0, 2**32), st.integers(2, 30), st.integers(-40, 20), st.sampled_from([CONFINEMENT, EXIT]))
@settings(max_examples=40, deadline=None)
def test_chain_invariants(seed, length, a, geometry):
    env = iid((-80, 80), seed=seed, support_radius=4)
    p = build_collapsed_chain(env, a, a + length, geometry)
    assert p.row_sum_residual() <= 1e-12
    assert p.detailed_balance_residual() <= 1e-12
    assert p.total_conductance_residual() <= 1e-12
    assert abs(p.pi_E.sum() - 1) <= 1e-12 and p.pi_E.min() >= 0
    if geometry == CONFINEMENT:
        assert abs(p.pi_B.sum() - 1) <= 1e-12 and p.pi_B.min() >= 0
        # boundary masses: conductance from each side into the interval
        assert p.C_states[p.state("B")] == pytest.approx(p.C_B, rel=1e-12)
        assert p.C_states[p.state("E")] == pytest.approx(p.C_E, rel=1e-12)
    # C'_y for boundary y sums the conductances to interior sites only
    for j, y in enumerate(p.boundary):
        direct = sum(env.conductance(int(y), int(x)) for x in p.interior if abs(int(y) - int(x)) <= 4)
        assert p.C_boundary[j] == pytest.approx(direct, abs=1e-15)


# ---------------------------------------------------------------- escape and Dirichlet form


@pytest.mark.parametrize("L", [1, 2, 5, 10, 37])
def test_escape_ruin(L):
    assert escape_probability(homogeneous((-60, 60)), L) == pytest.approx(1.0 / L, abs=1e-12)


def test_escape_nonincreasing(iid_env):
    vals = [escape_probability(iid_env, L) for L in (2, 5, 10, 40, 160)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


@pytest.mark.parametrize("seed", range(3))
def test_escape_bound_heavy_tail(seed):
    env = iid((-600, 600), seed=seed)
    rep = validate(env)
    for L in (10, 50, 250):
        assert escape_probability(env, L) <= escape_bound(env, L, rep)


def test_dirichlet_constant():
    env = two_range()
    assert dirichlet_form(env, lambda x: np.full(x.shape, 0.3), (-10, 10)) == 0.0


@pytest.mark.parametrize("L", [3, 10, 25])
def test_dirichlet_ramp(L):
    env = homogeneous((-60, 60))
    ramp = lambda x: np.minimum(np.abs(x) / L, 1.0)
    assert dirichlet_form(env, ramp, (-L, L)) == pytest.approx(4.0 / L, abs=1e-12)


@pytest.mark.parametrize("L", [4, 20, 60])
def test_dirichlet_minimizer(iid_env, L):
    sol = solve_escape(iid_env, L)
    phi = dirichlet_form(iid_env, sol.f, (-L + 1, L - 1))
    assert abs(phi - 2 * sol.C0 * sol.probability) <= 1e-10


@given(st.integers(0, 2**32), st.integers(2, 15), st.data())
@settings(max_examples=30, deadline=None)
def test_dirichlet_sandwich(seed, L, data):
    env = iid((-60, 60), seed=seed, support_radius=3)
    sol = solve_escape(env, L)
    inner = data.draw(st.lists(st.floats(0, 1), min_size=2 * L - 1, max_size=2 * L - 1))
    vals = np.array(inner)
    vals[L - 1] = 0.0
    f = lambda x: np.where(np.abs(x) >= L, 1.0, vals[np.clip(x + L - 1, 0, 2 * L - 2)])
    assert 2 * sol.C0 * sol.probability <= dirichlet_form(env, f, (-L + 1, L - 1)) + 1e-12


def test_dirichlet_support_error():
    with pytest.raises(WindowError):
        dirichlet_form(two_range((-10, 10)), lambda x: x * 0.0, (-9, 9))


# ---------------------------------------------------------------- confinement


def test_confinement_zero_steps(iid_env):
    p = build_collapsed_chain(iid_env, -20, 20)
    assert confinement_tail(p, 3, 0) == 1.0


def test_confinement_3x3():
    p = build_collapsed_chain(homogeneous((-10, 10)), 0, 4)
    Q = p.Q
    hand = (Q @ Q @ np.ones(3))[1]
    assert hand == pytest.approx(NN_TAIL_3x3, abs=1e-15)
    assert confinement_tail(p, 2, 2) == pytest.approx(NN_TAIL_3x3, abs=1e-15)


def test_confinement_monotone(iid_env):
    p = build_collapsed_chain(iid_env, -15, 15)
    curve = confinement_curve(p, 0, np.arange(0, 3000, 7))
    assert np.all(np.diff(curve) <= 0)
    assert curve[0] == 0.0


def test_confinement_rate_matches_tail(iid_env):
    p = build_collapsed_chain(iid_env, -10, 10)
    curve = confinement_curve(p, 0, [2000, 4000])
    assert -(curve[1] - curve[0]) / 2000 == pytest.approx(confinement_rate(p), rel=1e-6)


def test_confinement_underflow_safe():
    p = build_collapsed_chain(homogeneous((-10, 10)), 0, 4)
    val = confinement_curve(p, 2, [100000])[0]
    assert np.isfinite(val) and val < -1000


# ---------------------------------------------------------------- exit times


def test_exit_time_single_point():
    p = build_collapsed_chain(homogeneous((-10, 10)), 0, 2)
    assert expected_exit_time(p, 1) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("m", [1, 2, 5, 20])
def test_exit_time_midpoint(m):
    p = build_collapsed_chain(homogeneous((-60, 60)), 0, 2 * m)
    assert expected_exit_time(p, m) == pytest.approx(m * m, abs=1e-10)


def test_exit_time_bound_two_range(two_range_env):
    for a, b in ((0, 10), (-30, 30), (5, 8)):
        p = build_collapsed_chain(two_range_env, a, b)
        for x in range(a + 1, b):
            assert expected_exit_time(p, x) <= exit_time_bound(p)


# ---------------------------------------------------------------- exit law


def test_exit_nn_no_overshoot():
    p = build_collapsed_chain(homogeneous((-30, 30)), 0, 10, EXIT)
    d = exit_distribution(p, 3)
    assert set(d.as_dict()) == {0, 10}
    assert d.mass_inside(0) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("N,x", [(10, 3), (7, 1), (20, 13)])
def test_exit_ruin(N, x):
    p = build_collapsed_chain(homogeneous((-30, 30)), 0, N, EXIT)
    assert exit_distribution(p, x).as_dict()[N] == pytest.approx(x / N, abs=1e-12)


def test_exit_margin_heavy_tail(iid_env):
    p = build_collapsed_chain(iid_env, -25, 25, EXIT)
    M, worst = locate_margin(p, 0.05)
    assert worst >= 0.95
    assert min(exit_distribution(p, x).mass_inside(M) for x in range(-24, 25)) >= 0.95


@given(st.integers(0, 2**32), st.integers(2, 25))
@settings(max_examples=25, deadline=None)
def test_exit_law_properties(seed, length):
    env = iid((-80, 80), seed=seed, support_radius=6)
    p = build_collapsed_chain(env, -5, -5 + length, EXIT)
    x = -5 + length // 2 if length > 2 else -4
    d = exit_distribution(p, x)
    assert abs(d.probs.sum() - 1) <= 1e-10
    assert np.all((d.sites <= -5) | (d.sites >= -5 + length))
    masses = [d.mass_inside(M) for M in range(7)]
    assert all(b >= a for a, b in zip(masses, masses[1:]))
    assert masses[-1] == pytest.approx(1.0, abs=1e-10)


def test_exit_requires_geometry():
    p = build_collapsed_chain(homogeneous((-10, 10)), 0, 4)
    with pytest.raises(ValueError):
        exit_distribution(p, 2)


# ---------------------------------------------------------------- effective conductance


@pytest.mark.parametrize("a,b,x", [(0, 10, 3), (-5, 5, 0), (0, 2, 1)])
def test_ceff_series(a, b, x):
    p = build_collapsed_chain(homogeneous((-20, 20)), a, b, EXIT)
    exact = 1 / (x - a) + 1 / (b - x)
    assert effective_conductance(p, x) == pytest.approx(exact, abs=1e-12)
    assert effective_conductance_laplacian(p, x) == pytest.approx(exact, abs=1e-12)
    assert series_lower_bound(p, x) == pytest.approx(exact, abs=1e-12)


@given(st.integers(-8, 8), st.integers(1, 3), st.floats(1e-4, 2.0))
@settings(max_examples=30, deadline=None)
def test_ceff_rayleigh(x, d, extra):
    env = homogeneous((-30, 30), (1.0, 1e-3, 1e-4))
    more = plant_defect(env, x, x + d, env.conductance(x, x + d) + extra)
    before = effective_conductance(build_collapsed_chain(env, -10, 10, EXIT), 0)
    after = effective_conductance(build_collapsed_chain(more, -10, 10, EXIT), 0)
    assert after >= before - 1e-12


def test_ceff_two_range_bound(two_range_env):
    p = build_collapsed_chain(two_range_env, 0, 10, EXIT)
    val = effective_conductance(p, 5)
    assert val >= 0.4 * two_range_env.kappa
    assert val >= series_lower_bound(p, 5)


@given(st.integers(0, 2**32), st.integers(2, 20), st.data())
@settings(max_examples=25, deadline=None)
def test_ceff_routes_agree(seed, length, data):
    env = iid((-80, 80), seed=seed, support_radius=5)
    p = build_collapsed_chain(env, 0, length, EXIT)
    x = data.draw(st.integers(1, length - 1))
    c = effective_conductance(p, x)
    assert c == pytest.approx(effective_conductance_laplacian(p, x), rel=1e-10)
    assert c >= series_lower_bound(p, x) * (1 - 1e-12)


# ---------------------------------------------------------------- commute time


def test_commute_single_point():
    p = build_collapsed_chain(two_range(), 0, 2)
    lhs, rhs = commute_time_check(p, 1)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_commute_nn_hand_oracle():
    p = build_collapsed_chain(homogeneous((-10, 10)), 0, 4)
    lhs, rhs = commute_time_check(p, 2)
    assert lhs == pytest.approx(NN_COMMUTE, abs=1e-12)
    assert rhs == pytest.approx(NN_COMMUTE, abs=1e-12)


def test_commute_random_draws():
    rng = np.random.default_rng(8)
    env = random_two_range(4)
    for _ in range(20):
        a = int(rng.integers(-70, 40))
        b = a + int(rng.integers(2, 30))
        x = int(rng.integers(a + 1, b))
        lhs, rhs = commute_time_check(build_collapsed_chain(env, a, b), x)
        assert abs(lhs - rhs) <= 1e-8 * rhs


# ---------------------------------------------------------------- reversal identity


@pytest.mark.parametrize("x", [1, 4, 9])
def test_reversal_nn(x):
    p = build_collapsed_chain(homogeneous((-20, 20)), 0, 10, EXIT)
    lhs, rhs = reversal_identity_check(p, x, 10)
    assert lhs == pytest.approx(1 / (10 - x), abs=1e-12)
    assert rhs == pytest.approx(1 / (10 - x), abs=1e-12)


def test_reversal_symmetry(two_range_env):
    p = build_collapsed_chain(two_range_env, 0, 10, EXIT)
    for y, mirror in ((10, 0), (11, -1)):
        assert reversal_identity_check(p, 5, y)[0] == pytest.approx(reversal_identity_check(p, 5, mirror)[0],
                                                                     rel=1e-12)


def test_reversal_heavy_tail_draws(iid_env):
    rng = np.random.default_rng(9)
    for _ in range(15):
        a = int(rng.integers(-500, 400))
        b = a + int(rng.integers(2, 40))
        x = int(rng.integers(a + 1, b))
        p = build_collapsed_chain(iid_env, a, b, EXIT)
        pos = np.nonzero(p.C_boundary > 0)[0]
        y = int(p.boundary[rng.choice(pos)])
        lhs, rhs = reversal_identity_check(p, x, y)
        assert abs(lhs - rhs) <= 1e-10 * abs(rhs)


def test_reversal_errors():
    p = build_collapsed_chain(homogeneous((-20, 20)), 0, 10, EXIT)
    with pytest.raises(ValueError):
        reversal_identity_check(p, 3, 5)
    with pytest.raises(ValueError):
        reversal_identity_check(build_collapsed_chain(homogeneous((-20, 20)), 0, 10), 3, 10)


# ---------------------------------------------------------------- records


def test_record_text():
    rec = SolverRecord("escape", {"L": 10}, {"probability": 0.1}, {"dirichlet": 0.0})
    doc = json.loads(rec.to_text())
    assert doc == {"operation": "escape", "inputs": {"L": 10}, "outputs": {"probability": 0.1},
                   "residuals": {"dirichlet": 0.0}}
