import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from conductance_lab.environment import WindowError, default_spec, generate
from conductance_lab.walk import (
    MarginError,
    Path,
    WalkAborted,
    endpoint_displacements,
    jump_exceedance,
    keys_for,
    long_jump_frequency,
    one_step_counts,
    path_functionals,
    range_stats,
    read_path_dump,
    required_margin,
    rescale,
    simulate,
    transition_probability,
    write_path_dump,
)

from conftest import homogeneous, iid, two_range

# per-step variance of the (1, 0.05) profile by enumerating the jump law
TWO_RANGE_VAR = 2.4 / 2.1


def _path(steps):
    return Path(int(steps[0]), np.asarray(steps, dtype=np.int64), "test", 0)


def _var_se(x):
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    v = d.var()
    return v, math.sqrt(max(np.mean(d**4) - v**2, 0.0) / x.size)


# ---------------------------------------------------------------- transition law


def test_transition_nearest_neighbor():
    env = homogeneous((-10, 10))
    assert transition_probability(env, 0, 1) == 0.5
    assert transition_probability(env, 0, -1) == 0.5
    assert transition_probability(env, 0, 2) == 0.0


def test_transition_two_range():
    env = two_range()
    assert transition_probability(env, 0, 2) == pytest.approx(0.05 / 2.1, abs=1e-15)
    assert sum(transition_probability(env, 0, y) for y in range(-3, 4)) == pytest.approx(1.0, abs=1e-15)


def test_transition_boundary_error():
    with pytest.raises(WindowError):
        transition_probability(two_range((-10, 10)), 10, 9)


def test_jump_enumeration_oracle():
    env = two_range()
    var = sum(y * y * transition_probability(env, 0, y) for y in range(-2, 3))
    assert var == pytest.approx(TWO_RANGE_VAR, abs=1e-14)


def test_one_step_chi_square(iid_env):
    x = 17
    counts = one_step_counts(iid_env, x, 10**6, seed=3)
    R = iid_env.truncation_radius
    p = np.array([transition_probability(iid_env, x, x + d) for d in range(-R, R + 1)])
    # pool the far tail into one cell so every expected count is >= 5
    keep = p * 10**6 >= 5
    obs = np.append(counts[keep], counts[~keep].sum())
    exp = np.append(p[keep], p[~keep].sum()) * 10**6
    assert counts.sum() == 10**6
    assert chisquare(obs, exp).pvalue > 0.001


# ---------------------------------------------------------------- simulate


def test_simulate_zero_steps():
    path = simulate(homogeneous(), 3, 0, seed=1)
    assert path.steps.tolist() == [3]
    assert path.n == 0


def test_simulate_deterministic(iid_env):
    a = simulate(iid_env, 5, 2000, seed=9)
    b = simulate(iid_env, 5, 2000, seed=9)
    c = simulate(iid_env, 5, 2000, seed=10)
    assert np.array_equal(a.steps, b.steps)
    assert not np.array_equal(a.steps, c.steps)


def test_simulate_invariants(iid_env):
    path = simulate(iid_env, -40, 2000, seed=4)
    assert path.steps[0] == -40 and path.n == 2000
    assert np.abs(np.diff(path.steps)).max() <= iid_env.truncation_radius
    assert all(iid_env.is_interior(int(x)) for x in path.steps)
    assert path.env_id == iid_env.env_id


def test_simulate_margin_error():
    with pytest.raises(MarginError):
        simulate(homogeneous((-50, 50)), 0, 10**4, seed=0)


def test_simulate_abort_carries_partial_path():
    env = homogeneous((-200, 200))
    with pytest.raises(WalkAborted) as info:
        # a tiny margin constant forces an early exit from the safe zone
        for seed in range(50):
            simulate(env, 0, 10**4, seed=seed, margin_c=0.05)
    path = info.value.path
    assert path is not None and path.steps[0] == 0
    assert path.n < 10**4
    assert abs(path.steps[-1]) >= required_margin(10**4, 0.05)


def test_homogeneous_mean_zero():
    env = homogeneous((-8000, 8000))
    n, P = 10**4, 10**4
    d = endpoint_displacements(env, np.zeros(P, dtype=np.int64), keys_for(21, P), [n])[:, 0]
    assert abs(d.mean()) <= 3 * math.sqrt(n) / math.sqrt(P)


def test_two_range_variance():
    env = two_range((-9000, 9000))
    n, P = 10**4, 10**4
    d = endpoint_displacements(env, np.zeros(P, dtype=np.int64), keys_for(22, P), [n])[:, 0]
    v, se = _var_se(d / math.sqrt(n))
    assert abs(v - TWO_RANGE_VAR) <= 3 * se


def test_ensembles_independent_of_workers(iid_env):
    P = 600
    starts = np.arange(P, dtype=np.int64) % 50 - 25
    keys = keys_for(5, P)
    one = path_functionals(iid_env, starts, keys, 2000, workers=1)
    four = path_functionals(iid_env, starts, keys, 2000, workers=4)
    for a, b in zip(one, four):
        assert np.array_equal(a, b)
    e1 = endpoint_displacements(iid_env, starts, keys, [10, 100, 2000], workers=1)
    e3 = endpoint_displacements(iid_env, starts, keys, [10, 100, 2000], workers=3)
    assert np.array_equal(e1, e3)


def test_ensemble_matches_single_paths(iid_env):
    # the ensemble kernels follow the same stream as simulate
    keys = keys_for(77, 3)
    d = endpoint_displacements(iid_env, np.array([0, 0, 0]), keys, [500])[:, 0]
    for i in range(3):
        k = keys_for(77, 1, offset=i)[0]
        assert k == keys[i]
    path = simulate(iid_env, 0, 500, seed=77)
    assert path.steps[-1] == d[0]


# ---------------------------------------------------------------- rescale


def test_rescale_constant():
    z = rescale(_path([5] * 11), 10, 2.0)
    assert np.allclose(z(np.linspace(0, 1, 17)), 5 / (2.0 * math.sqrt(10)))


@given(st.lists(st.integers(-50, 50), min_size=2, max_size=40), st.floats(0.1, 5.0))
@settings(max_examples=50, deadline=None)
def test_rescale_knots_and_linearity(steps, sigma):
    n = len(steps) - 1
    z = rescale(_path(steps), n, sigma)
    scale = sigma * math.sqrt(n)
    for k, x in enumerate(steps):
        assert z(k / n) * scale == pytest.approx(x, abs=1e-9)
    for k in range(n):
        mid = z((k + 0.5) / n) * scale
        assert mid == pytest.approx(0.5 * (steps[k] + steps[k + 1]), abs=1e-9)


def test_rescale_midknot():
    steps = [0, 0, 0, 1, 3] + [3] * 96
    z = rescale(_path(steps), 100, 1.5)
    assert z(0.035) * 1.5 * 10 == pytest.approx(2.0, abs=1e-12)


def test_rescale_errors():
    p = _path([0, 1, 2])
    with pytest.raises(ValueError):
        rescale(p, 2, 0.0)
    with pytest.raises(ValueError):
        rescale(p, 2, 1.0, horizon=2.0)
    with pytest.raises(ValueError):
        rescale(p, 2, 1.0)(1.5)


# ---------------------------------------------------------------- range statistics


def test_range_monotone():
    r = range_stats(_path([0, 1, 2, 3]), 0, 3)
    assert (r.r_plus, r.r_minus, r.r) == (3, 0, 3)


def test_range_constant():
    r = range_stats(_path([4, 4, 4]), 0, 2)
    assert (r.r_plus, r.r_minus, r.r) == (0, 0, 0)


def test_range_enumeration():
    r = range_stats(_path([0, 2, -1, 1]), 0, 3)
    assert (r.r_plus, r.r_minus, r.r) == (2, -1, 3)


def test_range_overrun():
    with pytest.raises(ValueError):
        range_stats(_path([0, 1]), 1, 1)


@given(st.lists(st.integers(-9, 9), min_size=1, max_size=60), st.data())
@settings(max_examples=60, deadline=None)
def test_range_invariants(deltas, data):
    steps = np.concatenate([[0], np.cumsum(deltas)])
    p = _path(steps)
    base = data.draw(st.integers(0, p.n))
    horizon = data.draw(st.integers(0, p.n - base))
    r = p.range_stats(base, horizon)
    assert r.r_minus <= 0 <= r.r_plus
    assert r.r == r.r_plus - r.r_minus >= 0
    seg = steps[base : base + horizon + 1] - steps[base]
    assert r.r_plus == seg.max() and r.r_minus == seg.min()


# ---------------------------------------------------------------- path dump


def test_path_dump_roundtrip(iid_env):
    path = simulate(iid_env, -7, 1234, seed=2**63 + 5)
    buf = io.BytesIO()
    write_path_dump(path, buf)
    raw = buf.getvalue()
    assert raw[:8] == b"CLPATH01"
    assert len(raw) == 8 + 16 + 8 + 8 + 8 + 4 * 1234
    back = read_path_dump(io.BytesIO(raw))
    assert np.array_equal(back.steps, path.steps)
    assert (back.start, back.seed, back.env_id) == (path.start, path.seed, path.env_id)


# ---------------------------------------------------------------- long jumps


def test_long_jump_zero_when_truncated():
    env = iid((-3000, 3000), seed=1, support_radius=5)
    assert long_jump_frequency(env, 0, 10**4, 0.45, seed=0, paths=10) == 0.0


def test_long_jump_bounded_jumps():
    env = homogeneous((-3000, 3000), (1.0, 0.05), tail_beta=2.0)
    assert long_jump_frequency(env, 0, 10**4, 0.45, seed=0, paths=10) == 0.0


def test_long_jump_nu_range(iid_env):
    with pytest.raises(ValueError):
        long_jump_frequency(iid_env, 0, 100, 0.2, seed=0)


@pytest.mark.slow
def test_long_jump_decay():
    env = iid((-6000, 6000), seed=7)
    nu, beta = 0.45, env.tail_beta
    f3 = long_jump_frequency(env, 0, 10**3, nu, seed=1, paths=20000)
    f4 = long_jump_frequency(env, 0, 10**4, nu, seed=1, paths=100000)
    target = -(nu * (2 + beta) - 1) * math.log(10)
    ratio = math.log(f4 / f3)
    assert abs(ratio - target) <= 0.5 * abs(target)
    # union-bound oracle from the materialized tail of the jump law
    oracle = [(n + 1) * jump_exceedance(env, math.ceil(n**nu), -500, 500).mean() for n in (10**3, 10**4)]
    assert abs(math.log(oracle[1] / oracle[0]) - target) <= 0.5 * abs(target)
    assert f3 <= 1.5 * oracle[0] and f4 <= 1.5 * oracle[1]
