"""Brownian reference side: sampling, the path metric, and the thresholds delta_eps, h_eps.

``delta_eps`` is the largest grid value ``delta`` for which five small-range
probabilities of Brownian motion on ``[0, 3/2]`` sum to at most ``eps/2``.
``h_eps`` is the largest grid value ``h`` for which

    P[sup_{s<=h} |W(s)| > eps] + P[sup_{s<=h} d(theta_s W, W) > eps] <= eps/2,

with ``(theta_s w)(t) = w(s + t)``.  Both scans use one set of Brownian
samples for every grid point, so the estimated probability is monotone along
the grid.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numba as nb
import numpy as np

from .rng import derive_seed, normal_pair
from .walk import keys_for, run_chunked

GRID_RATIO = 0.9
BRIDGE_C = 0.5826  # E[sup W] - E[max over a grid of step dt] ~ 0.5826 sqrt(dt)
DISTANCE_TERMS = 31  # 2^-30 < 1e-9
H_TERMS = 12  # metric terms used inside the h_eps scan; remainder 2^-11 counted as a crossing


def grid(floor, ratio=GRID_RATIO):
    """Geometric grid ``1, ratio, ratio^2, ...`` down to ``floor``."""
    count = int(math.floor(math.log(floor) / math.log(ratio))) + 1
    return ratio ** np.arange(count)


def truncation_bound(terms):
    return 2.0 ** (-terms + 1)


@nb.njit(cache=True, inline="always")
def _normal(key, i, spare):
    """Normal number ``i`` of stream ``key``; pairs share one Box-Muller draw."""
    if i % 2 == 0:
        z0, z1 = normal_pair(key, i)
        spare[0] = z1
        return z0
    return spare[0]


# --------------------------------------------------------------------------
# samples


@dataclass(frozen=True, eq=False)
class BrownianSample:
    horizon: float
    dt: float
    values: np.ndarray
    seed: int

    def times(self):
        return self.dt * np.arange(len(self.values))


@nb.njit(cache=True, nogil=True)
def _k_paths(keys, steps, dt, out):
    sd = math.sqrt(dt)
    spare = np.zeros(1)
    for p in range(keys.size):
        w = 0.0
        out[p, 0] = 0.0
        for i in range(steps):
            w += sd * _normal(keys[p], i, spare)
            out[p, i + 1] = w


def _steps(T, dt):
    if T <= 0 or dt <= 0:
        raise ValueError("T and dt must be positive")
    return int(round(T / dt))


def sample_brownian(T, dt, seed) -> BrownianSample:
    steps = _steps(T, dt)
    out = np.empty((1, steps + 1))
    _k_paths(keys_for(seed, 1), steps, float(dt), out)
    return BrownianSample(float(T), float(dt), out[0], int(seed))


def brownian_paths(count, T, dt, seed, workers=1):
    """``count`` independent grid paths as a ``(count, steps + 1)`` array."""
    steps = _steps(T, dt)
    out = np.empty((int(count), steps + 1))
    keys = keys_for(seed, int(count))
    run_chunked(lambda a, b: _k_paths(keys[a:b], steps, float(dt), out[a:b]), int(count), workers)
    return out


# --------------------------------------------------------------------------
# metric


def path_distance(f, g, dt=None, terms=DISTANCE_TERMS, horizon=None):
    """``sum_{n<=terms} 2^{-n+1} min(1, sup_{[0,n]} |f - g|)``.

    ``f`` and ``g`` are grid arrays with step ``dt`` (or ``BrownianSample``),
    or callables of time evaluated on a grid of step ``dt``.  The neglected
    tail is at most ``truncation_bound(terms)``.
    """
    if isinstance(f, BrownianSample):
        dt = f.dt if dt is None else dt
        f = f.values
    if isinstance(g, BrownianSample):
        dt = g.dt if dt is None else dt
        g = g.values
    if dt is None:
        raise ValueError("dt is required")
    per = int(round(1.0 / dt))
    if abs(per * dt - 1.0) > 1e-12:
        raise ValueError("1/dt must be an integer")
    need = terms * per + 1
    if horizon is not None and horizon < terms:
        raise ValueError(f"horizon {horizon} is shorter than {terms} metric terms")
    t = dt * np.arange(need)
    fv = np.asarray(f(t) if callable(f) else f, dtype=float)
    gv = np.asarray(g(t) if callable(g) else g, dtype=float)
    if len(fv) < need or len(gv) < need:
        raise ValueError(f"paths must cover [0, {terms}]")
    diff = np.abs(fv[:need] - gv[:need])
    sups = np.maximum.accumulate(diff)[per * np.arange(1, terms + 1)]
    weights = 2.0 ** (-np.arange(terms, dtype=float))
    return float(np.sum(weights * np.minimum(1.0, sups)))


# --------------------------------------------------------------------------
# delta_eps


@nb.njit(cache=True, nogil=True)
def _k_range_stats(keys, half, dt, bridge, out):
    """Per path: R_0(1/2), R_{1/2}(1/2), R_1(1/2), R_0^+(1), -R_0^-(1)."""
    sd = math.sqrt(dt)
    spare = np.zeros(1)
    for p in range(keys.size):
        w = 0.0
        i = 0
        top = 0.0
        bottom = 0.0
        for seg in range(3):
            base = w
            hi = 0.0
            lo = 0.0
            for k in range(half):
                w += sd * _normal(keys[p], i, spare)
                i += 1
                d = w - base
                if d > hi:
                    hi = d
                if d < lo:
                    lo = d
                if seg < 2:
                    if w > top:
                        top = w
                    if w < bottom:
                        bottom = w
            out[p, seg] = hi - lo + 2.0 * bridge
        out[p, 3] = top + bridge
        out[p, 4] = -bottom + bridge


@dataclass(frozen=True)
class GridEstimate:
    """Largest grid point whose estimated probability sum is <= eps/2."""

    epsilon: float
    value: float
    radius: float  # half-width of the threshold's confidence interval (includes grid step)
    prob: float  # estimated sum at ``value``
    prob_radius: float  # one standard error of that sum
    lower: float
    upper: float
    samples: int
    dt: float
    bottomed_out: bool = False
    terms: dict = field(default_factory=dict)

    def __float__(self):
        return self.value


def _scan(epsilon, levels, sums, sq, n, dt, terms=None):
    """Pick the largest level with mean sum <= eps/2 and its confidence band."""
    target = epsilon / 2.0
    mean = sums / n
    se = np.sqrt(np.maximum(sq / n - mean**2, 0.0) / n)

    def first(ok):
        idx = np.nonzero(ok)[0]
        return int(idx[0]) if idx.size else len(levels) - 1

    j = first(mean <= target)
    bottomed = not bool(mean[j] <= target)
    lo = levels[first(mean + se <= target)]
    hi = levels[first(mean - se <= target)]
    v = float(levels[j])
    step = v * (1.0 / GRID_RATIO - 1.0)
    radius = max(hi - v, v - lo, step)
    return GridEstimate(
        float(epsilon), v, float(radius), float(mean[j]), float(se[j]), float(lo), float(hi),
        int(n), float(dt), bottomed, {k: float(t[j]) for k, t in (terms or {}).items()},
    )


def range_statistics(mc_samples, dt, seed, bridge=False, workers=1):
    half = _steps(0.5, dt)
    out = np.empty((int(mc_samples), 5))
    keys = keys_for(derive_seed(seed, "delta"), int(mc_samples))
    corr = BRIDGE_C * math.sqrt(dt) if bridge else 0.0
    run_chunked(lambda a, b: _k_range_stats(keys[a:b], half, float(dt), corr, out[a:b]), out.shape[0], workers)
    return out


DELTA_TERMS = ("R0(1/2)", "R1/2(1/2)", "R1(1/2)", "R0+(1)", "-R0-(1)")


def estimate_delta_eps(epsilon, mc_samples=20000, dt=1 / 4096, seed=0, bridge=False, workers=1,
                       floor=1e-6) -> GridEstimate:
    """Grid search for ``delta_eps``; see the module docstring."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    stats = range_statistics(mc_samples, dt, seed, bridge, workers)
    levels = grid(floor)
    n = stats.shape[0]
    sums = np.zeros(len(levels))
    sq = np.zeros(len(levels))
    counts = np.zeros((5, len(levels)))
    for lo in range(0, n, 4096):
        hit = stats[lo : lo + 4096, :, None] < levels[None, None, :]
        counts += hit.sum(axis=0)
        k = hit.sum(axis=1).astype(float)
        sums += k.sum(axis=0)
        sq += (k * k).sum(axis=0)
    terms = {name: counts[c] / n for c, name in enumerate(DELTA_TERMS)}
    return _scan(epsilon, levels, sums, sq, n, dt, terms)


# --------------------------------------------------------------------------
# h_eps


@nb.njit(cache=True, nogil=True)
def _k_first_exceed(keys, steps, dt, level, out):
    """First grid index k <= steps with |W_k| > level (steps + 1 if none)."""
    sd = math.sqrt(dt)
    spare = np.zeros(1)
    for p in range(keys.size):
        w = 0.0
        out[p] = steps + 1
        for i in range(steps):
            w += sd * _normal(keys[p], i, spare)
            if abs(w) > level:
                out[p] = i + 1
                break


@nb.njit(cache=True, nogil=True)
def _k_first_lag(keys, max_lag, per, terms, dt, eps, out):
    """First lag k <= max_lag with d(theta_{k dt} W, W) > eps (max_lag + 1 if none).

    Terms of the series are nondecreasing, so after ``n`` terms the distance
    lies in ``[S_n + 2^{-n+1} t_n, S_n + 2^{-n+1}]``.  A lag still undecided
    after ``terms`` terms counts as a crossing.
    """
    sd = math.sqrt(dt)
    spare = np.zeros(1)
    size = terms * per + max_lag + 1
    w = np.empty(size)
    for p in range(keys.size):
        w[0] = 0.0
        filled = 1
        out[p] = max_lag + 1
        for k in range(1, max_lag + 1):
            partial = 0.0
            sup = 0.0
            crossed = True
            t = 0
            for n in range(1, terms + 1):
                need = n * per + k + 1
                while filled < need:
                    w[filled] = w[filled - 1] + sd * _normal(keys[p], filled - 1, spare)
                    filled += 1
                while t <= n * per:
                    d = abs(w[t + k] - w[t])
                    if d > sup:
                        sup = d
                    t += 1
                term = sup if sup < 1.0 else 1.0
                weight = 2.0 ** (1 - n)
                partial += weight * term
                if partial + weight * term > eps:
                    break
                if partial + weight <= eps:
                    crossed = False
                    break
            if crossed:
                out[p] = k
                break


def estimate_h_eps(epsilon, mc_samples=20000, dt=1 / 4096, seed=0, bridge=False, workers=1,
                   terms=H_TERMS) -> GridEstimate:
    """Grid search for ``h_eps``; see the module docstring."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = int(mc_samples)
    per = _steps(1.0, dt)
    if abs(per * dt - 1.0) > 1e-12:
        raise ValueError("1/dt must be an integer")
    levels = grid(dt)
    keys = keys_for(derive_seed(seed, "h"), n)
    level = epsilon - (BRIDGE_C * math.sqrt(dt) if bridge else 0.0)
    t1 = np.empty(n, dtype=np.int64)
    run_chunked(lambda a, b: _k_first_exceed(keys[a:b], per, float(dt), level, t1[a:b]), n, workers)
    lag_of = np.floor(levels / dt + 1e-9).astype(np.int64)
    p1 = np.array([(t1 <= k).mean() for k in lag_of])
    # d <= 2 always, so the shift term vanishes once eps >= 2
    if epsilon >= 2.0:
        t2 = np.full(n, per + 1, dtype=np.int64)
    else:
        ok = np.nonzero(p1 <= epsilon / 2.0)[0]
        cap = int(lag_of[ok[0]]) if ok.size else int(lag_of[-1])
        t2 = np.empty(n, dtype=np.int64)
        run_chunked(
            lambda a, b: _k_first_lag(keys[a:b], cap, per, int(terms), float(dt), float(epsilon), t2[a:b]),
            n, workers,
        )
    ind1 = t1[:, None] <= lag_of[None, :]
    ind2 = t2[:, None] <= lag_of[None, :]
    tot = ind1.astype(float) + ind2
    p2 = ind2.mean(axis=0)
    return _scan(epsilon, levels, tot.sum(axis=0), (tot**2).sum(axis=0), n, dt,
                 {"sup|W|": p1, "shift": p2})


# --------------------------------------------------------------------------
# thresholds


@dataclass(frozen=True)
class EpsilonThresholds:
    epsilon: float
    delta_eps: float
    h_eps: float
    mc_samples: int
    dt: float
    delta_radius: float
    h_radius: float
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.delta_eps <= 1 and 0 < self.h_eps <= 1):
            raise ValueError("thresholds must lie in (0, 1]")


def estimate_thresholds(epsilon, mc_samples=20000, dt=1 / 4096, seed=0, workers=1, bridge=False):
    d = estimate_delta_eps(epsilon, mc_samples, dt, seed, bridge, workers)
    h = estimate_h_eps(epsilon, mc_samples, dt, seed, bridge, workers)
    return EpsilonThresholds(float(epsilon), d.value, h.value, int(mc_samples), float(dt),
                             d.radius, h.radius, int(seed))


_TABLE_FIELDS = [f for f in EpsilonThresholds.__dataclass_fields__]


def save_thresholds(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=_TABLE_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})


def load_thresholds(path):
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(row for row in fh if not row.startswith("#")):
            out.append(EpsilonThresholds(
                float(rec["epsilon"]), float(rec["delta_eps"]), float(rec["h_eps"]),
                int(rec["mc_samples"]), float(rec["dt"]), float(rec["delta_radius"]),
                float(rec["h_radius"]), int(rec["seed"]),
            ))
    return out


# --------------------------------------------------------------------------
# Brownian side of the functional catalogue


@nb.njit(cache=True, nogil=True)
def _k_unit_stats(keys, steps, dt, supabs, end, integral):
    """Per path on [0, 1]: sup |W|, W(1) and the trapezoid integral of W^2."""
    sd = math.sqrt(dt)
    spare = np.zeros(1)
    for p in range(keys.size):
        w = 0.0
        best = 0.0
        acc = 0.0
        for i in range(steps):
            w += sd * _normal(keys[p], i, spare)
            if abs(w) > best:
                best = abs(w)
            acc += w * w
        supabs[p] = best
        end[p] = w
        integral[p] = dt * (acc - 0.5 * w * w)


@lru_cache(maxsize=8)
def unit_statistics(mc_samples, dt, seed, workers=1):
    """Cached Brownian statistics feeding the functional catalogue."""
    steps = _steps(1.0, dt)
    n = int(mc_samples)
    supabs, end, integral = np.empty(n), np.empty(n), np.empty(n)
    keys = keys_for(derive_seed(seed, "unit"), n)
    run_chunked(lambda a, b: _k_unit_stats(keys[a:b], steps, float(dt), supabs[a:b], end[a:b], integral[a:b]),
                n, workers)
    for arr in (supabs, end, integral):
        arr.setflags(write=False)
    return supabs, end, integral


def packaged_thresholds():
    """Threshold table shipped with the package (10^4 samples, dt = 1/4096)."""
    from importlib.resources import as_file, files

    with as_file(files("conductance_lab").joinpath("data/thresholds.csv")) as path:
        return load_thresholds(path)


def thresholds_for(epsilon, table=None, **estimate_kw):
    """Row of ``table`` (default: the packaged one) for ``epsilon``; estimated if absent."""
    rows = packaged_thresholds() if table is None else table
    for row in rows:
        if math.isclose(row.epsilon, epsilon, rel_tol=1e-12):
            return row
    return estimate_thresholds(epsilon, **estimate_kw)
