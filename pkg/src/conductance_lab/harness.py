"""Experiments: diffusivity, good/nice sites and the uniform CLT sweep.

All Monte Carlo here runs on the walk kernels with one stream key per path,
derived from the master seed by labelled hashing, so every table is a pure
function of its configuration.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numba as nb
import numpy as np

from .environment import Environment
from .reference import unit_statistics
from .rng import derive_seed
from .walk import (
    DEFAULT_MARGIN_C,
    _raise_on_abort,
    _step,
    endpoint_displacements,
    keys_for,
    path_functionals,
    required_margin,
    run_chunked,
    sampler_for,
    zone_check,
)

BALL_RADIUS = 1.0
ENDPOINT_QUANTILE = 0.6744897501960817  # upper quartile of N(0, 1)

# --------------------------------------------------------------------------
# functional and set catalogue, evaluated on (sup |w|, w(1), int_0^1 w^2)

FUNCTIONALS = {
    "F1": lambda sup, end, integral: np.minimum(1.0, sup),
    "F2": lambda sup, end, integral: np.cos(end),
    "F3": lambda sup, end, integral: np.clip(end, 0.0, 1.0),
    "F4": lambda sup, end, integral: np.exp(-integral),
    "const": lambda sup, end, integral: np.ones_like(sup),
}
CATALOGUE = ("F1", "F2", "F3", "F4")

SETS = {
    "ball": lambda sup, end: sup <= BALL_RADIUS,  # closed
    "ball_complement": lambda sup, end: sup > BALL_RADIUS,  # open
    "endpoint": lambda sup, end: end <= ENDPOINT_QUANTILE,  # continuity set
}


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    n = values.size
    mean = float(values.mean())
    se = float(values.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, se


def rescaled_statistics(supabs, endpoint, sumsq, n, sigma):
    """Map raw walk statistics to those of ``Z^n`` on ``[0, 1]``."""
    c = 1.0 / (sigma * math.sqrt(n))
    return c * supabs, c * endpoint, c * c * sumsq / n


# --------------------------------------------------------------------------
# sigma


@dataclass(frozen=True)
class SigmaEstimate:
    sigma: float
    standard_error: float
    n_list: tuple
    paths_per_n: int
    env_id: str
    variances: tuple
    variance_se: tuple
    seed: int

    @property
    def sigma2(self):
        return self.sigma**2

    @property
    def sigma2_se(self):
        return 2.0 * self.sigma * self.standard_error


def estimate_sigma(env: Environment, n_list, paths_per_n, seed, starts=(0,), workers=1,
                   margin_c=DEFAULT_MARGIN_C) -> SigmaEstimate:
    """Weighted least squares of ``Var(X_n - X_0)`` on ``n`` through the origin.

    Each ``n`` gets its own set of paths; path ``p`` starts at
    ``starts[p % len(starts)]``.
    """
    n_list = tuple(sorted(int(n) for n in n_list))
    if len(n_list) < 3 or n_list[-1] < 10 * n_list[0]:
        raise ValueError("n_list needs at least three values spanning a decade")
    starts = np.asarray(starts, dtype=np.int64)
    P = int(paths_per_n)
    path_starts = starts[np.arange(P) % starts.size]
    variances, ses = [], []
    for n in n_list:
        keys = keys_for(derive_seed(seed, "sigma", n), P)
        d = endpoint_displacements(env, path_starts, keys, [n], workers, margin_c)[:, 0].astype(float)
        c = d - d.mean()
        v = float(c @ c / (P - 1))
        m4 = float(np.mean(c**4))
        variances.append(v)
        ses.append(math.sqrt(max(m4 - v * v, 1e-300) / P))
    ns = np.asarray(n_list, dtype=float)
    w = 1.0 / np.asarray(ses) ** 2
    slope = float(np.sum(w * ns * np.asarray(variances)) / np.sum(w * ns * ns))
    slope_se = float(1.0 / math.sqrt(np.sum(w * ns * ns)))
    sigma = math.sqrt(slope)
    return SigmaEstimate(sigma, slope_se / (2.0 * sigma), n_list, P, env.env_id,
                         tuple(variances), tuple(ses), int(seed))


# --------------------------------------------------------------------------
# site classification


@nb.njit(cache=True, inline="always")
def _window_extremes(buf, start, length, hi_out, lo_out):
    """Max and min of every window ``buf[k : k + length + 1]``, ``k <= start``."""
    hi = np.empty(start + length + 1, dtype=np.int64)
    lo = np.empty(start + length + 1, dtype=np.int64)
    hh = 0
    ht = 0
    lh = 0
    lt = 0
    for t in range(start + length + 1):
        while ht > hh and buf[hi[ht - 1]] <= buf[t]:
            ht -= 1
        hi[ht] = t
        ht += 1
        while lt > lh and buf[lo[lt - 1]] >= buf[t]:
            lt -= 1
        lo[lt] = t
        lt += 1
        k = t - length
        if k >= 0:
            while hi[hh] < k:
                hh += 1
            while lo[lh] < k:
                lh += 1
            hi_out[k] = buf[hi[hh]]
            lo_out[k] = buf[lo[lh]]


@nb.njit(cache=True, inline="always")
def _shift_distance_exceeds(buf, lag, n, terms, scale, eps):
    """Whether ``d(theta_{lag/n} Z, Z) > eps`` for the knot path ``Z = scale * buf``.

    Undecided after ``terms`` terms counts as exceeding.
    """
    partial = 0.0
    sup = 0.0
    t = 0
    for m in range(1, terms + 1):
        while t <= m * n:
            d = abs(buf[t + lag] - buf[t]) * scale
            if d > sup:
                sup = d
            t += 1
        term = sup if sup < 1.0 else 1.0
        weight = 2.0 ** (1 - m)
        partial += weight * term
        if partial + weight * term > eps:
            return True
        if partial + weight <= eps:
            return False
    return True


@nb.njit(cache=True, nogil=True)
def _k_site(prob, alias, lo, R, starts, keys, steps, hn, frac, thr, scale, n, terms, eps, margin,
            full, nice, good2, good3, status):
    buf = np.empty(steps + 1, dtype=np.int64)
    whi = np.empty(hn + 1, dtype=np.int64)
    wlo = np.empty(hn + 1, dtype=np.int64)
    for p in range(starts.size):
        x0 = starts[p]
        x = x0
        buf[0] = 0
        status[p] = 0
        for k in range(steps):
            x = _step(prob, alias, lo, R, x, keys[p], k)
            if x - x0 > margin or x0 - x > margin:
                status[p] = 1
                break
            buf[k + 1] = x - x0
        if status[p]:
            continue
        top = 0
        bottom = 0
        for k in range(hn + 1):
            if buf[k] > top:
                top = buf[k]
            if buf[k] < bottom:
                bottom = buf[k]
        nice[p] = (top - bottom) >= thr
        if not full:
            continue
        # (ii): every range over [k, k + hn], k <= hn, and both one-sided ranges from 0
        ok = top >= thr and -bottom >= thr
        if ok:
            _window_extremes(buf, hn, hn, whi, wlo)
            for k in range(hn + 1):
                if whi[k] - wlo[k] < thr:
                    ok = False
                    break
        good2[p] = ok
        # (iii): sup_{s <= h} |Z(s)| and the shift distance at knot lags
        best = 0.0
        for k in range(hn + 1):
            v = abs(buf[k]) * scale
            if v > best:
                best = v
        edge = abs(buf[hn] + frac * (buf[hn + 1] - buf[hn])) * scale
        if edge > best:
            best = edge
        ok = best <= eps
        if ok:
            for lag in range(1, hn + 1):
                if _shift_distance_exceeds(buf, lag, n, terms, scale, eps):
                    ok = False
                    break
        good3[p] = ok


@dataclass(frozen=True)
class SiteClassification:
    x: int
    epsilon: float
    n: int
    samples: int
    nice_prob: float
    nice_radius: float
    is_nice: bool
    ii_prob: float = float("nan")
    ii_radius: float = float("nan")
    iii_prob: float = float("nan")
    iii_radius: float = float("nan")
    item_i: dict = field(default_factory=dict)  # m -> max_F discrepancy
    item_i_radius: dict = field(default_factory=dict)
    good_i: bool = False
    good_ii: bool = False
    good_iii: bool = False
    mode: str = "full"
    surrogate_note: str = "item (i) evaluated on a finite m-grid"

    @property
    def is_good(self):
        return self.good_i and self.good_ii and self.good_iii


def _binomial(flags):
    p = float(np.mean(flags))
    return p, math.sqrt(max(p * (1.0 - p), 0.0) / len(flags))


def _brownian_means(functionals, samples, dt, seed, workers=1):
    sup, end, integral = unit_statistics(int(samples), float(dt), int(seed), workers)
    return {F: _mean_se(FUNCTIONALS[F](sup, end, integral)) for F in functionals}


def classify_site(env, x, epsilon, n, thresholds, sigma, mc_samples=400, seed=0, mode="full",
                  m_grid=None, metric_terms=6, brownian_samples=20000, brownian_dt=1 / 4096,
                  workers=1, margin_c=DEFAULT_MARGIN_C) -> SiteClassification:
    """Monte Carlo check of the good-site items at ``m = n`` and of niceness.

    Path keys depend on ``(seed, n)`` only, not on ``x``, so on a homogeneous
    field every site sees the same relative trajectories.
    """
    if mode not in ("full", "nice"):
        raise ValueError("mode must be 'full' or 'nice'")
    n = int(n)
    h, delta = thresholds.h_eps, thresholds.delta_eps
    hn = int(math.floor(h * n))
    frac = h * n - hn
    thr = delta * math.sqrt(h) * sigma * math.sqrt(n)
    scale = 1.0 / (sigma * math.sqrt(n))
    full = mode == "full"
    steps = max(2 * hn, metric_terms * n + hn, hn + 1) if full else hn
    P = int(mc_samples)
    sampler = sampler_for(env)
    margin = required_margin(max(steps, 1), margin_c, env.truncation_radius)
    zone_check(sampler, [x], margin)
    starts = np.full(P, int(x), dtype=np.int64)
    keys = keys_for(derive_seed(seed, "site", n), P)
    nice = np.zeros(P, dtype=np.bool_)
    g2 = np.zeros(P, dtype=np.bool_)
    g3 = np.zeros(P, dtype=np.bool_)
    status = np.zeros(P, dtype=np.int8)

    def work(a, b):
        _k_site(sampler.prob, sampler.alias, sampler.lo, sampler.R, starts[a:b], keys[a:b], steps, hn,
                frac, thr, scale, n, int(metric_terms), float(epsilon), margin, full,
                nice[a:b], g2[a:b], g3[a:b], status[a:b])

    run_chunked(work, P, workers)
    _raise_on_abort(status)
    p_nice, r_nice = _binomial(nice)
    is_nice = p_nice >= 1.0 - 3.0 * epsilon
    if not full:
        return SiteClassification(int(x), float(epsilon), n, P, p_nice, r_nice, is_nice, mode="nice")
    p2, r2 = _binomial(g2)
    p3, r3 = _binomial(g3)
    m_grid = tuple(m_grid) if m_grid is not None else (max(n // 4, 1), max(n // 2, 1), n)
    bm = _brownian_means(CATALOGUE, brownian_samples, brownian_dt, derive_seed(seed, "bm"), workers)
    item_i, item_i_r = {}, {}
    for m in m_grid:
        mkeys = keys_for(derive_seed(seed, "item-i", m), P)
        stats = rescaled_statistics(*path_functionals(env, starts, mkeys, m, workers, margin_c), m, sigma)
        worst, worst_r = 0.0, 0.0
        for F in CATALOGUE:
            mean, se = _mean_se(FUNCTIONALS[F](*stats))
            dis = abs(mean - bm[F][0])
            if dis >= worst:
                worst, worst_r = dis, math.hypot(se, bm[F][1])
        item_i[int(m)] = worst
        item_i_r[int(m)] = worst_r
    return SiteClassification(
        int(x), float(epsilon), n, P, p_nice, r_nice, is_nice, p2, r2, p3, r3, item_i, item_i_r,
        good_i=all(v <= epsilon for v in item_i.values()),
        good_ii=p2 >= 1.0 - epsilon,
        good_iii=p3 >= 1.0 - epsilon,
    )


@dataclass(frozen=True)
class DensityReport:
    epsilon: float
    n: int
    nu: float
    H: float
    interval_length: int
    budget: int
    intervals: tuple  # (lo, hi, sites tested, first nice site or None)

    @property
    def fraction(self):
        return sum(1 for iv in self.intervals if iv[3] is not None) / len(self.intervals)


def nice_site_density_scan(env, epsilon, n, nu, thresholds, sigma, mc=200, seed=0, H=1.0, budget=4,
                           workers=1, margin_c=DEFAULT_MARGIN_C) -> DensityReport:
    """Fraction of length-``n^nu`` intervals of ``[-2H sqrt n, 2H sqrt n]`` holding a detected nice site.

    Sites in an interval are tried in a fixed seeded order, stopping at the
    first nice one, so the fraction can only grow with ``budget``.
    """
    beta = env.tail_beta
    if not 1.0 / (2.0 + beta) < nu < 0.5:
        raise ValueError(f"nu must lie in (1/(2+beta), 1/2) = ({1 / (2 + beta):.4f}, 0.5)")
    half = int(math.floor(2.0 * H * math.sqrt(n)))
    length = max(1, int(math.ceil(n**nu)))
    cache = {}
    intervals = []
    for lo in range(-half, half + 1, length):
        hi = min(lo + length - 1, half)
        order = np.random.default_rng(derive_seed(seed, "density", n, lo)).permutation(np.arange(lo, hi + 1))
        found, tested = None, 0
        for x in order[:budget]:
            x = int(x)
            tested += 1
            if x not in cache:
                cache[x] = classify_site(env, x, epsilon, n, thresholds, sigma, mc, seed, mode="nice",
                                         workers=workers, margin_c=margin_c).is_nice
            if cache[x]:
                found = x
                break
        intervals.append((lo, hi, tested, found))
    return DensityReport(float(epsilon), int(n), float(nu), float(H), length, int(budget), tuple(intervals))


# --------------------------------------------------------------------------
# uniform CLT


@dataclass(frozen=True)
class GridPolicy:
    """Start points: every ``spacing``-th site of ``[-H n^alpha, H n^alpha]`` plus seeded extras."""

    alpha: float = 0.5
    spacing: int | None = None  # default ceil(sqrt(n) / 10)
    extra: int = 32

    def points(self, n, H, seed):
        half = int(math.floor(H * n**self.alpha))
        step = self.spacing or max(1, int(math.ceil(math.sqrt(n) / 10)))
        regular = np.arange(-(half // step) * step, half + 1, step)
        rng = np.random.default_rng(derive_seed(seed, "grid", n))
        extra = rng.integers(-half, half + 1, size=self.extra)
        return np.unique(np.concatenate([regular, extra])).astype(np.int64)


@dataclass(frozen=True)
class StartRow:
    n: int
    functional: str
    x: int
    walk_mean: float
    walk_se: float
    bm_mean: float
    bm_se: float
    discrepancy: float
    radius: float


@dataclass(frozen=True)
class SupRow:
    n: int
    functional: str
    sup: float
    radius: float
    argmax: int
    grid_size: int


@dataclass(frozen=True)
class SetRow:
    n: int
    set: str
    sup_prob: float
    inf_prob: float
    bm_prob: float
    sup_radius: float
    inf_radius: float


@dataclass
class UcltReport:
    env_id: str
    H: float
    alpha: float
    sigma: float
    n_list: tuple
    functionals: tuple
    paths_per_start: int
    brownian_samples: int
    brownian_dt: float
    seed: int
    grids: dict
    rows: list
    sups: list
    sets: list
    config: dict = field(default_factory=dict)

    def sup(self, n, functional):
        for r in self.sups:
            if r.n == n and r.functional == functional:
                return r
        raise KeyError((n, functional))

    def sup_column(self, functional):
        return [self.sup(n, functional) for n in self.n_list]

    def trend_ok(self, functional, k=3.0):
        """Sup discrepancy nonincreasing along ``n_list`` up to ``k`` joint radii."""
        col = self.sup_column(functional)
        return all(b.sup <= a.sup + k * math.hypot(a.radius, b.radius) for a, b in zip(col, col[1:]))

    def exceeds(self, functional, threshold, k=3.0, n=None):
        r = self.sup(self.n_list[-1] if n is None else n, functional)
        return r.sup - k * r.radius > threshold

    def to_text(self):
        doc = {
            "env_id": self.env_id, "H": self.H, "alpha": self.alpha, "sigma": self.sigma,
            "n_list": list(self.n_list), "functionals": list(self.functionals),
            "paths_per_start": self.paths_per_start, "brownian_samples": self.brownian_samples,
            "brownian_dt": self.brownian_dt, "seed": self.seed,
            "grids": {str(n): [int(x) for x in g] for n, g in self.grids.items()},
            "sups": [asdict(r) for r in self.sups], "sets": [asdict(r) for r in self.sets],
            "config": self.config,
        }
        return json.dumps(doc, sort_keys=True, indent=1)

    def write(self, outdir, prefix="uclt", echo=()):
        """Write per-start, per-sup and per-set CSV tables plus a gnuplot script."""
        import os

        os.makedirs(outdir, exist_ok=True)
        paths = {}
        for name, rows, cls in (("starts", self.rows, StartRow), ("sup", self.sups, SupRow),
                                ("sets", self.sets, SetRow)):
            path = os.path.join(outdir, f"{prefix}_{name}.csv")
            _write_csv(path, rows, cls, echo)
            paths[name] = path
        paths["report"] = os.path.join(outdir, f"{prefix}_report.json")
        with open(paths["report"], "w") as fh:
            fh.write(self.to_text() + "\n")
        paths["plot"] = os.path.join(outdir, f"{prefix}_plot.gp")
        with open(paths["plot"], "w") as fh:
            fh.write(gnuplot_script(os.path.basename(paths["sup"]), self.functionals, prefix))
        return paths


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _write_csv(path, rows, cls, echo=()):
    names = list(cls.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        for line in echo:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in names])


def gnuplot_script(sup_csv, functionals, prefix="uclt"):
    cols = ", \\\n     ".join(
        f"'{sup_csv}' using (strcol(2) eq '{F}' ? $1 : 1/0):3:4 with yerrorlines title '{F}'" for F in functionals
    )
    return (
        "set datafile separator ','\n"
        "set logscale x\n"
        "set xlabel 'n'\n"
        "set ylabel 'sup_x |E F(Z^n) - E F(W)|'\n"
        f"set output '{prefix}_sup.png'\n"
        "set terminal pngcairo size 800,500\n"
        "set key autotitle columnhead\n"
        f"plot {cols}\n"
    )


def uclt_experiment(env, H, n_list, functionals=CATALOGUE, grid_policy=GridPolicy(), sigma=1.0,
                    mc=1000, seed=0, brownian_samples=100000, brownian_dt=1 / 4096, workers=1,
                    margin_c=DEFAULT_MARGIN_C) -> UcltReport:
    """Sup over a start grid of ``|E_x F(Z^n) - E F(W)|`` for each ``n`` and ``F``."""
    for F in functionals:
        if F not in FUNCTIONALS:
            raise ValueError(f"unknown functional {F!r}; catalogue: {sorted(FUNCTIONALS)}")
    n_list = tuple(int(n) for n in n_list)
    bm_seed = derive_seed(seed, "bm")
    bsup, bend, bint = unit_statistics(int(brownian_samples), float(brownian_dt), bm_seed, workers)
    bm = {F: _mean_se(FUNCTIONALS[F](bsup, bend, bint)) for F in functionals}
    bm_sets = {S: _mean_se(SETS[S](bsup, bend).astype(float)) for S in SETS}
    rows, sups, set_rows, grids = [], [], [], {}
    for n in n_list:
        xs = grid_policy.points(n, H, seed)
        grids[n] = xs
        per_F = {F: [] for F in functionals}
        per_S = {S: [] for S in SETS}
        for x in xs:
            keys = keys_for(derive_seed(seed, "uclt", n, int(x)), int(mc))
            starts = np.full(int(mc), int(x), dtype=np.int64)
            stats = rescaled_statistics(*path_functionals(env, starts, keys, n, workers, margin_c), n, sigma)
            for F in functionals:
                mean, se = _mean_se(FUNCTIONALS[F](*stats))
                b_mean, b_se = bm[F]
                row = StartRow(n, F, int(x), mean, se, b_mean, b_se, abs(mean - b_mean), math.hypot(se, b_se))
                rows.append(row)
                per_F[F].append(row)
            for S in SETS:
                per_S[S].append(int(np.count_nonzero(SETS[S](stats[0], stats[1]))))
        for F in functionals:
            best = max(per_F[F], key=lambda r: r.discrepancy)
            sups.append(SupRow(n, F, best.discrepancy, best.radius, best.x, len(xs)))
        for S in SETS:
            counts = np.asarray(per_S[S])
            hi, lo = counts.max() / mc, counts.min() / mc
            set_rows.append(SetRow(n, S, float(hi), float(lo), bm_sets[S][0],
                                   math.hypot(math.sqrt(hi * (1 - hi) / mc), bm_sets[S][1]),
                                   math.hypot(math.sqrt(lo * (1 - lo) / mc), bm_sets[S][1])))
    return UcltReport(
        env.env_id, float(H), float(grid_policy.alpha), float(sigma), n_list, tuple(functionals), int(mc),
        int(brownian_samples), float(brownian_dt), int(seed), grids, rows, sups, set_rows,
        config={"grid_spacing": grid_policy.spacing, "grid_extra": grid_policy.extra, "margin_c": margin_c},
    )


def counterexample_consistent(report: UcltReport, threshold=0.1, k=3.0):
    """Some functional's sup discrepancy at the largest n exceeds ``threshold`` by ``k`` radii."""
    return any(report.exceeds(F, threshold, k) for F in report.functionals)
