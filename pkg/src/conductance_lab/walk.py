"""Quenched random walk: sampling, trajectories and path statistics.

Jumps are drawn with per-site alias tables over the ``2R + 1`` offsets,
compiled once per environment.  All ensemble kernels take one start site and
one stream key per path, so an ensemble's output is a function of
``(env, starts, keys)`` alone.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba as nb
import numpy as np

from .environment import Environment, WindowError
from .rng import as_key, stream_key, uniform

DEFAULT_MARGIN_C = 6.0
_SAMPLER_CACHE_SIZE = 4


class MarginError(WindowError):
    """The window cannot hold the safety margin a walk needs."""


class WalkAborted(RuntimeError):
    """A walk left its safe zone; ``path`` holds the trajectory up to the exit."""

    def __init__(self, message, path=None, path_index=None):
        super().__init__(message)
        self.path = path
        self.path_index = path_index


def required_margin(n_steps, c=DEFAULT_MARGIN_C, R=1):
    """Half-width ``c * sqrt(n) * log(n)`` of the zone a walk may not leave."""
    n = max(int(n_steps), 3)
    return max(int(R), int(math.ceil(c * math.sqrt(n) * math.log(n))))


# --------------------------------------------------------------------------
# alias tables


@nb.njit(cache=True)
def _build_alias(table):
    m, K = table.shape
    prob = np.empty((m, K))
    alias = np.empty((m, K), dtype=np.int32)
    small = np.empty(K, dtype=np.int64)
    large = np.empty(K, dtype=np.int64)
    scaled = np.empty(K)
    for r in range(m):
        total = 0.0
        best = 0
        for j in range(K):
            total += table[r, j]
            if table[r, j] > table[r, best]:
                best = j
        ns = 0
        nl = 0
        for j in range(K):
            scaled[j] = table[r, j] * K / total
            if scaled[j] < 1.0:
                small[ns] = j
                ns += 1
            else:
                large[nl] = j
                nl += 1
        while ns > 0 and nl > 0:
            ns -= 1
            s = small[ns]
            nl -= 1
            g = large[nl]
            prob[r, s] = scaled[s]
            alias[r, s] = g
            scaled[g] = (scaled[g] + scaled[s]) - 1.0
            if scaled[g] < 1.0:
                small[ns] = g
                ns += 1
            else:
                large[nl] = g
                nl += 1
        while nl > 0:
            nl -= 1
            g = large[nl]
            prob[r, g] = 1.0
            alias[r, g] = g
        while ns > 0:
            ns -= 1
            s = small[ns]
            # leftovers are rounding residue of mass ~1; never promote a null outcome
            if scaled[s] > 0.5:
                prob[r, s] = 1.0
                alias[r, s] = s
            else:
                prob[r, s] = 0.0
                alias[r, s] = best
    return prob, alias


class JumpSampler:
    """Alias tables for every interior site of an environment."""

    def __init__(self, env: Environment):
        lo, hi = env.interior
        if lo > hi:
            raise WindowError("environment has no interior sites")
        table = env.jump_table(lo, hi)
        self.lo = lo
        self.hi = hi
        self.R = env.truncation_radius
        self.C = table.sum(axis=1)
        self.prob, self.alias = _build_alias(table)
        self.env_id = env.env_id


_samplers: OrderedDict = OrderedDict()


def sampler_for(env: Environment) -> JumpSampler:
    """Bounded per-process cache; correctness never depends on a hit."""
    key = (env.env_id, env.window)
    sampler = _samplers.get(key)
    if sampler is None:
        sampler = JumpSampler(env)
        _samplers[key] = sampler
        while len(_samplers) > _SAMPLER_CACHE_SIZE:
            _samplers.popitem(last=False)
    else:
        _samplers.move_to_end(key)
    return sampler


@nb.njit(cache=True, inline="always")
def _step(prob, alias, lo, R, x, key, counter):
    K = prob.shape[1]
    u = uniform(key, counter) * K
    j = int(u)
    if j >= K:
        j = K - 1
    i = x - lo
    a = alias[i, j]
    j = j if u - j < prob[i, j] else a  # branchless: the test is a coin flip
    return x + j - R


@nb.njit(cache=True)
def path_keys(base, indices):
    out = np.empty(indices.size, dtype=np.uint64)
    for i in range(indices.size):
        out[i] = stream_key(base, indices[i])
    return out


def keys_for(seed, count, offset=0):
    return path_keys(as_key(seed), np.arange(offset, offset + count, dtype=np.int64))


def run_chunked(fn, n_items, workers=1, min_chunk=64):
    """Call ``fn(lo, hi)`` over a partition of ``range(n_items)``.

    Kernels write disjoint output slices, so the result does not depend on
    ``workers``.
    """
    workers = max(1, int(workers))
    if workers == 1 or n_items <= min_chunk:
        fn(0, n_items)
        return
    n_chunks = min(n_items // min_chunk, 4 * workers)
    bounds = np.linspace(0, n_items, n_chunks + 1).astype(int)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        list(pool.map(lambda k: fn(bounds[k], bounds[k + 1]), range(n_chunks)))


def zone_check(sampler: JumpSampler, starts, margin):
    starts = np.asarray(starts)
    if starts.size == 0:
        return
    lo, hi = int(starts.min()) - margin, int(starts.max()) + margin
    if lo < sampler.lo or hi > sampler.hi:
        raise MarginError(
            f"safe zone [{lo}, {hi}] exceeds the interior [{sampler.lo}, {sampler.hi}]"
        )


# --------------------------------------------------------------------------
# kernels


@nb.njit(cache=True, nogil=True)
def _k_path(prob, alias, lo, R, start, n, key, zlo, zhi, out):
    x = start
    out[0] = x
    for k in range(n):
        x = _step(prob, alias, lo, R, x, key, k)
        out[k + 1] = x
        if x < zlo or x > zhi:
            return k + 1
    return n


@nb.njit(cache=True, nogil=True)
def _k_checkpoints(prob, alias, lo, R, starts, keys, checkpoints, margin, out, status):
    for p in range(starts.size):
        x = starts[p]
        zlo = x - margin
        zhi = x + margin
        c = 0
        k = 0
        status[p] = 0
        while c < checkpoints.size:
            while k < checkpoints[c]:
                x = _step(prob, alias, lo, R, x, keys[p], k)
                k += 1
                if x < zlo or x > zhi:
                    status[p] = 1
                    break
            if status[p]:
                break
            out[p, c] = x - starts[p]
            c += 1


@nb.njit(cache=True, nogil=True)
def _k_functionals(prob, alias, lo, R, starts, keys, n, margin, supabs, endpoint, sumsq, status):
    """Per path: max |X_k - X_0|, X_n - X_0 and the trapezoid sum of (X_k - X_0)^2."""
    for p in range(starts.size):
        x0 = starts[p]
        x = x0
        best = 0
        acc = 0.0
        status[p] = 0
        for k in range(n):
            x = _step(prob, alias, lo, R, x, keys[p], k)
            d = x - x0
            if d > margin or d < -margin:
                status[p] = 1
                break
            if abs(d) > best:
                best = abs(d)
            acc += float(d) * float(d)
        d = float(x - x0)
        supabs[p] = best
        endpoint[p] = d
        sumsq[p] = acc - 0.5 * d * d


@nb.njit(cache=True, nogil=True)
def _k_exit(prob, alias, lo, R, starts, keys, a, b, max_steps, site, time, status):
    for p in range(starts.size):
        x = starts[p]
        status[p] = 1
        for k in range(max_steps):
            x = _step(prob, alias, lo, R, x, keys[p], k)
            if x <= a or x >= b:
                site[p] = x
                time[p] = k + 1
                status[p] = 0
                break


@nb.njit(cache=True, nogil=True)
def _k_long_jump(prob, alias, lo, R, starts, keys, n_jumps, threshold, margin, hit, status):
    for p in range(starts.size):
        x0 = starts[p]
        x = x0
        hit[p] = 0
        status[p] = 0
        for k in range(n_jumps):
            y = _step(prob, alias, lo, R, x, keys[p], k)
            if abs(y - x) >= threshold:
                hit[p] = 1
                break
            x = y
            if x - x0 > margin or x0 - x > margin:
                status[p] = 1
                break


@nb.njit(cache=True, nogil=True)
def _k_one_step(prob, alias, lo, R, x, key, count, counts):
    for k in range(count):
        y = _step(prob, alias, lo, R, x, key, k)
        counts[y - x + R] += 1


# --------------------------------------------------------------------------
# public API


@dataclass(frozen=True)
class RangeStats:
    r_plus: int
    r_minus: int
    r: int
    base: int
    horizon: int


@dataclass(frozen=True, eq=False)
class Path:
    start: int
    steps: np.ndarray
    env_id: str
    seed: int

    @property
    def n(self):
        return len(self.steps) - 1

    def range_stats(self, base, horizon):
        return range_stats(self, base, horizon)


@dataclass(frozen=True, eq=False)
class RescaledPath:
    """Polygonal interpolation through the knots ``(k/n, X_k / (sigma sqrt n))``."""

    source: Path
    n: int
    sigma: float

    @property
    def horizon(self):
        return self.source.n / self.n

    def knots(self):
        return np.asarray(self.source.steps, dtype=float) / (self.sigma * math.sqrt(self.n))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        nt = self.n * t
        if np.any(nt < 0) or np.any(nt > self.source.n):
            raise ValueError(f"t outside [0, {self.horizon}]")
        k = np.floor(nt).astype(np.int64)
        frac = nt - k
        X = np.asarray(self.source.steps, dtype=float)
        nxt = np.minimum(k + 1, self.source.n)
        val = X[k] + frac * (X[nxt] - X[k])
        out = val / (self.sigma * math.sqrt(self.n))
        return float(out) if out.ndim == 0 else out


def transition_probability(env: Environment, x: int, y: int) -> float:
    C = env.total_conductance(x)
    if abs(x - y) > env.truncation_radius:
        return 0.0
    return env.conductance(x, y) / C


def simulate(env: Environment, start: int, n_steps: int, seed, margin_c=DEFAULT_MARGIN_C) -> Path:
    """One quenched trajectory ``X_0 = start, ..., X_n``."""
    n_steps = int(n_steps)
    if n_steps < 0:
        raise ValueError("n_steps must be nonnegative")
    if n_steps == 0:
        if not env.is_interior(start):
            raise MarginError(f"start {start} is not interior")
        return Path(int(start), np.array([start], dtype=np.int64), env.env_id, int(seed))
    sampler = sampler_for(env)
    margin = required_margin(n_steps, margin_c, env.truncation_radius)
    zone_check(sampler, [start], margin)
    out = np.empty(n_steps + 1, dtype=np.int64)
    key = keys_for(seed, 1)[0]
    done = _k_path(sampler.prob, sampler.alias, sampler.lo, sampler.R, int(start), n_steps,
                   key, int(start) - margin, int(start) + margin, out)
    path = Path(int(start), out[: done + 1].copy(), env.env_id, int(seed))
    if done < n_steps:
        raise WalkAborted(f"walk left the safe zone at step {done}", path=path)
    return path


def endpoint_displacements(env, starts, keys, checkpoints, workers=1, margin_c=DEFAULT_MARGIN_C):
    """``X_t - X_0`` for every path and every checkpoint ``t`` (sorted)."""
    sampler = sampler_for(env)
    checkpoints = np.asarray(checkpoints, dtype=np.int64)
    starts = np.asarray(starts, dtype=np.int64)
    margin = required_margin(int(checkpoints.max()), margin_c, env.truncation_radius)
    zone_check(sampler, starts, margin)
    out = np.zeros((starts.size, checkpoints.size), dtype=np.int64)
    status = np.zeros(starts.size, dtype=np.int8)

    def work(a, b):
        _k_checkpoints(sampler.prob, sampler.alias, sampler.lo, sampler.R, starts[a:b],
                       keys[a:b], checkpoints, margin, out[a:b], status[a:b])

    run_chunked(work, starts.size, workers)
    _raise_on_abort(status)
    return out


def path_functionals(env, starts, keys, n, workers=1, margin_c=DEFAULT_MARGIN_C):
    """Raw per-path statistics feeding the functional catalogue."""
    sampler = sampler_for(env)
    starts = np.asarray(starts, dtype=np.int64)
    margin = required_margin(n, margin_c, env.truncation_radius)
    zone_check(sampler, starts, margin)
    supabs = np.zeros(starts.size)
    endpoint = np.zeros(starts.size)
    sumsq = np.zeros(starts.size)
    status = np.zeros(starts.size, dtype=np.int8)

    def work(a, b):
        _k_functionals(sampler.prob, sampler.alias, sampler.lo, sampler.R, starts[a:b], keys[a:b],
                       int(n), margin, supabs[a:b], endpoint[a:b], sumsq[a:b], status[a:b])

    run_chunked(work, starts.size, workers)
    _raise_on_abort(status)
    return supabs, endpoint, sumsq


def exit_samples(env, a, b, starts, keys, max_steps=10**7, workers=1):
    """Exit site and exit time from ``(a, b)`` for each path."""
    sampler = sampler_for(env)
    R = env.truncation_radius
    if a - R < sampler.lo - R or b + R > sampler.hi + R or a + 1 < sampler.lo or b - 1 > sampler.hi:
        raise MarginError(f"interval ({a}, {b}) too close to the window edge")
    starts = np.asarray(starts, dtype=np.int64)
    site = np.zeros(starts.size, dtype=np.int64)
    time = np.zeros(starts.size, dtype=np.int64)
    status = np.zeros(starts.size, dtype=np.int8)

    def work(lo, hi):
        _k_exit(sampler.prob, sampler.alias, sampler.lo, sampler.R, starts[lo:hi], keys[lo:hi],
                int(a), int(b), int(max_steps), site[lo:hi], time[lo:hi], status[lo:hi])

    run_chunked(work, starts.size, workers)
    if status.any():
        raise WalkAborted(f"{int(status.sum())} walks did not exit within {max_steps} steps")
    return site, time


def one_step_counts(env, x, n_samples, seed):
    """Histogram of ``X_1 - X_0`` over offsets ``-R..R`` from site ``x``."""
    sampler = sampler_for(env)
    if not sampler.lo <= x <= sampler.hi:
        raise WindowError(f"site {x} is not interior")
    counts = np.zeros(2 * sampler.R + 1, dtype=np.int64)
    _k_one_step(sampler.prob, sampler.alias, sampler.lo, sampler.R, int(x),
                keys_for(seed, 1)[0], int(n_samples), counts)
    return counts


def _raise_on_abort(status):
    bad = np.nonzero(status)[0]
    if bad.size:
        raise WalkAborted(f"{bad.size} walks left the safe zone", path_index=int(bad[0]))


def rescale(path: Path, n: int, sigma: float, horizon=None) -> RescaledPath:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    if horizon is not None and n * horizon > path.n:
        raise ValueError(f"path of length {path.n} is shorter than n*T = {n * horizon}")
    return RescaledPath(path, int(n), float(sigma))


def range_stats(path: Path, base: int, horizon: int) -> RangeStats:
    if base < 0 or horizon < 0 or base + horizon > path.n:
        raise ValueError(f"base {base} + horizon {horizon} overruns path of length {path.n}")
    seg = np.asarray(path.steps[base : base + horizon + 1]) - path.steps[base]
    hi, lo = int(seg.max()), int(seg.min())
    return RangeStats(hi, lo, hi - lo, int(base), int(horizon))


def jump_exceedance(env, threshold, lo=None, hi=None):
    """Per-site probability that one jump has length >= ``threshold``."""
    lo = env.interior[0] if lo is None else lo
    hi = env.interior[1] if hi is None else hi
    table = env.jump_table(lo, hi)
    R = env.truncation_radius
    offsets = np.abs(np.arange(-R, R + 1))
    far = table[:, offsets >= threshold].sum(axis=1)
    return far / table.sum(axis=1)


def long_jump_frequency(env, start, n, nu, seed, h=1.0, paths=1000, workers=1,
                        margin_c=DEFAULT_MARGIN_C):
    """Monte Carlo ``P[some |X_{k+1} - X_k| >= n^nu, k <= h n]``."""
    beta = env.tail_beta
    if not 1.0 / (2.0 + beta) < nu < 0.5:
        raise ValueError(f"nu must lie in (1/(2+beta), 1/2) = ({1 / (2 + beta):.4f}, 0.5)")
    threshold = float(n) ** nu
    if env.truncation_radius < threshold:
        return 0.0
    n_jumps = int(math.floor(h * n)) + 1
    sampler = sampler_for(env)
    margin = required_margin(n_jumps, margin_c, env.truncation_radius)
    zone_check(sampler, [start], margin)
    starts = np.full(int(paths), int(start), dtype=np.int64)
    keys = keys_for(seed, int(paths))
    hit = np.zeros(starts.size, dtype=np.int8)
    status = np.zeros(starts.size, dtype=np.int8)
    thr = int(math.ceil(threshold))

    def work(a, b):
        _k_long_jump(sampler.prob, sampler.alias, sampler.lo, sampler.R, starts[a:b], keys[a:b],
                     n_jumps, thr, margin, hit[a:b], status[a:b])

    run_chunked(work, starts.size, workers)
    _raise_on_abort(status)
    return float(hit.mean())


# --------------------------------------------------------------------------
# path dump: header + little-endian int32 deltas

_MAGIC = b"CLPATH01"
_HEADER = struct.Struct("<8s16sqQQ")


def write_path_dump(path: Path, fh):
    env_id = path.env_id.encode("ascii")[:16].ljust(16, b"\0")
    fh.write(_HEADER.pack(_MAGIC, env_id, int(path.start), int(path.seed) & ((1 << 64) - 1), path.n))
    fh.write(np.diff(np.asarray(path.steps, dtype=np.int64)).astype("<i4").tobytes())


def read_path_dump(fh) -> Path:
    magic, env_id, start, seed, n = _HEADER.unpack(fh.read(_HEADER.size))
    if magic != _MAGIC:
        raise ValueError("not a path dump")
    deltas = np.frombuffer(fh.read(4 * n), dtype="<i4").astype(np.int64)
    steps = np.concatenate([[start], start + np.cumsum(deltas)])
    return Path(int(start), steps, env_id.rstrip(b"\0").decode("ascii"), int(seed))
