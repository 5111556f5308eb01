"""Conductance environments on a finite window of the integers.

A field is stored once per unordered pair: ``weights[i, y - 1]`` holds the
conductance between ``x_min + i`` and ``x_min + i + y`` for ``1 <= y <= R``
(zero when the partner lies outside the window).  Every accessor reads that
single array, so symmetry holds bit for bit.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
from scipy.special import zeta

MODELS = ("homogeneous", "iid-polynomial", "block-counterexample", "file")

#: the tail mass dropped by truncation must stay below this fraction of kappa
TAIL_TOLERANCE = 1e-9

FORMAT_VERSION = 1


class SpecError(ValueError):
    """Invalid environment specification."""


class WindowError(ValueError):
    """Request falls outside the materialized window (or too close to its edge)."""


def envelope(K, beta, y):
    """Condition K envelope ``K / (1 + y^(3+beta))``."""
    y = np.asarray(y, dtype=float)
    return K / (1.0 + y ** (3.0 + beta))


def tail_mass_bound(K, beta, R):
    """Upper bound on ``sum_{y > R} K / (1 + y^(3+beta))`` (Hurwitz zeta)."""
    return float(K * zeta(3.0 + beta, R + 1))


def min_truncation_radius(K, beta, kappa, tolerance=TAIL_TOLERANCE):
    """Smallest R whose tail-mass bound is below ``tolerance * kappa``."""
    target = tolerance * kappa
    lo, hi = 1, 2
    while tail_mass_bound(K, beta, hi) >= target:
        hi *= 2
    while lo < hi:
        mid = (lo + hi) // 2
        if tail_mass_bound(K, beta, mid) < target:
            hi = mid
        else:
            lo = mid + 1
    return lo


@dataclass(frozen=True)
class EnvironmentSpec:
    """Recipe for :func:`generate`.

    ``params`` by model:

    * ``homogeneous``: ``profile`` (c_1, c_2, ...), optional ``kappa``,
      ``tail_beta`` (default 1) and ``tail_K`` (default: smallest valid K).
    * ``iid-polynomial``: ``kappa``, ``tail_K``, ``tail_beta`` and optional
      ``support_radius`` (jumps longer than it carry zero conductance).
    * ``block-counterexample``: ``block_epsilon`` (block-size tail exponent
      is ``1 + block_epsilon``), optional ``alt_value`` (default 2) and
      ``tail_beta`` (default 1).
    """

    model_tag: str
    window: tuple[int, int]
    truncation_radius: int
    params: dict = field(default_factory=dict)
    seed: int = 0

    def check(self):
        if self.model_tag not in MODELS or self.model_tag == "file":
            raise SpecError(f"unknown model {self.model_tag!r}")
        x_min, x_max = self.window
        if int(x_min) != x_min or int(x_max) != x_max:
            raise SpecError("window bounds must be integers")
        if self.truncation_radius < 1:
            raise SpecError("truncation_radius must be >= 1")
        length = x_max - x_min + 1
        if length < 3:
            raise SpecError("window must contain at least 3 sites")
        if length < 2 * self.truncation_radius + 1:
            raise WindowError(
                f"window of {length} sites has no interior site for R={self.truncation_radius}"
            )
        for key, value in self.params.items():
            if key == "profile":
                if len(value) == 0 or value[0] <= 0 or any(v < 0 for v in value):
                    raise SpecError("profile needs c_1 > 0 and nonnegative entries")
                continue
            if value is None:
                continue
            if not value > 0:
                raise SpecError(f"parameter {key} must be strictly positive")
        required = {
            "homogeneous": ("profile",),
            "iid-polynomial": ("kappa", "tail_K", "tail_beta"),
            "block-counterexample": ("block_epsilon",),
        }[self.model_tag]
        missing = [k for k in required if k not in self.params]
        if missing:
            raise SpecError(f"missing parameters for {self.model_tag}: {missing}")


@dataclass(frozen=True, eq=False)
class Environment:
    """Immutable symmetric conductance field on ``window``."""

    window: tuple[int, int]
    truncation_radius: int
    weights: np.ndarray
    kappa: float
    tail_K: float
    tail_beta: float
    seed: int
    model_tag: str
    params: dict = field(default_factory=dict)
    tail_mass_bound: float = 0.0

    def __post_init__(self):
        self.weights.setflags(write=False)

    @property
    def x_min(self):
        return self.window[0]

    @property
    def x_max(self):
        return self.window[1]

    @property
    def n_sites(self):
        return self.window[1] - self.window[0] + 1

    @property
    def interior(self):
        """Sites whose whole R-neighbourhood is materialized."""
        return self.x_min + self.truncation_radius, self.x_max - self.truncation_radius

    def is_interior(self, x):
        lo, hi = self.interior
        return lo <= x <= hi

    def header(self):
        return {
            "format": FORMAT_VERSION,
            "model_tag": self.model_tag,
            "window": [int(self.x_min), int(self.x_max)],
            "truncation_radius": int(self.truncation_radius),
            "kappa": float(self.kappa),
            "tail_K": float(self.tail_K),
            "tail_beta": float(self.tail_beta),
            "seed": int(self.seed),
            "tail_mass_bound": float(self.tail_mass_bound),
            "params": _jsonable(self.params),
        }

    @cached_property
    def env_id(self):
        h = hashlib.blake2b(digest_size=8)
        h.update(json.dumps(self.header(), sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.weights, dtype="<f8").tobytes())
        return h.hexdigest()

    def conductance(self, x, y):
        if x == y:
            return 0.0
        if x > y:
            x, y = y, x
        d = y - x
        if x < self.x_min or y > self.x_max:
            raise WindowError(f"pair ({x}, {y}) outside window {self.window}")
        if d > self.truncation_radius:
            return 0.0
        return float(self.weights[x - self.x_min, d - 1])

    def jump_table(self, lo=None, hi=None):
        """Rows ``x = lo..hi``; column ``j`` holds the conductance to ``x + j - R``."""
        lo = self.x_min if lo is None else lo
        hi = self.x_max if hi is None else hi
        if lo < self.x_min or hi > self.x_max or lo > hi:
            raise WindowError(f"rows [{lo}, {hi}] outside window {self.window}")
        R = self.truncation_radius
        i = np.arange(lo - self.x_min, hi - self.x_min + 1)
        table = np.zeros((i.size, 2 * R + 1))
        table[:, R + 1 :] = self.weights[i]
        y = np.arange(1, R + 1)
        left = i[:, None] - y[None, :]
        vals = self.weights[np.maximum(left, 0), y - 1]
        vals[left < 0] = 0.0
        table[:, R - y] = vals
        return table

    def conductance_matrix(self, lo, hi):
        """Dense symmetric matrix of conductances among sites ``lo..hi``."""
        table = self.jump_table(lo, hi)
        m = hi - lo + 1
        R = self.truncation_radius
        M = np.zeros((m, m))
        rows = np.arange(m)
        for j in range(2 * R + 1):
            cols = rows + j - R
            ok = (cols >= 0) & (cols < m)
            M[rows[ok], cols[ok]] = table[ok, j]
        return M

    def total_conductance(self, x):
        if not self.is_interior(x):
            raise WindowError(f"site {x} is within R of the window edge")
        return float(self.jump_table(x, x).sum())

    def total_conductances(self):
        """``C_x`` for every interior site, as an array indexed from ``interior[0]``."""
        lo, hi = self.interior
        return self.jump_table(lo, hi).sum(axis=1)

    def second_moments(self):
        """``sum_y omega_{x,y} (y - x)^2`` for every interior site."""
        lo, hi = self.interior
        R = self.truncation_radius
        offsets = np.arange(-R, R + 1, dtype=float)
        return self.jump_table(lo, hi) @ (offsets**2)

    def shift(self, z):
        return shift(self, z)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


# --------------------------------------------------------------------------
# generation


def generate(spec: EnvironmentSpec) -> Environment:
    spec.check()
    builder = {
        "homogeneous": _homogeneous,
        "iid-polynomial": _iid_polynomial,
        "block-counterexample": _block_counterexample,
    }[spec.model_tag]
    return builder(spec)


def _blank(spec):
    x_min, x_max = spec.window
    n = x_max - x_min + 1
    return np.zeros((n, spec.truncation_radius)), n


def _clip_to_window(weights):
    # pairs whose right end leaves the window are not materialized
    n, R = weights.shape
    for y in range(1, R + 1):
        weights[max(n - y, 0) :, y - 1] = 0.0


def _homogeneous(spec):
    p = spec.params
    profile = [float(c) for c in p["profile"]]
    R = spec.truncation_radius
    if len(profile) > R:
        raise SpecError(f"profile of range {len(profile)} exceeds truncation radius {R}")
    beta = float(p.get("tail_beta", 1.0))
    y = np.arange(1, len(profile) + 1)
    needed = float(np.max(np.asarray(profile) * (1.0 + y ** (3.0 + beta))))
    K = float(p.get("tail_K", needed * (1.0 + 1e-12)))
    kappa = float(p.get("kappa", profile[0]))
    weights, _ = _blank(spec)
    weights[:, : len(profile)] = profile
    _clip_to_window(weights)
    return Environment(
        window=tuple(spec.window), truncation_radius=R, weights=weights,
        kappa=kappa, tail_K=K, tail_beta=beta, seed=int(spec.seed),
        model_tag=spec.model_tag, params=dict(p), tail_mass_bound=0.0,
    )


def _iid_polynomial(spec):
    p = spec.params
    kappa, K, beta = float(p["kappa"]), float(p["tail_K"]), float(p["tail_beta"])
    R = spec.truncation_radius
    support = p.get("support_radius")
    if support is not None:
        support = int(support)
        if support > R:
            raise SpecError("support_radius exceeds truncation radius")
        bound = 0.0
    else:
        bound = tail_mass_bound(K, beta, R)
        if not bound < TAIL_TOLERANCE * kappa:
            need = min_truncation_radius(K, beta, kappa)
            raise SpecError(
                f"truncation radius {R} leaves tail mass {bound:.3g} >= "
                f"{TAIL_TOLERANCE:g}*kappa; need R >= {need}"
            )
    top = envelope(K, beta, np.arange(1, R + 1))
    if kappa > top[0]:
        raise SpecError(f"kappa={kappa} exceeds the nearest-neighbour envelope {top[0]}")
    rng = np.random.default_rng(int(spec.seed))
    weights, n = _blank(spec)
    u = rng.random((n, R))
    weights[:, 0] = kappa + u[:, 0] * (top[0] - kappa)
    weights[:, 1:] = u[:, 1:] * top[1:]
    if support is not None:
        weights[:, support:] = 0.0
    _clip_to_window(weights)
    return Environment(
        window=tuple(spec.window), truncation_radius=R, weights=weights,
        kappa=kappa, tail_K=K, tail_beta=beta, seed=int(spec.seed),
        model_tag=spec.model_tag, params=dict(p), tail_mass_bound=bound,
    )


def _size_biased_tail(s, eps):
    """P[V* > s] for the size-biased block law, where P[V > t] = t^-(1+eps)."""
    if s <= 1:
        return 1.0
    a = 1.0 + eps
    return ((s + 1) * float(s) ** (-a) + float(zeta(a, s + 1))) / (1.0 + float(zeta(a, 1)))


def _sample_size_biased(rng, eps):
    u = rng.random()
    hi = 2
    while _size_biased_tail(hi, eps) >= u:
        hi *= 2
    lo = 1
    # invariant: tail(lo) >= u > tail(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if _size_biased_tail(mid, eps) >= u:
            lo = mid
        else:
            hi = mid
    return hi


def block_sizes(rng, eps, count):
    """I.i.d. block sizes with ``P[V > s] = s^-(1+eps)`` for integers s >= 1."""
    u = rng.random(count)
    v = np.ceil((1.0 - u) ** (-1.0 / (1.0 + eps)))
    return np.minimum(v, 2.0**62).astype(np.int64)


def _block_counterexample(spec):
    p = spec.params
    eps = float(p["block_epsilon"])
    alt = float(p.get("alt_value", 2.0))
    beta = float(p.get("tail_beta", 1.0))
    R = spec.truncation_radius
    rng = np.random.default_rng(int(spec.seed))
    n_edges = spec.window[1] - spec.window[0]

    values = np.empty(n_edges)
    # the block covering the first edge is size-biased, entered at a uniform offset
    first = _sample_size_biased(rng, eps)
    offset = int(rng.integers(0, first)) if first < 2**62 else int(rng.random() * first)
    alternating = rng.random() < 0.5
    take = min(first - offset, n_edges)
    pos = np.arange(offset, offset + take)
    values[:take] = np.where((pos % 2 == 0) & alternating, alt, 1.0)
    filled = take
    mean_size = 1.0 + float(zeta(1.0 + eps, 1))
    while filled < n_edges:
        batch = int((n_edges - filled) / mean_size * 1.2) + 16
        sizes = block_sizes(rng, eps, batch)
        kinds = rng.random(batch) < 0.5
        for size, alternating in zip(sizes, kinds):
            take = int(min(size, n_edges - filled))
            if alternating:
                pos = np.arange(take)
                values[filled : filled + take] = np.where(pos % 2 == 0, alt, 1.0)
            else:
                values[filled : filled + take] = 1.0
            filled += take
            if filled >= n_edges:
                break
    weights, _ = _blank(spec)
    weights[:n_edges, 0] = values
    return Environment(
        window=tuple(spec.window), truncation_radius=R, weights=weights,
        kappa=min(1.0, alt), tail_K=2.0 * max(1.0, alt), tail_beta=beta,
        seed=int(spec.seed), model_tag=spec.model_tag, params=dict(p),
        tail_mass_bound=0.0,
    )


def from_nearest_neighbor(values, x_min=0, kappa=None, tail_beta=1.0, model_tag="file", params=None):
    """Nearest-neighbour field with ``omega(x_min + i, x_min + i + 1) = values[i]``."""
    values = np.asarray(values, dtype=float)
    weights = np.zeros((values.size + 1, 1))
    weights[:-1, 0] = values
    return Environment(
        window=(int(x_min), int(x_min + values.size)), truncation_radius=1,
        weights=weights, kappa=float(values.min() if kappa is None else kappa),
        tail_K=2.0 * float(values.max()) * (1.0 + 1e-12), tail_beta=float(tail_beta),
        seed=0, model_tag=model_tag, params=dict(params or {}), tail_mass_bound=0.0,
    )


def plant_defect(env, x, y, value):
    """Copy of ``env`` with the conductance of the pair {x, y} replaced."""
    if x > y:
        x, y = y, x
    d = y - x
    if d < 1 or d > env.truncation_radius:
        raise WindowError(f"pair ({x}, {y}) is not a materialized pair")
    if x < env.x_min or y > env.x_max:
        raise WindowError(f"pair ({x}, {y}) outside window {env.window}")
    weights = env.weights.copy()
    weights[x - env.x_min, d - 1] = float(value)
    params = dict(env.params)
    params["defects"] = list(params.get("defects", [])) + [[int(x), int(y), float(value)]]
    return replace(env, weights=weights, params=params)


# --------------------------------------------------------------------------
# validation


@dataclass
class Check:
    name: str
    passed: bool
    witness: tuple | None = None
    detail: str = ""


@dataclass
class ValidationReport:
    env_id: str
    checks: list
    c_min: float
    c_max: float
    kappa_hat: float
    gamma1: float

    @property
    def ok(self):
        return all(c.passed for c in self.checks)

    def failures(self):
        return [c for c in self.checks if not c.passed]

    def check(self, name):
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_text(self):
        lines = [f"environment {self.env_id}"]
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            extra = f" witness={list(c.witness)}" if c.witness is not None else ""
            lines.append(f"{status} {c.name}{extra} {c.detail}".rstrip())
        lines.append(f"C bounds [{self.c_min!r}, {self.c_max!r}]")
        lines.append(f"kappa_hat {self.kappa_hat!r}")
        lines.append(f"gamma1 {self.gamma1!r}")
        lines.append("VALID" if self.ok else "INVALID")
        return "\n".join(lines) + "\n"


def validate(env: Environment) -> ValidationReport:
    R = env.truncation_radius
    W = env.weights
    n = env.n_sites
    checks = []

    bad = np.argwhere(~np.isfinite(W) | (W < 0))
    if bad.size:
        i, d = bad[0]
        checks.append(Check("nonnegativity", False, (env.x_min + int(i), env.x_min + int(i) + int(d) + 1)))
    else:
        checks.append(Check("nonnegativity", True))

    table = env.jump_table()
    asym = None
    for j in range(1, R + 1):
        # row x, offset +j against row x+j, offset -j
        fwd = table[: n - j, R + j]
        back = table[j:, R - j]
        diff = np.nonzero(fwd != back)[0]
        if diff.size:
            asym = (env.x_min + int(diff[0]), env.x_min + int(diff[0]) + j)
            break
    checks.append(Check("symmetry", asym is None, asym))

    adjacent = W[: n - 1, 0]
    weak = np.nonzero(~(adjacent >= env.kappa))[0]
    if weak.size:
        x = env.x_min + int(weak[0])
        checks.append(Check("condition_E", False, (x, x + 1), f"omega={adjacent[weak[0]]!r} < kappa={env.kappa!r}"))
    else:
        checks.append(Check("condition_E", True, detail=f"kappa={env.kappa!r}"))

    top = envelope(env.tail_K, env.tail_beta, np.arange(1, R + 1))
    over = np.argwhere(W > top[None, :])
    if over.size:
        i, d = over[0]
        x, y = env.x_min + int(i), env.x_min + int(i) + int(d) + 1
        checks.append(
            Check("condition_K", False, (x, y), f"omega={W[i, d]!r} > K/(1+y^(3+beta))={top[d]!r}")
        )
    else:
        checks.append(Check("condition_K", True, detail=f"K={env.tail_K!r} beta={env.tail_beta!r}"))

    C = table[R : n - R].sum(axis=1) if n - 2 * R > 0 else np.zeros(0)
    if C.size:
        c_min, c_max = float(C.min()), float(C.max())
    else:
        c_min = c_max = float("nan")
    bounded = C.size > 0 and c_min > 0 and np.isfinite(c_max)
    kappa_hat = min(c_min, 1.0 / c_max) if bounded else 0.0
    witness = None
    if not bounded and C.size:
        witness = (env.x_min + R + int(np.argmin(C)),)
    checks.append(Check("total_conductance_bounds", bool(bounded), witness, f"kappa_hat={kappa_hat!r}"))

    offsets = np.arange(-R, R + 1, dtype=float)
    gamma1 = float((table[R : n - R] @ offsets**2).max()) if C.size else float("nan")
    return ValidationReport(env.env_id, checks, c_min, c_max, kappa_hat, gamma1)


# --------------------------------------------------------------------------
# views


def shift(env: Environment, z: int) -> Environment:
    """Field recentred at ``z``: the result's site 0 is ``env``'s site ``z``."""
    z = int(z)
    if not env.x_min <= z <= env.x_max:
        raise WindowError(f"shift {z} leaves the window {env.window}")
    if z == 0:
        return env
    return replace(env, window=(env.x_min - z, env.x_max - z))


def total_conductance(env: Environment, x: int) -> float:
    return env.total_conductance(x)


# --------------------------------------------------------------------------
# persistence


def save_environment(env: Environment, path):
    R = env.truncation_radius
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(env.header(), sort_keys=True) + "\n")
        for i in range(env.n_sites):
            row = env.weights[i]
            parts = [str(env.x_min + i)]
            for d in np.nonzero(row)[0]:
                parts.append(f"{d + 1}:{row[d]:.17g}")
            fh.write(" ".join(parts) + "\n")
    return path


def load_environment(path) -> Environment:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        x_min, x_max = header["window"]
        R = int(header["truncation_radius"])
        weights = np.zeros((x_max - x_min + 1, R))
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            i = int(parts[0]) - x_min
            for item in parts[1:]:
                d, v = item.split(":")
                weights[i, int(d) - 1] = float(v)
    return Environment(
        window=(int(x_min), int(x_max)), truncation_radius=R, weights=weights,
        kappa=float(header["kappa"]), tail_K=float(header["tail_K"]),
        tail_beta=float(header["tail_beta"]), seed=int(header["seed"]),
        model_tag=header["model_tag"], params=header.get("params", {}),
        tail_mass_bound=float(header["tail_mass_bound"]),
    )


def default_spec(model, window, seed=0, **overrides):
    """Convenience specs used across the harness and CLI."""
    if model == "homogeneous":
        params = {"profile": overrides.pop("profile", (1.0,))}
        R = overrides.pop("truncation_radius", len(params["profile"]))
    elif model == "iid-polynomial":
        params = {
            "kappa": overrides.pop("kappa", 0.25),
            "tail_K": overrides.pop("tail_K", 2.0),
            "tail_beta": overrides.pop("tail_beta", 2.0),
        }
        support = overrides.pop("support_radius", None)
        if support is not None:
            params["support_radius"] = support
            R = overrides.pop("truncation_radius", support)
        else:
            R = overrides.pop(
                "truncation_radius",
                min_truncation_radius(params["tail_K"], params["tail_beta"], params["kappa"]),
            )
    elif model == "block-counterexample":
        params = {
            "block_epsilon": overrides.pop("block_epsilon", 0.5),
            "alt_value": overrides.pop("alt_value", 2.0),
        }
        R = overrides.pop("truncation_radius", 1)
    else:
        raise SpecError(f"unknown model {model!r}")
    params.update(overrides)
    return EnvironmentSpec(model, tuple(window), int(R), params, int(seed))


def has_margin(env, lo, hi):
    """True when ``[lo, hi]`` keeps an R-margin inside the window."""
    R = env.truncation_radius
    return env.x_min + R <= lo and hi <= env.x_max - R
