"""Exact finite-interval computations for the conductance walk.

Everything here is a dense linear solve (or an iterated matrix-vector
product) on the chain restricted to an interval ``(a, b)``, with the two
outside regions ``B = (-inf, a]`` and ``E = [b, inf)`` glued into single
states.  Only boundary sites within ``R`` of the interval carry conductance
into it, so the gluing is exact for the materialized field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .environment import Environment, WindowError

CONFINEMENT = "confinement"  # B and E collapsed separately
EXIT = "exit"  # B and E collapsed together into one state
GEOMETRIES = (CONFINEMENT, EXIT)


class SolverError(RuntimeError):
    """A linear system that must be nonsingular was not."""


@dataclass(frozen=True, eq=False)
class IntervalProblem:
    env: Environment
    a: int
    b: int
    geometry: str
    interior: np.ndarray  # sites a+1..b-1
    boundary: np.ndarray  # materialized boundary sites a+1-R..a, b..b-1+R
    inner: np.ndarray  # (m, m) conductances between interior sites
    cross: np.ndarray  # (m, nb) conductances interior -> boundary site
    C: np.ndarray  # C'_x = C_x on the interior
    omega: np.ndarray  # collapsed conductances omega' over the states
    labels: tuple  # state labels: interior sites then "B"/"E" (or "E")
    P: np.ndarray = field(init=False)

    def __post_init__(self):
        C = self.omega.sum(axis=1)
        object.__setattr__(self, "P", self.omega / C[:, None])

    @property
    def m(self):
        return len(self.interior)

    @property
    def C_states(self):
        """C' over all collapsed states."""
        return self.omega.sum(axis=1)

    @property
    def Q(self):
        """Sub-stochastic interior block."""
        return self.inner / self.C[:, None]

    @property
    def C_boundary(self):
        """C'_y for each materialized boundary site (conductance into the interval)."""
        return self.cross.sum(axis=0)

    @property
    def left_mask(self):
        return self.boundary <= self.a

    @property
    def C_B(self):
        return float(self.C_boundary[self.left_mask].sum())

    @property
    def C_E(self):
        cb = self.C_boundary
        if self.geometry == EXIT:
            return float(cb.sum())
        return float(cb[~self.left_mask].sum())

    def _measure(self, mask):
        cb = np.where(mask, self.C_boundary, 0.0)
        return cb / cb.sum()

    @property
    def pi_B(self):
        if self.geometry == EXIT:
            raise ValueError("pi_B is only defined in the confinement geometry")
        return self._measure(self.left_mask)

    @property
    def pi_E(self):
        if self.geometry == EXIT:
            return self._measure(np.ones(len(self.boundary), bool))
        return self._measure(~self.left_mask)

    def index(self, x):
        if not self.a < x < self.b:
            raise ValueError(f"site {x} is not in ({self.a}, {self.b})")
        return int(x - self.a - 1)

    def state(self, label):
        return self.labels.index(label)

    def detailed_balance_residual(self):
        C = self.C_states
        F = C[:, None] * self.P
        return float(np.max(np.abs(F - F.T)))

    def row_sum_residual(self):
        return float(np.max(np.abs(self.P.sum(axis=1) - 1.0)))

    def total_conductance_residual(self):
        """max |C'_x - C_x| over the interior, C_x taken from the environment."""
        return float(np.max(np.abs(self.C - self.env.total_conductances()[self.interior - self.env.interior[0]])))


def build_collapsed_chain(env: Environment, a: int, b: int, geometry: str = CONFINEMENT) -> IntervalProblem:
    if geometry not in GEOMETRIES:
        raise ValueError(f"geometry must be one of {GEOMETRIES}")
    a, b = int(a), int(b)
    if b - a < 2:
        raise ValueError("interval must contain at least three points")
    R = env.truncation_radius
    if not (env.is_interior(a + 1) and env.is_interior(b - 1)):
        raise WindowError(f"interval [{a}, {b}] needs margin {R} inside window {env.window}")
    interior = np.arange(a + 1, b, dtype=np.int64)
    boundary = np.concatenate([np.arange(a + 1 - R, a + 1), np.arange(b, b + R)]).astype(np.int64)
    m, nb = len(interior), len(boundary)
    table = env.jump_table(a + 1, b - 1)
    offsets = np.arange(-R, R + 1)
    target = interior[:, None] + offsets[None, :]
    inner = np.zeros((m, m))
    cross = np.zeros((m, nb))
    inside = (target > a) & (target < b)
    rows = np.broadcast_to(np.arange(m)[:, None], target.shape)
    inner[rows[inside], target[inside] - a - 1] = table[inside]
    left = target <= a
    cross[rows[left], target[left] - (a + 1 - R)] = table[left]
    right = target >= b
    cross[rows[right], R + target[right] - b] = table[right]

    lmask = boundary <= a
    if geometry == CONFINEMENT:
        labels = tuple(int(x) for x in interior) + ("B", "E")
        omega = np.zeros((m + 2, m + 2))
        omega[:m, :m] = inner
        omega[:m, m] = cross[:, lmask].sum(axis=1)
        omega[:m, m + 1] = cross[:, ~lmask].sum(axis=1)
    else:
        labels = tuple(int(x) for x in interior) + ("E",)
        omega = np.zeros((m + 1, m + 1))
        omega[:m, :m] = inner
        omega[:m, m] = cross.sum(axis=1)
    omega[m:, :m] = omega[:m, m:].T
    C = table.sum(axis=1)
    return IntervalProblem(env, a, b, geometry, interior, boundary, inner, cross, C, omega, labels)


# --------------------------------------------------------------------------
# helpers


def _solve(A, rhs):
    try:
        lu = sla.lu_factor(A, check_finite=True)
    except (ValueError, sla.LinAlgError) as exc:  # pragma: no cover
        raise SolverError(str(exc)) from exc
    if np.any(np.abs(np.diag(lu[0])) == 0.0):
        raise SolverError("singular system")
    return sla.lu_solve(lu, rhs)


def _hit_probability(P, target, avoid):
    """u(s) = P^s[hit ``target`` before ``avoid``], u = 1 on target, 0 on avoid."""
    n = P.shape[0]
    free = np.setdiff1d(np.arange(n), np.concatenate([[target], np.atleast_1d(avoid)]))
    u = np.zeros(n)
    u[target] = 1.0
    if free.size:
        A = np.eye(free.size) - P[np.ix_(free, free)]
        u[free] = _solve(A, P[free, target])
    return u


def _hitting_time(P, target):
    """E^s[tau_target] for every state s (0 at the target)."""
    n = P.shape[0]
    free = np.setdiff1d(np.arange(n), [target])
    t = np.zeros(n)
    A = np.eye(free.size) - P[np.ix_(free, free)]
    t[free] = _solve(A, np.ones(free.size))
    return t


def effective_resistance(omega, s, t):
    """R_eff between states ``s`` and ``t`` from the grounded Laplacian."""
    L = np.diag(omega.sum(axis=1)) - omega
    keep = np.setdiff1d(np.arange(omega.shape[0]), [t])
    rhs = np.zeros(keep.size)
    rhs[np.searchsorted(keep, s)] = 1.0
    v = _solve(L[np.ix_(keep, keep)], rhs)
    return float(v[np.searchsorted(keep, s)])


def _interior_range(env, lo, hi):
    R = env.truncation_radius
    if not (env.is_interior(lo) and env.is_interior(hi)):
        raise WindowError(f"sites [{lo}, {hi}] need margin {R} inside window {env.window}")


# --------------------------------------------------------------------------
# escape and Dirichlet form


@dataclass(frozen=True)
class EscapeSolution:
    L: int
    probability: float
    C0: float
    sites: np.ndarray  # -L-R+1 .. L+R-1
    harmonic: np.ndarray  # minimizer f*: 0 at 0, 1 for |x| >= L

    def f(self, x):
        x = np.asarray(x)
        return np.where(np.abs(x) >= self.L, 1.0, self.harmonic[np.clip(x - self.sites[0], 0, len(self.sites) - 1)])


def solve_escape(env: Environment, L: int) -> EscapeSolution:
    """Escape from 0 to ``{|x| >= L}`` before returning to 0."""
    L = int(L)
    if L < 1:
        raise ValueError("L must be >= 1")
    _interior_range(env, -L + 1, L - 1)
    R = env.truncation_radius
    sites = np.arange(-L + 1, L, dtype=np.int64)
    table = env.jump_table(-L + 1, L - 1)
    C = table.sum(axis=1)
    offsets = np.arange(-R, R + 1)
    target = sites[:, None] + offsets[None, :]
    k = len(sites)
    inside = np.abs(target) < L
    rows = np.broadcast_to(np.arange(k)[:, None], target.shape)
    W = np.zeros((k, k))
    W[rows[inside], target[inside] + L - 1] = table[inside]
    out = np.where(inside, 0.0, table).sum(axis=1)
    zero = L - 1
    free = np.array([i for i in range(k) if i != zero], dtype=np.int64)
    u = np.zeros(k)
    if free.size:
        A = np.diag(C[free]) - W[np.ix_(free, free)]
        u[free] = _solve(A, out[free])
    esc = (W[zero] @ u + out[zero]) / C[zero]
    full = np.arange(-L - R + 1, L + R, dtype=np.int64)
    harmonic = np.ones(full.size)
    harmonic[R : R + k] = u
    return EscapeSolution(L, float(esc), float(C[zero]), full, harmonic)


def escape_probability(env: Environment, L: int) -> float:
    return solve_escape(env, L).probability


def escape_bound(env: Environment, L: int, report=None) -> float:
    """``4 gamma_1 / (kappa_hat L)`` with both constants measured on the window."""
    from .environment import validate

    report = validate(env) if report is None else report
    return 4.0 * report.gamma1 / (report.kappa_hat * L)


def dirichlet_form(env: Environment, f, support) -> float:
    """Sum over ordered pairs of ``omega_xy (f(x) - f(y))^2`` with an endpoint in ``support``.

    ``f`` is a callable on integer arrays, or an array indexed from
    ``support[0] - R``.  Pairs with both endpoints outside ``support`` are
    taken to contribute nothing (``f`` constant there).
    """
    lo, hi = int(support[0]), int(support[1])
    R = env.truncation_radius
    if lo - R < env.x_min or hi + R > env.x_max:
        raise WindowError(f"support [{lo}, {hi}] needs margin {R} inside window {env.window}")
    ext = np.arange(lo - R, hi + R + 1)
    if callable(f):
        vals = np.asarray(f(ext), dtype=float)
    else:
        vals = np.asarray(f, dtype=float)
        if vals.shape != ext.shape:
            raise ValueError(f"f must have {ext.size} values on [{lo - R}, {hi + R}]")
    i = np.arange(lo - R, hi + 1) - env.x_min
    w = env.weights[i]  # pairs (x, x+y), x in [lo-R, hi]
    total = 0.0
    x = np.arange(lo - R, hi + 1)
    for y in range(1, R + 1):
        keep = ((x >= lo) & (x <= hi)) | ((x + y >= lo) & (x + y <= hi))
        xs = x[keep]
        diff = vals[xs - ext[0]] - vals[xs + y - ext[0]]
        total += float(np.sum(w[keep, y - 1] * diff * diff))
    return 2.0 * total


# --------------------------------------------------------------------------
# confinement and exit times


def confinement_curve(problem: IntervalProblem, x: int, ns, renorm_every=32):
    """``log P^x[tau > n]`` for each ``n`` in the sorted sequence ``ns``."""
    ns = np.asarray(ns, dtype=np.int64)
    if ns.size and (ns.min() < 0 or np.any(np.diff(ns) < 0)):
        raise ValueError("ns must be sorted and nonnegative")
    i = problem.index(x)
    Q = problem.Q
    v = np.ones(problem.m)
    log_scale = 0.0
    out = np.empty(ns.size)
    k = 0
    for j, n in enumerate(ns):
        while k < n:
            v = Q @ v
            k += 1
            if k % renorm_every == 0:
                s = v.max()
                if s <= 0.0:
                    out[j:] = -np.inf
                    return out
                v /= s
                log_scale += math.log(s)
        out[j] = log_scale + (math.log(v[i]) if v[i] > 0 else -np.inf)
    return out


def log_confinement_tail(problem: IntervalProblem, x: int, n: int) -> float:
    return float(confinement_curve(problem, x, [int(n)])[0])


def confinement_tail(problem: IntervalProblem, x: int, n: int) -> float:
    """Exact ``P^x[tau_{B u E} > n]``."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    return math.exp(log_confinement_tail(problem, x, n))


def confinement_rate(problem: IntervalProblem):
    """Asymptotic decay rate ``-log rho(Q)`` of the confinement tail."""
    rho = float(np.max(np.abs(np.linalg.eigvals(problem.Q))))
    return -math.log(rho)


def expected_exit_times(problem: IntervalProblem) -> np.ndarray:
    return _solve(np.eye(problem.m) - problem.Q, np.ones(problem.m))


def expected_exit_time(problem: IntervalProblem, x: int) -> float:
    return float(expected_exit_times(problem)[problem.index(x)])


def exit_time_bound(problem: IntervalProblem) -> float:
    """``gamma_1 kappa^{-1} (b-a+1)^2`` with ``gamma_1 = max C'`` and the field's kappa."""
    gamma1 = float(problem.C_states.max())
    return gamma1 / problem.env.kappa * (problem.b - problem.a + 1) ** 2


def commute_time_check(problem: IntervalProblem, x: int):
    """``(E^x tau_B + E^B tau_x, (sum C') R_eff(B, x))`` on the collapsed chain."""
    if problem.geometry != CONFINEMENT:
        raise ValueError("commute_time_check needs the confinement geometry")
    i = problem.index(x)
    sB = problem.state("B")
    lhs = _hitting_time(problem.P, sB)[i] + _hitting_time(problem.P, i)[sB]
    rhs = problem.C_states.sum() * effective_resistance(problem.omega, i, sB)
    return float(lhs), float(rhs)


# --------------------------------------------------------------------------
# exit law, effective conductance, reversal


@dataclass(frozen=True)
class ExitDistribution:
    start: int
    a: int
    b: int
    sites: np.ndarray
    probs: np.ndarray

    def mass_inside(self, M):
        """``P^x[X_tau in [a-M, a] u [b, b+M]]``."""
        s = self.sites
        keep = ((s >= self.a - M) & (s <= self.a)) | ((s >= self.b) & (s <= self.b + M))
        return float(self.probs[keep].sum())

    def as_dict(self):
        return {int(y): float(p) for y, p in zip(self.sites, self.probs) if p > 0}


def exit_matrix(problem: IntervalProblem) -> np.ndarray:
    """Row ``i``: exit law over ``problem.boundary`` from interior site ``i``."""
    rhs = problem.cross / problem.C[:, None]
    return _solve(np.eye(problem.m) - problem.Q, rhs)


def exit_distribution(problem: IntervalProblem, x: int) -> ExitDistribution:
    if problem.geometry != EXIT:
        raise ValueError("exit_distribution needs the exit geometry")
    probs = exit_matrix(problem)[problem.index(x)]
    probs = np.clip(probs, 0.0, None)
    return ExitDistribution(int(x), problem.a, problem.b, problem.boundary.copy(), probs)


def locate_margin(problem: IntervalProblem, eta: float):
    """Smallest ``M`` with ``min_x mass_inside(M) >= 1 - eta``; also returns that minimum."""
    H = np.clip(exit_matrix(problem), 0.0, None)
    dist = np.where(problem.boundary <= problem.a, problem.a - problem.boundary, problem.boundary - problem.b)
    R = problem.env.truncation_radius
    worst = 0.0
    for M in range(R):
        worst = float(H[:, dist <= M].sum(axis=1).min())
        if worst >= 1.0 - eta:
            return M, worst
    return R - 1, worst


def _exit_hit_probability(problem, x):
    """u(s) = P^s[tau_x < tau_E] on the collapsed exit chain (all states)."""
    return _hit_probability(problem.P, problem.index(x), [problem.state("E")])


def effective_conductance(problem: IntervalProblem, x: int) -> float:
    """``C_eff(Delta_E, x) = C'_E P^{Delta_E}[tau_x < tau^+_{Delta_E}]``."""
    if problem.geometry != EXIT:
        raise ValueError("effective_conductance needs the exit geometry")
    u = _exit_hit_probability(problem, x)
    sE = problem.state("E")
    return float(problem.C_E * (problem.P[sE] @ u))


def effective_conductance_laplacian(problem: IntervalProblem, x: int) -> float:
    """The same quantity as ``1 / R_eff`` from the grounded Laplacian."""
    return 1.0 / effective_resistance(problem.omega, problem.index(x), problem.state("E"))


def series_lower_bound(problem: IntervalProblem, x: int) -> float:
    """Nearest-neighbour series bound on ``C_eff(Delta_E, x)``."""
    env = problem.env
    left = sum(1.0 / env.conductance(i, i + 1) for i in range(problem.a, x))
    right = sum(1.0 / env.conductance(i, i + 1) for i in range(x, problem.b))
    return 1.0 / left + 1.0 / right


def reversal_identity_check(problem: IntervalProblem, x: int, y: int):
    """``C'_x P^x[X_{tau_E} = y, tau_E < tau_x^+]`` against ``C'_y P^y[tau_x < tau_E^+]``."""
    if problem.geometry != EXIT:
        raise ValueError("reversal_identity_check needs the exit geometry")
    i = problem.index(x)
    hits = np.nonzero(problem.boundary == y)[0]
    if hits.size == 0:
        raise ValueError(f"site {y} is not a materialized boundary site")
    j = int(hits[0])
    if problem.C_boundary[j] <= 0:
        raise ValueError(f"C'_{y} = 0")
    m = problem.m
    W, w_xy = problem.inner, problem.cross[:, j]
    # rhs: sum_z omega_yz P^z[tau_x < tau_E], z interior
    u = _exit_hit_probability(problem, x)[:m]
    rhs = float(w_xy @ u)
    # lhs: omega_xy + sum_{z != x} omega_xz P^z[X_{tau_E} = y, tau_E < tau_x]
    free = np.array([k for k in range(m) if k != i], dtype=np.int64)
    g = np.zeros(m)
    if free.size:
        Qf = problem.Q[np.ix_(free, free)]
        g[free] = _solve(np.eye(free.size) - Qf, w_xy[free] / problem.C[free])
    lhs = float(w_xy[i] + W[i] @ g)
    return lhs, rhs


# --------------------------------------------------------------------------
# records


@dataclass(frozen=True)
class SolverRecord:
    operation: str
    inputs: dict
    outputs: dict
    residuals: dict = field(default_factory=dict)

    def to_text(self):
        return json.dumps(
            {"operation": self.operation, "inputs": self.inputs, "outputs": self.outputs,
             "residuals": self.residuals},
            sort_keys=True,
        )
