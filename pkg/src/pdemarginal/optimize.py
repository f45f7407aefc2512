"""Solvers for the perturbed control problem

    min J(u, e)  over  alpha + e_alpha <= u <= beta + e_beta,  u in Q.

Projected gradient handles zeta > 0; conditional gradient (Frank-Wolfe)
handles the bang-bang regime zeta = 0, where the vertex oracle is exactly
the switching law u = lower where phi > 0, upper where phi < 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .objective import Ball, CostEvaluation, PerturbationE, ProblemInstance, evaluate_cost, gradient_u, hessian_form

log = logging.getLogger(__name__)

MODES = ("auto", "projected-gradient", "conditional-gradient")


@dataclass(frozen=True)
class SolveOptions:
    mode: str = "auto"
    tol: float = 1e-9
    max_iter: int = 2000
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    seed: int = 0
    n_starts: int = 3
    switching_rel: float = 1e-10
    degenerate_fraction: float = 0.5
    disagreement_tol: float = 1e-4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown solve mode {self.mode!r}; expected one of {MODES}")
        if not (self.tol > 0 and self.max_iter > 0):
            raise ValueError("tolerances and iteration caps must be positive")
        if not (0 < self.armijo_c1 < 1 and 0 < self.backtrack < 1):
            raise ValueError("need 0 < c1 < 1 and 0 < backtrack < 1")


@dataclass
class SolutionRecord:
    u: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    value: float
    residual: float
    iterations: int
    converged: bool
    e: PerturbationE
    mode: str
    history: list = field(default_factory=list)
    partition: object = None
    gap: float = float("nan")
    bound_fraction: float = float("nan")
    degenerate: bool = False
    label: str = "solution"
    start_values: list = field(default_factory=list)
    starts_disagree: bool = False
    gradient: np.ndarray | None = None


# --------------------------------------------------------------------------
# projection


def _rounding_slack(value: float) -> float:
    """Cost differences below this are rounding noise, not ascent."""
    return 8.0 * np.finfo(float).eps * (1.0 + abs(value))


def _ball_norm(x, cell_volume):
    return float(np.sqrt(cell_volume * np.dot(x, x)))


def project_box(u, lower, upper, Q: Ball | None = None, cell_volume: float = 1.0, tol: float = 1e-12):
    """Metric projection onto [lower, upper] (intersected with the ball Q).

    For the ball the projection is clamp(u / (1 + lam), lower, upper) with the
    multiplier lam >= 0 found by bisection; this is the exact KKT solution, so
    no alternating iteration is needed.
    """
    u, lower, upper = (np.asarray(a, dtype=float) for a in (u, lower, upper))
    if np.any(lower > upper):
        raise ValueError("lower bound exceeds upper bound at some node")
    x = np.clip(u, lower, upper)
    if Q is None:
        return x
    R = Q.radius
    if _ball_norm(x, cell_volume) <= R:
        return x
    if _ball_norm(np.clip(0.0, lower, upper), cell_volume) > R:
        raise ValueError("box and ball do not intersect")

    def clamp(lam):
        return np.clip(u / (1.0 + lam), lower, upper)

    lo, hi = 0.0, 1.0
    while _ball_norm(clamp(hi), cell_volume) > R:
        hi *= 2.0
        if hi > 1e300:
            # only the minimal-norm point of the box is feasible
            return np.clip(0.0, lower, upper)
    while hi - lo > tol * (1.0 + hi):
        mid = 0.5 * (lo + hi)
        if _ball_norm(clamp(mid), cell_volume) > R:
            lo = mid
        else:
            hi = mid
    return clamp(hi)


def _projector(instance: ProblemInstance, e: PerturbationE):
    lower, upper = instance.bounds(e)
    cv = instance.domain.cell_volume
    return lambda v: project_box(v, lower, upper, instance.Q, cv)


def stationarity(instance, e, u, g) -> float:
    P = _projector(instance, e)
    return instance.domain.norm(u - P(u - g))


# --------------------------------------------------------------------------
# projected gradient


def _projected_gradient(instance, e, u, opts: SolveOptions) -> SolutionRecord:
    dom = instance.domain
    P = _projector(instance, e)
    u = P(u)
    ev = evaluate_cost(instance, u, e)
    g = gradient_u(instance, u, e, ev)
    history = [ev.value]
    step = 1.0
    u_prev = g_prev = None
    converged = False
    res = dom.norm(u - P(u - g))
    it = 0
    while it < opts.max_iter:
        if res <= opts.tol:
            converged = True
            break
        it += 1
        if u_prev is not None:
            s, r = u - u_prev, g - g_prev
            sr = dom.inner(s, r)
            step = dom.inner(s, s) / sr if sr > 0 else 1.0
            step = min(max(step, 1e-10), 1e10)
        while True:
            u_new = P(u - step * g)
            ev_new = evaluate_cost(instance, u_new, e, y0=ev.y)
            decrease = dom.inner(g, u_new - u)
            if ev_new.value <= ev.value + opts.armijo_c1 * decrease + _rounding_slack(ev.value):
                break
            step *= opts.backtrack
            if step < 1e-14:
                break
        if ev_new.value > ev.value + _rounding_slack(ev.value):
            # line search exhausted; stop without moving
            log.debug("projected gradient: no descent at residual %.3e", res)
            break
        u_prev, g_prev = u, g
        u, ev = u_new, ev_new
        g = gradient_u(instance, u, e, ev)
        history.append(ev.value)
        res = dom.norm(u - P(u - g))
    if res <= opts.tol:
        converged = True
    rec = SolutionRecord(
        u=u, y=ev.y, phi=ev.phi, value=ev.value, residual=res, iterations=it,
        converged=converged, e=e, mode="projected-gradient", history=history, gradient=g,
    )
    return rec


def _random_feasible(instance, e, rng):
    lower, upper = instance.bounds(e)
    u = rng.uniform(lower, upper)
    return project_box(u, lower, upper, instance.Q, instance.domain.cell_volume)


def solve_control_problem(
    instance: ProblemInstance, e: PerturbationE | None = None, init=None, opts: SolveOptions | None = None
) -> SolutionRecord:
    """Minimize J(., e) over the perturbed admissible set."""
    opts = opts or SolveOptions()
    e = e or PerturbationE.zeros(instance.domain)
    lower, upper = instance.bounds(e)
    if np.any(lower > upper):
        raise ValueError("infeasible perturbed bounds: alpha + e_alpha > beta + e_beta at some node")
    mode = opts.mode
    if mode == "auto":
        flat = not np.any(instance.zeta) and instance.Q is None
        mode = "conditional-gradient" if flat else "projected-gradient"
    if mode == "conditional-gradient":
        return solve_bang_bang(instance, e, opts, init=init)

    if init is None:
        init = np.clip(instance.domain.zeros(), lower, upper)
    rec = _projected_gradient(instance, e, np.asarray(init, dtype=float), opts)
    if instance.nonlinearity.is_linear or opts.n_starts <= 1:
        rec.start_values = [rec.value]
        return rec
    # nonconvex: multi-start, keep the best value
    rng = np.random.default_rng(opts.seed)
    records = [rec]
    for _ in range(opts.n_starts - 1):
        records.append(_projected_gradient(instance, e, _random_feasible(instance, e, rng), opts))
    best = min(records, key=lambda r: r.value)
    best.start_values = [r.value for r in records]
    spread = max(instance.domain.norm(r.u - best.u) for r in records)
    best.starts_disagree = bool(spread > opts.disagreement_tol)
    best.label = "best-found"
    return best


# --------------------------------------------------------------------------
# conditional gradient


def switching_vertex(phi, lower, upper, current, switching_tol):
    """Switching law: lower where phi > tol, upper where phi < -tol, else keep."""
    return np.where(phi > switching_tol, lower, np.where(phi < -switching_tol, upper, current))


def solve_bang_bang(
    instance: ProblemInstance, e: PerturbationE | None = None, opts: SolveOptions | None = None, init=None
) -> SolutionRecord:
    """Conditional-gradient iteration for zeta = 0, Q = whole space."""
    opts = opts or SolveOptions(mode="conditional-gradient")
    dom = instance.domain
    e = e or PerturbationE.zeros(dom)
    if np.any(instance.zeta) or instance.Q is not None:
        raise ValueError("conditional gradient requires zeta = 0 and Q = whole space")
    lower, upper = instance.bounds(e)
    if np.any(lower > upper):
        raise ValueError("infeasible perturbed bounds: alpha + e_alpha > beta + e_beta at some node")
    u = 0.5 * (lower + upper) if init is None else np.clip(np.asarray(init, dtype=float), lower, upper)
    ev = evaluate_cost(instance, u, e)
    history = [ev.value]
    converged = False
    it = 0
    while True:
        g = gradient_u(instance, u, e, ev)
        sw = opts.switching_rel * float(np.max(np.abs(g))) if g.size else 0.0
        v = switching_vertex(g, lower, upper, u, sw)
        gap = dom.inner(g, u - v)
        if gap <= opts.tol:
            converged = True
            break
        if it >= opts.max_iter:
            break
        it += 1
        d = v - u
        slope = -gap
        curv = hessian_form(instance, u, e, d, d, ev)
        t = min(1.0, -slope / curv) if curv > 0 else 1.0
        while True:
            ev_new = evaluate_cost(instance, u + t * d, e, y0=ev.y)
            if ev_new.value <= ev.value + opts.armijo_c1 * t * slope + _rounding_slack(ev.value):
                break
            t *= opts.backtrack
            if t < 1e-14:
                break
        if ev_new.value > ev.value + _rounding_slack(ev.value):
            log.debug("conditional gradient: no descent at gap %.3e", gap)
            break
        u = u + t * d
        if t == 1.0:
            u = v.copy()
        ev = ev_new
        history.append(ev.value)
    band = np.abs(g) <= sw
    at_bound = (u == lower) | (u == upper)
    rec = SolutionRecord(
        u=u, y=ev.y, phi=ev.phi, value=ev.value, residual=stationarity(instance, e, u, g), iterations=it,
        converged=converged, e=e, mode="conditional-gradient", history=history, gap=gap,
        bound_fraction=float(np.mean(at_bound)),
        degenerate=bool(np.mean(band) > opts.degenerate_fraction),
        start_values=[ev.value], gradient=g,
    )
    return rec


# --------------------------------------------------------------------------
# first-order check


def _linear_minimizer(g, lower, upper, Q: Ball | None, cell_volume: float):
    """argmin <g, v> over the box (intersected with the ball)."""
    v = np.where(g > 0, lower, np.where(g < 0, upper, np.clip(0.0, lower, upper)))
    if Q is None or _ball_norm(v, cell_volume) <= Q.radius:
        return v
    # v(lam) = clamp(-g / lam, lower, upper) minimizes <g, v> + lam/2 |v|^2
    def clamp(lam):
        return np.clip(-g / lam, lower, upper)

    lo, hi = 1e-300, 1.0
    while _ball_norm(clamp(hi), cell_volume) > Q.radius:
        hi *= 2.0
    lo = hi / 2.0
    while _ball_norm(clamp(lo), cell_volume) <= Q.radius and lo > 1e-300:
        lo /= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _ball_norm(clamp(mid), cell_volume) > Q.radius:
            lo = mid
        else:
            hi = mid
    return clamp(hi)


def verify_first_order(instance: ProblemInstance, record: SolutionRecord) -> float:
    """Largest violation of <g, v - u> >= 0 over feasible test controls v.

    Returns max(0, <g, u - v*>) with v* the linear minimizer of <g, .>, the
    negative part of the minimal directional derivative. Zero iff the
    variational inequality holds.
    """
    dom = instance.domain
    g = gradient_u(instance, record.u, record.e)
    lower, upper = instance.bounds(record.e)
    v = _linear_minimizer(g, lower, upper, instance.Q, dom.cell_volume)
    return max(0.0, dom.inner(g, record.u - v))
