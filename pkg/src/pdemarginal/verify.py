"""Oracles and empirical estimators for the marginal function.

Finite differences of mu, the level-set measure exponent of the adjoint,
the growth ratio of the first variation, second-order sampling on the
critical cone, Hoelder stability fits and a brute-force normal-cone LP.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog
from scipy.stats import linregress

from . import fields
from .grid import GridDomain
from .objective import PerturbationE, ProblemInstance, hessian_form, evaluate_cost
from .optimize import SolutionRecord, SolveOptions, solve_control_problem
from .pde import solve_linearized
from .sensitivity import (
    ActiveSetPartition,
    ConeElementQ,
    partition_active_sets,
    regular_subgradient,
)

log = logging.getLogger(__name__)

DEFAULT_STEPS = (1e-2, 3e-3, 1e-3, 3e-4)
RATIO = 10**-0.5


# --------------------------------------------------------------------------
# finite differences of mu


@dataclass(frozen=True)
class FDOracleConfig:
    steps: tuple = DEFAULT_STEPS
    tighten: float = 10.0
    opts: SolveOptions = field(default_factory=SolveOptions)

    def __post_init__(self):
        s = np.asarray(self.steps, dtype=float)
        if s.size == 0 or np.any(s <= 0) or np.any(np.diff(s) >= 0):
            raise ValueError("FD steps must be positive and strictly decreasing")

    @property
    def resolve_opts(self) -> SolveOptions:
        return replace(self.opts, tol=self.opts.tol / self.tighten)


def canonical_directions(domain: GridDomain) -> dict[str, PerturbationE]:
    """Pure e_J, pure e_y, pure e_alpha, pure e_beta and two mixed directions."""
    s1 = fields.sinpi(domain, 1.0, 1)
    s2 = fields.sinpi(domain, 1.0, 2)
    one = domain.full(1.0)
    z = domain.zeros()
    return {
        "e_J": PerturbationE(s1, z, z, z),
        "e_y": PerturbationE(z, s2, z, z),
        "e_alpha": PerturbationE(z, z, one, z),
        "e_beta": PerturbationE(z, z, z, one),
        "mixed_1": PerturbationE(0.5 * s2, 0.5 * s1, 0.5 * one, z),
        "mixed_2": PerturbationE(z, -0.5 * s1, z, -one) + PerturbationE(s1, z, z, z),
    }


@dataclass
class FDLadder:
    steps: np.ndarray
    forward: np.ndarray
    backward: np.ndarray
    mu0: float


def _feasible(instance, e) -> bool:
    lower, upper = instance.bounds(e)
    return bool(np.all(lower <= upper))


def marginal_fd(
    instance: ProblemInstance, e_bar: PerturbationE, d: PerturbationE, cfg: FDOracleConfig | None = None,
    base: SolutionRecord | None = None,
) -> FDLadder:
    """Difference quotients (mu(e + t d) - mu(e)) / t for t = +-steps."""
    cfg = cfg or FDOracleConfig()
    opts = cfg.resolve_opts
    if base is None:
        base = solve_control_problem(instance, e_bar, opts=opts)
    steps = np.asarray(cfg.steps, dtype=float)
    fwd = np.full(steps.size, np.nan)
    bwd = np.full(steps.size, np.nan)
    if not _feasible(instance, e_bar):
        raise ValueError("base perturbation has an empty feasible set")
    for i, t in enumerate(steps):
        for sign, out in ((1.0, fwd), (-1.0, bwd)):
            e = e_bar + (sign * t) * d
            if not _feasible(instance, e):
                continue
            rec = solve_control_problem(instance, e, init=base.u, opts=opts)
            out[i] = (rec.value - base.value) / (sign * t)
    if np.all(np.isnan(fwd)) and np.all(np.isnan(bwd)):
        raise ValueError("direction leaves the feasible parameter region for every step")
    return FDLadder(steps, fwd, bwd, base.value)


@dataclass
class FDCheckReport:
    rows: list  # dicts per (direction, step)
    passed: dict  # direction -> bool
    pairings: dict

    @property
    def all_passed(self) -> bool:
        return all(self.passed.values())


def check_subgradient_fd(
    instance: ProblemInstance, record: SolutionRecord, subgrad, cfg: FDOracleConfig | None = None,
    directions: dict | None = None, tol_pass: float = 5e-3,
) -> FDCheckReport:
    """Compare mu quotients with <e*, d> per direction and step.

    The forward quotient is compared when available; otherwise the feasible
    one-sided quotient is used and marked as such.
    """
    cfg = cfg or FDOracleConfig()
    dom = instance.domain
    directions = directions if directions is not None else canonical_directions(dom)
    rows, passed, pairings = [], {}, {}
    for name, d in directions.items():
        pair = subgrad.pair(d, dom)
        pairings[name] = pair
        if d.is_zero():
            for t in cfg.steps:
                rows.append(dict(direction=name, step=t, quotient=0.0, side="zero", pairing=pair, error=abs(pair)))
            passed[name] = abs(pair) <= tol_pass
            continue
        lad = marginal_fd(instance, record.e, d, cfg, base=record)
        err = None
        for t, qf, qb in zip(lad.steps, lad.forward, lad.backward):
            if np.isfinite(qf):
                q, side = qf, "forward"
            else:
                q, side = qb, "backward-only"
            err = abs(q - pair)
            rows.append(dict(direction=name, step=t, quotient=q, side=side, pairing=pair, error=err,
                             backward=qb))
        passed[name] = bool(err is not None and err <= tol_pass * (1.0 + abs(pair)))
    return FDCheckReport(rows, passed, pairings)


# --------------------------------------------------------------------------
# level-set measure exponent


def loglog_fit(x, y):
    """Least-squares fit log y = log c + p log x; returns (p, c, r2)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    fit = linregress(np.log(x), np.log(y))
    return float(fit.slope), float(np.exp(fit.intercept)), float(fit.rvalue**2)


@dataclass
class MeasureFitResult:
    eps: np.ndarray
    measures: np.ndarray
    K: float
    kappa: float
    r2: float
    note: str = ""


def level_set_measure(phi, eps, domain: GridDomain) -> float:
    return domain.set_measure(np.abs(phi) <= eps)


def estimate_measure_exponent(phi, eps_ladder, domain: GridDomain) -> MeasureFitResult:
    """Fit |{|phi| <= eps}| ~ K eps^kappa over the ladder.

    Returns kappa = +inf when the level set at the smallest eps is empty.
    """
    eps = np.sort(np.asarray(eps_ladder, dtype=float))
    if eps.size < 3 or np.any(eps <= 0):
        raise ValueError("need at least 3 positive eps values")
    phi = domain.check(phi)
    if np.all(np.abs(phi) <= eps[0]):
        raise ValueError("adjoint lies entirely below the smallest eps (flat adjoint)")
    m = np.array([level_set_measure(phi, t, domain) for t in eps])
    if m[0] == 0.0:
        return MeasureFitResult(eps, m, 0.0, np.inf, float("nan"), "empty level sets at small eps")
    nz = m > 0
    if nz.sum() < 3:
        raise ValueError("fewer than 3 eps values with nonzero measure")
    kappa, K, r2 = loglog_fit(eps[nz], m[nz])
    return MeasureFitResult(eps, m, K, kappa, r2)


def geometric_ladder(top: float, n: int, ratio: float = RATIO) -> np.ndarray:
    return top * ratio ** np.arange(n)


# --------------------------------------------------------------------------
# growth of the first variation


@dataclass
class GrowthCheckResult:
    n_samples: int
    min_ratio: float
    violations: int
    seed: int
    ratios: np.ndarray = field(repr=False)
    kinds: list = field(repr=False, default_factory=list)


def check_growth_condition(
    instance: ProblemInstance, record: SolutionRecord, kappa: float, n_samples: int = 1000, seed: int = 0,
    threshold: float = -1e-10,
) -> GrowthCheckResult:
    """Sample feasible u and form <phi, u - u_bar> / |u - u_bar|_L1^(1 + 1/kappa)."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    dom = instance.domain
    rng = np.random.default_rng(seed)
    lower, upper = instance.bounds(record.e)
    ub, phi = record.u, record.phi
    order = np.argsort(np.abs(phi), kind="stable")
    p = 1.0 + (0.0 if np.isinf(kappa) else 1.0 / kappa)
    ratios, kinds = [], []
    while len(ratios) < n_samples:
        k = len(ratios)
        if k % 2 == 0:
            u = rng.uniform(lower, upper)
            kind = "uniform"
        else:
            # flip a random number of nodes closest to the switching set
            m = int(rng.integers(1, max(2, dom.size // 4)))
            idx = order[:m]
            u = ub.copy()
            u[idx] = np.where(ub[idx] == lower[idx], upper[idx], lower[idx])
            frac = rng.uniform(0.0, 1.0)
            u[idx] = ub[idx] + frac * (u[idx] - ub[idx])
            kind = "flip"
        dist = dom.norm(u - ub, "L1")
        if dist == 0.0:
            continue
        ratios.append(dom.inner(phi, u - ub) / dist**p)
        kinds.append(kind)
    ratios = np.array(ratios)
    return GrowthCheckResult(
        n_samples, float(ratios.min()), int(np.sum(ratios < threshold)), seed, ratios, kinds
    )


# --------------------------------------------------------------------------
# second-order sufficient condition


def critical_cone(instance: ProblemInstance, record: SolutionRecord, tau: float, partition=None):
    """Masks (free, nonneg, nonpos) describing the cone C^tau nodewise."""
    part = partition or record.partition or partition_active_sets(instance, record.e, record.u)
    support = np.abs(record.phi) <= tau
    return support & part.I2, support & part.I1, support & part.I3


@dataclass
class SSCReport:
    n_samples: int
    min_quotient: float
    below_target: int
    seed: int
    tau: float
    quotients: np.ndarray = field(repr=False)


def ssc_quotient(instance, record, v) -> float:
    z = solve_linearized(instance.operator, record.y, instance.nonlinearity, v, instance.linear_solver)
    zz = instance.domain.inner(z, z)
    return hessian_form(instance, record.u, record.e, v, v) / zz


def check_ssc(
    instance: ProblemInstance, record: SolutionRecord, tau: float, delta_target: float = 0.0,
    n_samples: int = 500, seed: int = 0,
) -> SSCReport:
    free, pos, neg = critical_cone(instance, record, tau)
    allowed = free | pos | neg
    idx = np.flatnonzero(allowed)
    rng = np.random.default_rng(seed)
    if idx.size == 0:
        return SSCReport(0, float("nan"), 0, seed, tau, np.array([]))
    sign = np.where(pos, 1.0, np.where(neg, -1.0, 0.0))
    q = []
    for k in range(n_samples):
        v = instance.domain.zeros()
        if k % 3 == 0:
            chosen = idx
        else:
            m = int(rng.integers(1, idx.size + 1))
            chosen = rng.choice(idx, size=m, replace=False)
        mag = rng.uniform(0.0, 1.0, size=chosen.size) ** (1 + k % 4)
        s = sign[chosen]
        s = np.where(s == 0.0, rng.choice([-1.0, 1.0], size=chosen.size), s)
        v[chosen] = s * mag
        if not np.any(v):
            v[chosen[0]] = s[0]
        q.append(ssc_quotient(instance, record, v))
    q = np.array(q)
    return SSCReport(n_samples, float(q.min()), int(np.sum(q < delta_target)), seed, tau, q)


def ssc_eigen_oracle(instance: ProblemInstance, record: SolutionRecord, tau: float, max_nodes: int = 12) -> float:
    """Exact minimum of J''v^2 / |z_v|^2 over C^tau for tiny grids.

    On each face of the sign orthant the minimizer is a generalized
    eigenvector of the restricted pencil; faces are enumerated exhaustively.
    """
    dom = instance.domain
    if dom.size > max_nodes:
        raise ValueError(f"eigen oracle limited to {max_nodes} nodes")
    free, pos, neg = critical_cone(instance, record, tau)
    n = dom.size
    basis = np.eye(n)
    Z = np.array([solve_linearized(instance.operator, record.y, instance.nonlinearity, b) for b in basis])
    M = dom.cell_volume * Z @ Z.T
    H = np.array([[hessian_form(instance, record.u, record.e, basis[i], basis[j]) for j in range(n)] for i in range(n)])
    H = 0.5 * (H + H.T)
    signed = np.flatnonzero(pos | neg)
    fixed_free = np.flatnonzero(free)
    sgn = np.where(pos, 1.0, -1.0)
    best = np.inf
    for r in range(len(signed) + 1):
        for S in itertools.combinations(signed, r):
            sup = np.concatenate([fixed_free, np.array(S, dtype=int)])
            if sup.size == 0:
                continue
            sup = np.sort(sup)
            w, V = sla.eigh(H[np.ix_(sup, sup)], M[np.ix_(sup, sup)])
            for lam, vec in zip(w, V.T):
                for s in (1.0, -1.0):
                    v = s * vec
                    on = np.isin(sup, signed)
                    if np.all(sgn[sup[on]] * v[on] >= -1e-12):
                        best = min(best, float(lam))
    return best


# --------------------------------------------------------------------------
# Hoelder stability


@dataclass
class HolderFitResult:
    sizes: np.ndarray
    distances: np.ndarray
    exponent: float
    constant: float
    r2: float
    predicted: float
    note: str = ""
    error: str | None = None


def default_holder_ladder(instance: ProblemInstance, family: PerturbationE, n: int = 6) -> np.ndarray:
    """Geometric scales with |s * family|_E capped at sigma / 8."""
    fam = instance.enorm(family)
    sigma = instance.sigma if instance.sigma is not None else float(np.min(instance.beta - instance.alpha))
    top = sigma / 8.0 / fam if fam > 0 else 1.0
    return geometric_ladder(top, n)


def holder_stability_experiment(
    instance: ProblemInstance, e_bar: PerturbationE, family: PerturbationE, ladder, kappa: float | None = None,
    opts: SolveOptions | None = None, base: SolutionRecord | None = None,
) -> HolderFitResult:
    opts = opts or SolveOptions()
    ladder = np.asarray(ladder, dtype=float)
    predicted = min(kappa, 1.0) if kappa is not None else float("nan")
    if base is None:
        base = solve_control_problem(instance, e_bar, opts=opts)
    sizes, dists = [], []
    if family.is_zero():
        z = np.zeros(ladder.size)
        return HolderFitResult(z, z.copy(), float("nan"), float("nan"), float("nan"), predicted, "degenerate family")
    error = None
    for s in ladder:
        de = s * family
        try:
            rec = solve_control_problem(instance, e_bar + de, init=base.u, opts=opts)
        except Exception as exc:  # keep the partial ladder
            error = f"re-solve failed at s={s:.3e}: {exc}"
            break
        sizes.append(instance.enorm(de))
        dists.append(instance.domain.norm(rec.u - base.u, "L1"))
    sizes, dists = np.array(sizes), np.array(dists)
    pos = dists > 0
    if pos.sum() < 3:
        return HolderFitResult(sizes, dists, float("nan"), float("nan"), float("nan"), predicted,
                               "fewer than 3 nonzero distances", error)
    p, c, r2 = loglog_fit(sizes[pos], dists[pos])
    return HolderFitResult(sizes, dists, p, c, r2, predicted, "", error)


# --------------------------------------------------------------------------
# boundedness of subgradients along a ladder


@dataclass
class BoundednessReport:
    scales: np.ndarray
    norms: np.ndarray  # rows: ladder points, columns: e_J, e_y, e_alpha, e_beta
    base_norm: float
    bound: float
    passed: bool


def subgradient_boundedness_sweep(
    instance: ProblemInstance, e_bar: PerturbationE, direction: PerturbationE, ladder,
    opts: SolveOptions | None = None, constant: float = 1.0,
) -> BoundednessReport:
    """Regular subgradients at e_bar + s d for s -> 0 stay uniformly bounded."""
    if instance.Q is not None:
        raise ValueError("boundedness sweep assumes Q = whole space")
    opts = opts or SolveOptions()
    dom = instance.domain
    base = solve_control_problem(instance, e_bar, opts=opts)
    sb = regular_subgradient(instance, base)
    base_norm = sb.dual.norm(dom, "l2")
    rows = []
    for s in ladder:
        rec = solve_control_problem(instance, e_bar + s * direction, init=base.u, opts=opts)
        sub = regular_subgradient(instance, rec)
        rows.append([dom.norm(c) for c in (sub.e_J, sub.e_y, sub.e_alpha, sub.e_beta)])
    norms = np.array(rows)
    bound = 2.0 * base_norm + constant
    return BoundednessReport(np.asarray(ladder, float), norms, base_norm, bound, bool(np.all(norms.sum(1) <= bound)))


# --------------------------------------------------------------------------
# brute-force regular normal cone of the constraint graph


def normal_cone_oracle(
    partition: ActiveSetPartition, cone: ConeElementQ, estar: PerturbationE, ustar, tol: float = 1e-7
):
    """Test (e*, -u*) against the tangent cone of gph G by linear programming.

    Maximizes <(e*, -u*), d> over tangent directions d with |d|_inf <= 1;
    the pair is a regular normal iff the maximum is zero (up to tol).
    """
    p = partition
    n = p.size
    c = -np.concatenate([estar.e_J, estar.e_y, estar.e_alpha, estar.e_beta, -np.asarray(ustar, float)])
    blocks = {"J": 0, "y": 1, "a": 2, "b": 3, "u": 4}

    def col(block, i):
        return blocks[block] * n + i

    rows = []
    for i in np.flatnonzero(p.I1):  # d_alpha - d_u <= 0
        r = np.zeros(5 * n)
        r[col("a", i)], r[col("u", i)] = 1.0, -1.0
        rows.append(r)
    for i in np.flatnonzero(p.I3):  # d_u - d_beta <= 0
        r = np.zeros(5 * n)
        r[col("u", i)], r[col("b", i)] = 1.0, -1.0
        rows.append(r)
    if cone.tag == "ray":
        r = np.zeros(5 * n)
        r[4 * n:] = cone.direction
        rows.append(r)
    A = np.array(rows) if rows else None
    b = np.zeros(len(rows)) if rows else None
    res = linprog(c, A_ub=A, b_ub=b, bounds=[(-1.0, 1.0)] * (5 * n), method="highs")
    if res.status != 0:
        raise RuntimeError(f"normal-cone LP failed: {res.message}")
    value = -float(res.fun)
    return value <= tol, value


# --------------------------------------------------------------------------
# random candidates for the coderivative equivalence check

VIOLATIONS = ("e_J", "e_y", "alpha_sign", "alpha_support", "beta_sign", "beta_support", "cone")


@dataclass
class CoderivativeCandidate:
    partition: ActiveSetPartition
    cone: ConeElementQ
    estar: PerturbationE
    ustar: np.ndarray
    planted: str  # "member" or the violated condition


def random_coderivative_candidates(n_nodes: int = 8, count: int = 100, seed: int = 0, scale: float = 0.05):
    """Seeded candidates: half members, half with one planted violation of size >= ``scale``.

    Members satisfy every condition exactly, so the two decision routes can
    be compared without tolerance ambiguity.
    """
    rng = np.random.default_rng(seed)
    out = []
    for k in range(count):
        labels = rng.integers(0, 3, size=n_nodes)
        part = ActiveSetPartition.from_masks(labels == 0, labels == 2)
        if rng.random() < 0.5:
            cone = ConeElementQ("zero")
        else:
            u = rng.normal(size=n_nodes)
            if rng.random() < 0.5:  # sign-compatible ray, so singular elements exist
                u = np.where(part.I1, np.abs(u), np.where(part.I3, -np.abs(u), 0.0))
                if not np.any(u):
                    u[0] = 1.0
            cone = ConeElementQ.ray(u)
        z = np.zeros(n_nodes)
        ea = np.where(part.I1, rng.uniform(0, 1, n_nodes) * (rng.random(n_nodes) < 0.8), 0.0)
        eb = np.where(part.I3, -rng.uniform(0, 1, n_nodes) * (rng.random(n_nodes) < 0.8), 0.0)
        eJ, ey = z.copy(), z.copy()
        lam = rng.uniform(0, 2) if cone.tag == "ray" else 0.0
        u2 = lam * cone.direction if cone.tag == "ray" else z.copy()
        planted = "member"
        if k % 2 == 1:
            planted = VIOLATIONS[rng.integers(len(VIOLATIONS))]
            i = int(rng.integers(n_nodes))
            mag = rng.uniform(scale, 1.0)
            if planted == "e_J":
                eJ[i] = mag * rng.choice([-1, 1])
            elif planted == "e_y":
                ey[i] = mag * rng.choice([-1, 1])
            elif planted in ("alpha_sign", "alpha_support"):
                pool = np.flatnonzero(part.I1 if planted == "alpha_sign" else ~part.I1)
                if pool.size == 0:
                    planted = "e_J"
                    eJ[i] = mag
                else:
                    j = rng.choice(pool)
                    ea[j] = -mag if planted == "alpha_sign" else mag * rng.choice([-1, 1])
            elif planted in ("beta_sign", "beta_support"):
                pool = np.flatnonzero(part.I3 if planted == "beta_sign" else ~part.I3)
                if pool.size == 0:
                    planted = "e_y"
                    ey[i] = mag
                else:
                    j = rng.choice(pool)
                    eb[j] = mag if planted == "beta_sign" else mag * rng.choice([-1, 1])
            else:  # u2 leaves N(u; Q)
                w = rng.normal(size=n_nodes)
                if cone.tag == "ray":
                    if rng.random() < 0.5:
                        w = w - (w @ cone.direction) * cone.direction
                        u2 = u2 + mag * w / np.max(np.abs(w))
                    else:
                        u2 = -mag * cone.direction
                else:
                    u2 = mag * w / np.max(np.abs(w))
        ustar = ea + eb - u2
        out.append(CoderivativeCandidate(part, cone, PerturbationE(eJ, ey, ea, eb), ustar, planted))
    return out
