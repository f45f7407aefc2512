"""Perturbed reduced cost J(u, e) and its derivatives.

    J(u, e) = int L(x, y) + 1/2 int zeta (u + e_y)^2 + (e_J, y),
    A y + f(y) = u + e_y.

The e_y shift enters the quadratic control term too, so the exact discrete
u-gradient is phi + zeta (u + e_y). At every test point with e_y = 0 or
zeta = 0 this is the familiar phi + zeta u.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .grid import GridDomain
from .pde import (
    EllipticOperator,
    Nonlinearity,
    Tracking,
    assemble_operator,
    solve_adjoint,
    solve_linear,
    solve_linearized,
    solve_state,
)

NORM_MODES = {
    "l2": ("L2", "L2", "L2", "L2"),
    "bangbang": ("L2", "L2", "Linf", "Linf"),
}
COMPONENTS = ("e_J", "e_y", "e_alpha", "e_beta")
ZETA_CONVENTION = "gradient = phi + zeta*(u + e_y)"


@dataclass(frozen=True, eq=False)
class PerturbationE:
    """Perturbation e = (e_J, e_y, e_alpha, e_beta); also used for dual elements."""

    e_J: np.ndarray
    e_y: np.ndarray
    e_alpha: np.ndarray
    e_beta: np.ndarray

    @classmethod
    def zeros(cls, domain: GridDomain) -> "PerturbationE":
        return cls(*(domain.zeros() for _ in COMPONENTS))

    @classmethod
    def single(cls, domain: GridDomain, component: str, values) -> "PerturbationE":
        if component not in COMPONENTS:
            raise ValueError(f"unknown component {component!r}; expected one of {COMPONENTS}")
        parts = {c: domain.zeros() for c in COMPONENTS}
        parts[component] = domain.check(values).copy()
        return cls(**parts)

    def components(self) -> tuple[np.ndarray, ...]:
        return (self.e_J, self.e_y, self.e_alpha, self.e_beta)

    def __add__(self, other: "PerturbationE") -> "PerturbationE":
        return PerturbationE(*(a + b for a, b in zip(self.components(), other.components())))

    def __sub__(self, other: "PerturbationE") -> "PerturbationE":
        return PerturbationE(*(a - b for a, b in zip(self.components(), other.components())))

    def __mul__(self, s: float) -> "PerturbationE":
        return PerturbationE(*(s * a for a in self.components()))

    __rmul__ = __mul__

    def norm(self, domain: GridDomain, mode: str = "l2") -> float:
        """Sum of the four component norms."""
        kinds = NORM_MODES[mode]
        return sum(domain.norm(c, k) for c, k in zip(self.components(), kinds))

    def pair(self, other: "PerturbationE", domain: GridDomain) -> float:
        """Componentwise discrete L2 pairing <self, other>_E."""
        return sum(domain.inner(a, b) for a, b in zip(self.components(), other.components()))

    def is_zero(self) -> bool:
        return not any(np.any(c) for c in self.components())


@dataclass(frozen=True)
class Ball:
    """Q = closed L2 ball of the given radius centered at 0."""

    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("ball radius must be positive")


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    domain: GridDomain
    operator: EllipticOperator
    nonlinearity: Nonlinearity
    integrand: Tracking
    zeta: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    Q: Ball | None = None
    norm_mode: str = "l2"
    p0: float = 2.0
    sigma: float | None = None
    linear_solver: str = "auto"
    newton_tol: float = 1e-11

    def __post_init__(self):
        dom = self.domain
        for name in ("zeta", "alpha", "beta"):
            object.__setattr__(self, name, dom.check(getattr(self, name)).copy())
        if np.any(self.zeta < 0):
            raise ValueError("zeta must be nonnegative")
        if not np.all(self.alpha < self.beta):
            raise ValueError("need alpha < beta at every node")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")
        if self.norm_mode == "bangbang":
            if np.any(self.zeta != 0):
                raise ValueError("bang-bang regime requires zeta = 0")
            if self.Q is not None:
                raise ValueError("bang-bang regime requires Q = whole space")
            if self.sigma is None:
                object.__setattr__(self, "sigma", float(np.min(self.beta - self.alpha)))
            elif np.any(self.beta - self.alpha < self.sigma):
                raise ValueError("declared sigma exceeds the bound gap")

    @property
    def bangbang(self) -> bool:
        return self.norm_mode == "bangbang"

    @property
    def bound_scale(self) -> float:
        return 1.0 + float(np.max(np.abs(self.beta - self.alpha)))

    def bounds(self, e: PerturbationE) -> tuple[np.ndarray, np.ndarray]:
        return self.alpha + e.e_alpha, self.beta + e.e_beta

    def with_(self, **changes) -> "ProblemInstance":
        return replace(self, **changes)

    def enorm(self, e: PerturbationE) -> float:
        return e.norm(self.domain, self.norm_mode)


def make_instance(
    domain: GridDomain,
    *,
    nonlinearity: Nonlinearity | None = None,
    target=None,
    tracking_weight: float = 1.0,
    zeta=0.0,
    alpha=-1.0,
    beta=1.0,
    coefficients=None,
    **kwargs,
) -> ProblemInstance:
    """Convenience constructor; scalars broadcast to constant fields."""

    def as_field(v):
        v = np.asarray(v, dtype=float)
        return domain.full(float(v)) if v.ndim == 0 else domain.check(v)

    return ProblemInstance(
        domain=domain,
        operator=assemble_operator(domain, coefficients),
        nonlinearity=nonlinearity or Nonlinearity("zero"),
        integrand=Tracking(as_field(0.0 if target is None else target), tracking_weight),
        zeta=as_field(zeta),
        alpha=as_field(alpha),
        beta=as_field(beta),
        **kwargs,
    )


def target_for_adjoint(
    op: EllipticOperator, f: Nonlinearity, control, adjoint, weight: float = 1.0, e_J=None, method="auto"
) -> np.ndarray:
    """Tracking target that makes ``adjoint`` the adjoint state at ``control``.

    Solves for y = y_control and returns y_d with
    weight (y - y_d) + e_J = (A + f_y(y)) adjoint.
    """
    y = solve_state(op, f, control, method=method).y
    lhs = op.apply(adjoint) + f.dy(y) * adjoint
    if e_J is not None:
        lhs = lhs - e_J
    return y - lhs / weight


@dataclass
class CostEvaluation:
    value: float
    y: np.ndarray
    phi: np.ndarray | None
    newton_iterations: int = 0


def evaluate_cost(
    instance: ProblemInstance, u, e: PerturbationE | None = None, adjoint: bool = True, y0=None
) -> CostEvaluation:
    dom = instance.domain
    e = e or PerturbationE.zeros(dom)
    v = dom.check(u) + e.e_y
    rep = solve_state(
        instance.operator, instance.nonlinearity, v, y0=y0, tol=instance.newton_tol, method=instance.linear_solver
    )
    y = rep.y
    value = (
        dom.integrate(instance.integrand.value(y))
        + 0.5 * dom.integrate(instance.zeta * v**2)
        + dom.inner(e.e_J, y)
    )
    phi = None
    if adjoint:
        phi = solve_adjoint(
            instance.operator, y, instance.nonlinearity, instance.integrand, e.e_J, method=instance.linear_solver
        )
    return CostEvaluation(value, y, phi, rep.iterations)


def gradient_u(instance: ProblemInstance, u, e: PerturbationE | None = None, ev: CostEvaluation | None = None):
    """L2-Riesz representative of d/du J(u, e)."""
    dom = instance.domain
    e = e or PerturbationE.zeros(dom)
    if ev is None or ev.phi is None:
        ev = evaluate_cost(instance, u, e)
    return ev.phi + instance.zeta * (dom.check(u) + e.e_y)


def gradient_e(instance: ProblemInstance, u, e: PerturbationE | None = None, ev: CostEvaluation | None = None):
    """Partial derivative of J in e as a dual element.

    The bound components vanish identically: J does not see e_alpha, e_beta.
    """
    dom = instance.domain
    e = e or PerturbationE.zeros(dom)
    if ev is None or ev.phi is None:
        ev = evaluate_cost(instance, u, e)
    g = ev.phi + instance.zeta * (dom.check(u) + e.e_y)
    return PerturbationE(e_J=ev.y.copy(), e_y=g, e_alpha=dom.zeros(), e_beta=dom.zeros())


def hessian_form(
    instance: ProblemInstance, u, e: PerturbationE | None, v1, v2, ev: CostEvaluation | None = None
) -> float:
    """Second derivative d^2/du^2 J(u, e)[v1, v2]."""
    dom = instance.domain
    e = e or PerturbationE.zeros(dom)
    if ev is None or ev.phi is None:
        ev = evaluate_cost(instance, u, e)
    op, f = instance.operator, instance.nonlinearity
    z1 = solve_linearized(op, ev.y, f, v1, instance.linear_solver)
    z2 = z1 if v2 is v1 else solve_linearized(op, ev.y, f, v2, instance.linear_solver)
    weight = instance.integrand.dyy(ev.y) - ev.phi * f.dyy(ev.y)
    return dom.inner(weight * z1, z2) + dom.inner(instance.zeta * v1, v2)


def linearized_states(instance: ProblemInstance, y, directions) -> np.ndarray:
    """Columns z_v for each row v of ``directions``."""
    op, f = instance.operator, instance.nonlinearity
    return np.array([solve_linear(op, f.dy(y), v, instance.linear_solver) for v in directions])
