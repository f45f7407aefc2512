"""Active sets, closed-form marginal subgradients and coderivative tests.

Dual elements live on the grid through the discrete L2 pairing, so every
subgradient is a 4-tuple of fields in the e_J, e_y, e_alpha, e_beta slots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .objective import PerturbationE, ProblemInstance
from .optimize import SolutionRecord

ACTIVITY_TOL = 1e-8
INTERIOR_MARGIN = 1e-10
BANGBANG_I2_FRACTION = 0.01


@dataclass(frozen=True, eq=False)
class ActiveSetPartition:
    I1: np.ndarray  # lower-active mask
    I2: np.ndarray  # inactive
    I3: np.ndarray  # upper-active
    tol: float
    scale: float

    @property
    def size(self) -> int:
        return self.I1.size

    def counts(self) -> tuple[int, int, int]:
        return int(self.I1.sum()), int(self.I2.sum()), int(self.I3.sum())

    @classmethod
    def from_masks(cls, I1, I3, tol=ACTIVITY_TOL, scale=1.0):
        I1, I3 = np.asarray(I1, dtype=bool), np.asarray(I3, dtype=bool)
        if np.any(I1 & I3):
            raise ValueError("a node cannot be active at both bounds")
        return cls(I1, ~(I1 | I3), I3, tol, scale)


def partition_active_sets(instance: ProblemInstance, e: PerturbationE, u, tol: float = ACTIVITY_TOL):
    lower, upper = instance.bounds(e)
    scale = instance.bound_scale
    band = tol * scale
    I1 = u - lower <= band
    I3 = upper - u <= band
    both = I1 & I3
    if np.any(both):
        raise ValueError(
            f"{int(both.sum())} node(s) active at both bounds: the bound gap is within "
            f"2*tol*scale = {2 * band:.3e}; use a smaller activity tol or a wider gap"
        )
    return ActiveSetPartition(I1, ~(I1 | I3), I3, tol, scale)


# --------------------------------------------------------------------------
# normal cone of Q


@dataclass(frozen=True, eq=False)
class ConeElementQ:
    """N(u; Q): {0} in the interior, the ray {lam * u/|u| : lam >= 0} on a ball boundary."""

    tag: str  # "zero" or "ray"
    direction: np.ndarray | None = None  # unit vector (nodal Euclidean) for the ray

    @classmethod
    def at(cls, instance: ProblemInstance, u) -> "ConeElementQ":
        if instance.Q is None:
            return cls("zero")
        R = instance.Q.radius
        if instance.domain.norm(u) < R - INTERIOR_MARGIN * R:
            return cls("zero")
        return cls.ray(u)

    @classmethod
    def ray(cls, u) -> "ConeElementQ":
        u = np.asarray(u, dtype=float)
        return cls("ray", u / np.linalg.norm(u))

    def decompose(self, w, tol: float):
        """Return (member, lam, distance) for w against the cone."""
        w = np.asarray(w, dtype=float)
        if self.tag == "zero":
            dist = float(np.max(np.abs(w))) if w.size else 0.0
            return dist <= tol, 0.0, dist
        lam = float(self.direction @ w)
        dist = float(np.max(np.abs(w - lam * self.direction)))
        return (lam >= -tol and dist <= tol), lam, dist


# --------------------------------------------------------------------------
# subgradients


@dataclass
class SubgradientE:
    dual: PerturbationE
    certificate: dict
    kind: str = "regular"
    u2: np.ndarray | None = None
    regular_equals_limiting: bool = True

    @property
    def e_y(self):
        return self.dual.e_y

    @property
    def e_J(self):
        return self.dual.e_J

    @property
    def e_alpha(self):
        return self.dual.e_alpha

    @property
    def e_beta(self):
        return self.dual.e_beta

    def pair(self, d: PerturbationE, domain) -> float:
        return self.dual.pair(d, domain)


def _require_converged(record: SolutionRecord):
    if not record.converged:
        raise ValueError("subgradient construction needs a converged record")


def _ball_multiplier(g, u, part: ActiveSetPartition) -> float:
    """Minimal lam >= 0 with g + lam*u best matching zero on I2.

    With I2 empty the smallest lam restoring the sign pattern on I1/I3 is used.
    """
    if part.I2.any():
        uu = float(u[part.I2] @ u[part.I2])
        if uu == 0.0:
            return 0.0
        return max(0.0, -float(g[part.I2] @ u[part.I2]) / uu)
    need = [0.0]
    # g + lam*u >= 0 on I1 and <= 0 on I3
    m1 = part.I1 & (g < 0) & (u > 0)
    m3 = part.I3 & (g > 0) & (u < 0)
    need += list(-g[m1] / u[m1]) + list(-g[m3] / u[m3])
    return float(max(need))


def regular_subgradient(instance: ProblemInstance, record: SolutionRecord, tol: float = ACTIVITY_TOL) -> SubgradientE:
    """The tuple (g, y, (g + u2) 1_I1, (g + u2) 1_I3) with g = phi + zeta (u + e_y)."""
    _require_converged(record)
    if instance.bangbang:
        raise ValueError("regular_subgradient targets the all-L2 regime; use bangbang_subgradient")
    dom = instance.domain
    u, e = record.u, record.e
    part = record.partition or partition_active_sets(instance, e, u, tol)
    g = record.phi + instance.zeta * (u + e.e_y)
    cone = ConeElementQ.at(instance, u)
    lam = 0.0
    u2 = dom.zeros()
    if cone.tag == "ray":
        lam = _ball_multiplier(g, u, part)
        u2 = lam * u
    s = g + u2
    e_alpha = np.where(part.I1, s, 0.0)
    e_beta = np.where(part.I3, s, 0.0)
    cert = {
        "i2_residual": float(np.max(np.abs(s[part.I2]))) if part.I2.any() else 0.0,
        "alpha_sign_violation": float(max(0.0, -s[part.I1].min())) if part.I1.any() else 0.0,
        "beta_sign_violation": float(max(0.0, s[part.I3].max())) if part.I3.any() else 0.0,
        "support_leakage": 0.0,
        "cone": cone.tag,
        "ball_multiplier": lam,
        "selection": "minimal-norm" if cone.tag == "ray" else "zero",
        "stationarity": record.residual,
    }
    dual = PerturbationE(e_J=record.y.copy(), e_y=g, e_alpha=e_alpha, e_beta=e_beta)
    return SubgradientE(dual, cert, "regular", u2)


def limiting_subgradient_conditions(instance, record, tol: float = ACTIVITY_TOL) -> SubgradientE:
    """Same tuple as the regular one: the constraint map is normally regular."""
    sub = regular_subgradient(instance, record, tol)
    sub.kind = "limiting"
    sub.regular_equals_limiting = True
    return sub


def bangbang_subgradient(
    instance: ProblemInstance, record: SolutionRecord, tol: float = ACTIVITY_TOL,
    i2_fraction: float = BANGBANG_I2_FRACTION,
) -> SubgradientE:
    """(phi, y, phi 1_I1, phi 1_I3) in the zeta = 0 regime."""
    _require_converged(record)
    if np.any(instance.zeta) or instance.Q is not None:
        raise ValueError("bang-bang subgradient requires zeta = 0 and Q = whole space")
    phi = record.phi
    part = record.partition or partition_active_sets(instance, record.e, record.u, tol)
    frac = float(part.I2.mean())
    cert = {
        "i2_residual": float(np.max(np.abs(phi[part.I2]))) if part.I2.any() else 0.0,
        "i2_fraction": frac,
        "alpha_sign_violation": float(max(0.0, -phi[part.I1].min())) if part.I1.any() else 0.0,
        "beta_sign_violation": float(max(0.0, phi[part.I3].max())) if part.I3.any() else 0.0,
        "phi_inf": float(np.max(np.abs(phi))),
        "bang_bang": frac <= i2_fraction,
        "warning": None if frac <= i2_fraction else f"inactive fraction {frac:.3g} exceeds {i2_fraction}",
    }
    dual = PerturbationE(
        e_J=record.y.copy(), e_y=phi.copy(),
        e_alpha=np.where(part.I1, phi, 0.0), e_beta=np.where(part.I3, phi, 0.0),
    )
    return SubgradientE(dual, cert, "bang-bang")


# --------------------------------------------------------------------------
# coderivative


def coderivative_membership(
    partition: ActiveSetPartition, cone: ConeElementQ, estar: PerturbationE, ustar, tol: float = 1e-9
):
    """Decide e* in D*G(e, u)(u*) for G(e) = [alpha + e_alpha, beta + e_beta] cap Q.

    Returns (member, witness) with witness holding u1 = e*_alpha + e*_beta,
    u2 = u1 - u* and the individual violations.
    """
    p = partition

    def worst(a, mask):
        return float(np.max(a[mask])) if mask.any() else 0.0

    viol = {
        "e_J": float(np.max(np.abs(estar.e_J))),
        "e_y": float(np.max(np.abs(estar.e_y))),
        "alpha_sign": worst(-estar.e_alpha, p.I1),
        "alpha_support": worst(np.abs(estar.e_alpha), ~p.I1),
        "beta_sign": worst(estar.e_beta, p.I3),
        "beta_support": worst(np.abs(estar.e_beta), ~p.I3),
    }
    u1 = estar.e_alpha + estar.e_beta
    u2 = u1 - np.asarray(ustar, dtype=float)
    in_cone, lam, dist = cone.decompose(u2, tol)
    viol["cone_distance"] = dist
    viol["cone_multiplier"] = -lam if cone.tag == "ray" and lam < 0 else 0.0
    member = in_cone and all(v <= tol for k, v in viol.items() if k not in ("cone_distance", "cone_multiplier"))
    witness = {"u1": u1, "u2": u2, "lambda": lam, "violations": viol}
    return bool(member), witness


@dataclass
class SingularEstimate:
    description: str
    zero_test: bool
    generator: PerturbationE | None
    partition: ActiveSetPartition = field(repr=False)
    cone: ConeElementQ = field(repr=False)

    def contains(self, estar: PerturbationE, tol: float = 1e-9) -> bool:
        member, _ = coderivative_membership(self.partition, self.cone, estar, np.zeros(self.partition.size), tol)
        return member


def singular_upper_estimate(partition: ActiveSetPartition, cone: ConeElementQ, tol: float = 1e-12) -> SingularEstimate:
    """Constraint description of the set bounding the singular subdifferential.

    {(0, 0, a, b) : a >= 0 on I1, 0 off I1; b <= 0 on I3, 0 off I3; a + b in N(u; Q)}.
    """
    p = partition
    desc = (
        "e*_J = 0; e*_y = 0; e*_alpha >= 0 on I1 and 0 elsewhere; "
        "e*_beta <= 0 on I3 and 0 elsewhere; e*_alpha + e*_beta in N(u; Q)"
    )
    n = p.size
    if cone.tag == "zero":
        return SingularEstimate(desc + " = {0}", True, None, p, cone)
    d = cone.direction
    ok = np.all(np.abs(d[p.I2]) <= tol) and np.all(d[p.I1] >= -tol) and np.all(d[p.I3] <= tol)
    if not ok:
        return SingularEstimate(desc + "; ray direction incompatible with signs, set = {0}", True, None, p, cone)
    z = np.zeros(n)
    gen = PerturbationE(z, z.copy(), np.where(p.I1, d, 0.0), np.where(p.I3, d, 0.0))
    return SingularEstimate(desc + "; generated by lam * (0, 0, n 1_I1, n 1_I3), lam >= 0", False, gen, p, cone)
