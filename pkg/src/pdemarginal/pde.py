"""Finite-difference elliptic operator and the state, linearized,
second-derivative and adjoint solves.

Everything here is discretize-then-optimize: the adjoint system uses the
exact transpose of the assembled matrix, so reduced gradients built from it
are exact derivatives of the discrete cost.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import GridDomain

log = logging.getLogger(__name__)

Coefficient = Union[float, Callable[..., np.ndarray]]

NEWTON_TOL = 1e-11
NEWTON_MAX_ITER = 50
LINEAR_RTOL = 1e-12


class SolverError(RuntimeError):
    """A linear or nonlinear solve did not reach its tolerance."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


# --------------------------------------------------------------------------
# operator


@dataclass(frozen=True)
class Coefficients:
    """Diagonal coefficient field a_ii(x), one entry per axis.

    Entries are constants or callables of the coordinates. ``a_ij = 0`` for
    i != j, so the assembled operator is always symmetric.
    """

    diagonal: tuple[Coefficient, ...] = (1.0,)
    name: str = "laplace"

    @classmethod
    def laplace(cls, dim: int = 1) -> "Coefficients":
        return cls(diagonal=(1.0,) * dim, name="laplace")

    @classmethod
    def diagonal_constant(cls, values) -> "Coefficients":
        return cls(diagonal=tuple(float(v) for v in values), name="diagonal")

    def evaluate(self, axis: int, *coords) -> np.ndarray:
        a = self.diagonal[axis]
        if callable(a):
            return np.broadcast_to(np.asarray(a(*coords), dtype=float), coords[0].shape)
        return np.full(coords[0].shape, float(a))


@dataclass(frozen=True, eq=False)
class EllipticOperator:
    domain: GridDomain
    coefficients: Coefficients
    matrix: sp.csr_matrix
    ellipticity: float

    @cached_property
    def inf_norm(self) -> float:
        return float(abs(self.matrix).sum(axis=1).max())

    @cached_property
    def _lu(self):
        return spla.splu(self.matrix.tocsc())

    def apply(self, y) -> np.ndarray:
        return self.matrix @ y


def _face_coords(domain: GridDomain, axis: int):
    """Coordinates of the faces crossed by axis-``axis`` differences.

    Returns flat coordinate arrays over a grid with ``n_axis + 1`` faces on
    ``axis`` and the interior nodes on the other axes.
    """
    axes = []
    for i in range(domain.dim):
        if i == axis:
            a = domain.extents[i][0]
            axes.append(a + domain.h[i] * (np.arange(domain.n_interior[i] + 1) + 0.5))
        else:
            axes.append(domain.axis_nodes(i))
    mesh = np.meshgrid(*axes, indexing="ij")
    return mesh


def assemble_operator(domain: GridDomain, coefficients: Coefficients | None = None) -> EllipticOperator:
    """Assemble the conservative 3/5-point discretization of -div(a grad y).

    Rejects coefficient fields whose sampled minimum is not positive.
    """
    if coefficients is None:
        coefficients = Coefficients.laplace(domain.dim)
    if len(coefficients.diagonal) != domain.dim:
        raise ValueError("need one diagonal coefficient per axis")

    shape = domain.shape
    index = np.arange(domain.size).reshape(shape)
    rows, cols, vals = [], [], []
    diag = np.zeros(shape)
    lam = np.inf
    for axis in range(domain.dim):
        mesh = _face_coords(domain, axis)
        k = coefficients.evaluate(axis, *mesh).reshape(mesh[0].shape)
        node_vals = coefficients.evaluate(axis, *domain.coords)
        lam = min(lam, float(k.min()), float(node_vals.min()))
        k = k / domain.h[axis] ** 2
        lo = [slice(None)] * domain.dim
        hi = [slice(None)] * domain.dim
        lo[axis] = slice(0, -1)  # face on the low side of each node
        hi[axis] = slice(1, None)
        diag += k[tuple(lo)] + k[tuple(hi)]
        # couplings across interior faces
        inner = [slice(None)] * domain.dim
        inner[axis] = slice(1, -1)
        kk = k[tuple(inner)].ravel()
        a_sl = [slice(None)] * domain.dim
        b_sl = [slice(None)] * domain.dim
        a_sl[axis] = slice(0, -1)
        b_sl[axis] = slice(1, None)
        ia = index[tuple(a_sl)].ravel()
        ib = index[tuple(b_sl)].ravel()
        rows += [ia, ib]
        cols += [ib, ia]
        vals += [-kk, -kk]
    if not lam > 0:
        raise ValueError(f"coefficients violate ellipticity: sampled minimum {lam}")
    rows.append(index.ravel())
    cols.append(index.ravel())
    vals.append(diag.ravel())
    matrix = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(domain.size, domain.size),
    )
    matrix.sum_duplicates()
    return EllipticOperator(domain=domain, coefficients=coefficients, matrix=matrix, ellipticity=lam)


# --------------------------------------------------------------------------
# nonlinearity and cost integrand

NONLINEARITIES = ("zero", "cubic", "scaled_cubic", "sinh")


@dataclass(frozen=True)
class Nonlinearity:
    """Monotone nonlinearity f(y) = c * g(y) from a fixed catalog."""

    kind: str = "zero"
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.kind!r}; catalog: {', '.join(NONLINEARITIES)}")
        if self.scale < 0:
            raise ValueError("nonlinearity scale must be >= 0 to keep f monotone")

    @property
    def c(self) -> float:
        if self.kind == "zero":
            return 0.0
        if self.kind == "cubic":
            return 1.0
        return float(self.scale)

    @property
    def is_linear(self) -> bool:
        return self.c == 0.0

    def f(self, y):
        if self.kind == "sinh":
            return self.c * np.sinh(y)
        return self.c * y**3

    def dy(self, y):
        if self.kind == "sinh":
            return self.c * np.cosh(y)
        return 3.0 * self.c * y**2

    def dyy(self, y):
        if self.kind == "sinh":
            return self.c * np.sinh(y)
        return 6.0 * self.c * y


@dataclass(frozen=True, eq=False)
class Tracking:
    """L(x, y) = weight/2 * (y - target)^2; weight 0 gives L = 0."""

    target: np.ndarray
    weight: float = 1.0

    def value(self, y):
        return 0.5 * self.weight * (y - self.target) ** 2

    def dy(self, y):
        return self.weight * (y - self.target)

    def dyy(self, y):
        return np.full_like(y, self.weight)


# --------------------------------------------------------------------------
# linear algebra


def pcg(matrix, rhs, rtol=LINEAR_RTOL, max_iter=None, x0=None):
    """Jacobi-preconditioned conjugate gradients for SPD ``matrix``."""
    n = rhs.shape[0]
    max_iter = max_iter or 10 * n
    dinv = 1.0 / matrix.diagonal()
    x = np.zeros(n) if x0 is None else x0.copy()
    r = rhs - matrix @ x
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(n), 0
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, max_iter + 1):
        Ap = matrix @ p
        step = rz / (p @ Ap)
        x += step * p
        r -= step * Ap
        if np.linalg.norm(r) <= rtol * bnorm:
            return x, it
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG stalled at relative residual {np.linalg.norm(r) / bnorm:.3e}")


def solve_linear(op: EllipticOperator, shift, rhs, method: str = "auto") -> np.ndarray:
    """Solve (A + diag(shift)) x = rhs."""
    if method == "auto":
        method = "direct" if op.domain.dim == 1 else "cg"
    rhs = np.asarray(rhs, dtype=float)
    zero_shift = shift is None or not np.any(shift)
    if method == "direct":
        if zero_shift:
            x = op._lu.solve(rhs)
        else:
            x = spla.spsolve((op.matrix + sp.diags(shift)).tocsc(), rhs)
        if not np.all(np.isfinite(x)):
            raise SolverError("direct solve produced non-finite values")
        return x
    if method == "cg":
        matrix = op.matrix if zero_shift else op.matrix + sp.diags(shift)
        x, _ = pcg(matrix.tocsr(), rhs)
        return x
    raise ValueError(f"unknown linear solver {method!r}")


# --------------------------------------------------------------------------
# solves


@dataclass
class StateSolveReport:
    y: np.ndarray
    iterations: int
    residual: float
    converged: bool
    tolerance: float


def state_residual(op: EllipticOperator, f: Nonlinearity, y, rhs) -> np.ndarray:
    return op.apply(y) + f.f(y) - rhs


def solve_state(
    op: EllipticOperator,
    f: Nonlinearity,
    rhs,
    y0=None,
    tol: float = NEWTON_TOL,
    max_iter: int = NEWTON_MAX_ITER,
    method: str = "auto",
    check: bool = True,
) -> StateSolveReport:
    """Damped Newton for A y + f(y) = rhs.

    The residual is measured in the discrete L2 norm. The tolerance is
    raised to the floating-point floor of evaluating A y when that floor is
    larger, since the stencil entries scale like 1/h^2.
    """
    dom = op.domain
    rhs = dom.check(rhs)
    y = np.zeros(dom.size) if y0 is None else np.array(y0, dtype=float)
    r = state_residual(op, f, y, rhs)
    rnorm = dom.norm(r)
    eps = np.finfo(float).eps

    def floor(y):
        return 16 * eps * (op.inf_norm * dom.norm(y) + dom.norm(rhs))

    it = 0
    while True:
        tol_eff = max(tol, floor(y))
        if rnorm <= tol_eff:
            return StateSolveReport(y, it, rnorm, True, tol_eff)
        if it >= max_iter:
            break
        it += 1
        dy = solve_linear(op, f.dy(y), -r, method)
        step = 1.0
        while True:
            y_new = y + step * dy
            r_new = state_residual(op, f, y_new, rhs)
            rn_new = dom.norm(r_new)
            if rn_new < rnorm or step < 2.0**-20:
                break
            step *= 0.5
        if rn_new >= rnorm:
            # stagnated at rounding level
            tol_eff = max(tol, floor(y))
            if rnorm <= 10 * tol_eff:
                return StateSolveReport(y, it, rnorm, True, 10 * tol_eff)
            break
        y, r, rnorm = y_new, r_new, rn_new
    report = StateSolveReport(y, it, rnorm, False, max(tol, floor(y)))
    if check:
        raise SolverError(f"Newton did not converge: residual {rnorm:.3e} after {it} iterations", report)
    return report


def solve_linearized(op: EllipticOperator, y, f: Nonlinearity, v, method: str = "auto") -> np.ndarray:
    """z = G'(u) v:  (A + f_y(y)) z = v."""
    return solve_linear(op, f.dy(y), op.domain.check(v), method)


def solve_second_derivative(op: EllipticOperator, y, f: Nonlinearity, z1, z2, method: str = "auto") -> np.ndarray:
    """w = G''(u)(v1, v2):  (A + f_y(y)) w = -f_yy(y) z1 z2."""
    rhs = -f.dyy(y) * z1 * z2
    if not np.any(rhs):
        return np.zeros_like(rhs)
    return solve_linear(op, f.dy(y), rhs, method)


def solve_adjoint(op: EllipticOperator, y, f: Nonlinearity, integrand, e_J=None, method: str = "auto") -> np.ndarray:
    """(A^T + f_y(y)) phi = L_y(y) + e_J.  A is symmetric for every catalog entry."""
    rhs = integrand.dy(y)
    if e_J is not None:
        rhs = rhs + op.domain.check(e_J)
    if not np.any(rhs):
        return np.zeros_like(rhs)
    return solve_linear(op, f.dy(y), rhs, method)
