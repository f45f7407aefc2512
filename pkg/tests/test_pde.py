import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdemarginal.grid import make_grid
from pdemarginal.pde import (
    Coefficients,
    Nonlinearity,
    SolverError,
    Tracking,
    assemble_operator,
    pcg,
    solve_adjoint,
    solve_linear,
    solve_linearized,
    solve_second_derivative,
    solve_state,
    state_residual,
)


def dense_laplacian(dom):
    """Independent assembly through Kronecker products of 1D stencils."""
    mats = []
    for n, h in zip(dom.n_interior, dom.h):
        mats.append((2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / h**2)
    if dom.dim == 1:
        return mats[0]
    n0, n1 = dom.n_interior
    return np.kron(mats[0], np.eye(n1)) + np.kron(np.eye(n0), mats[1])


def dense_variable_1d(dom, a):
    """Loop assembly of -(a y')' with face values a(x_{i +- 1/2})."""
    n, h = dom.n_interior[0], dom.h[0]
    x0 = dom.extents[0][0]
    M = np.zeros((n, n))
    for i in range(n):
        xl = x0 + (i + 0.5) * h
        xr = x0 + (i + 1.5) * h
        M[i, i] = (a(xl) + a(xr)) / h**2
        if i > 0:
            M[i, i - 1] = -a(xl) / h**2
        if i < n - 1:
            M[i, i + 1] = -a(xr) / h**2
    return M


def test_stencil_1d_and_2d():
    d1 = make_grid(1, [0, 1], 3)
    A = assemble_operator(d1).matrix.toarray()
    assert np.allclose(A, [[32, -16, 0], [-16, 32, -16], [0, -16, 32]])
    d2 = make_grid(2, [[0, 1], [0, 2]], [4, 5])
    assert np.allclose(assemble_operator(d2).matrix.toarray(), dense_laplacian(d2))


def test_variable_coefficient_matches_loop_assembly():
    dom = make_grid(1, [0, 1], 9)
    a = lambda x: 1 + x**2
    op = assemble_operator(dom, Coefficients(diagonal=(a,), name="var"))
    assert np.allclose(op.matrix.toarray(), dense_variable_1d(dom, a))
    assert np.allclose(op.matrix.toarray(), op.matrix.toarray().T)


def test_anisotropic_constant():
    dom = make_grid(2, [0, 1], 4)
    op = assemble_operator(dom, Coefficients.diagonal_constant([2.0, 0.5]))
    h = dom.h[0]
    n = 4
    T = (2 * np.eye(n) - np.eye(n, k=1) - np.eye(n, k=-1)) / h**2
    ref = 2.0 * np.kron(T, np.eye(n)) + 0.5 * np.kron(np.eye(n), T)
    assert np.allclose(op.matrix.toarray(), ref)


def test_rejects_nonelliptic():
    dom = make_grid(1, [0, 1], 9)
    with pytest.raises(ValueError, match="ellipticity"):
        assemble_operator(dom, Coefficients(diagonal=(lambda x: x - 0.5,)))
    with pytest.raises(ValueError):
        assemble_operator(dom, Coefficients.laplace(2))


def test_nonlinearity_catalog():
    with pytest.raises(ValueError, match="catalog"):
        Nonlinearity("exp")
    with pytest.raises(ValueError):
        Nonlinearity("scaled_cubic", -1.0)
    y = np.linspace(-2, 2, 9)
    for f in (Nonlinearity("cubic"), Nonlinearity("scaled_cubic", 0.3), Nonlinearity("sinh", 2.0)):
        t = 1e-6
        assert np.allclose((f.f(y + t) - f.f(y - t)) / (2 * t), f.dy(y), rtol=1e-7, atol=1e-8)
        assert np.allclose((f.dy(y + t) - f.dy(y - t)) / (2 * t), f.dyy(y), rtol=1e-7, atol=1e-8)
        assert np.all(f.dy(y) >= 0)
    assert Nonlinearity("zero").is_linear


@pytest.mark.parametrize("dim", [1, 2])
def test_linear_solve_matches_dense(dim):
    dom = make_grid(dim, [0, 1], 7 if dim == 2 else 15)
    op = assemble_operator(dom)
    rng = np.random.default_rng(0)
    v = rng.standard_normal(dom.size)
    shift = rng.uniform(0, 5, dom.size)
    dense = dense_laplacian(dom) + np.diag(shift)
    for method in ("direct", "cg"):
        z = solve_linear(op, shift, v, method)
        assert np.allclose(z, np.linalg.solve(dense, v), rtol=1e-10, atol=1e-12)
    # f = 0 linearized solve is the plain operator solve
    z0 = solve_linearized(op, dom.zeros(), Nonlinearity("zero"), v)
    assert np.allclose(z0, np.linalg.solve(dense_laplacian(dom), v))


def test_pcg_zero_rhs_and_stall():
    dom = make_grid(1, [0, 1], 20)
    op = assemble_operator(dom)
    x, it = pcg(op.matrix, np.zeros(dom.size))
    assert it == 0 and not np.any(x)
    with pytest.raises(SolverError):
        pcg(op.matrix, np.ones(dom.size), rtol=1e-14, max_iter=2)


@pytest.mark.parametrize("dim", [1, 2])
def test_manufactured_cubic(dim):
    errs = []
    for n in (15, 31):
        dom = make_grid(dim, [0, 1], n)
        exact = np.prod([np.sin(np.pi * x) for x in dom.coords], axis=0)
        rhs = dim * np.pi**2 * exact + exact**3
        rep = solve_state(assemble_operator(dom), Nonlinearity("cubic"), rhs)
        assert rep.converged and rep.residual <= rep.tolerance
        errs.append(np.max(np.abs(rep.y - exact)))
    assert 3.5 < errs[0] / errs[1] < 4.5


def test_newton_independent_of_initial_guess():
    dom = make_grid(1, [0, 1], 63)
    op = assemble_operator(dom)
    f = Nonlinearity("sinh", 1.0)
    rhs = 50 * np.sin(3 * np.pi * dom.coords[0])
    a = solve_state(op, f, rhs).y
    b = solve_state(op, f, rhs, y0=np.full(dom.size, 5.0)).y
    assert np.max(np.abs(a - b)) < 1e-10
    assert dom.norm(state_residual(op, f, a, rhs)) < 1e-9


def test_newton_cap_reports_failure():
    dom = make_grid(1, [0, 1], 31)
    op = assemble_operator(dom)
    rhs = 1e3 * np.ones(dom.size)
    with pytest.raises(SolverError) as exc:
        solve_state(op, Nonlinearity("cubic"), rhs, max_iter=1)
    assert exc.value.report is not None and not exc.value.report.converged
    rep = solve_state(op, Nonlinearity("cubic"), rhs, max_iter=1, check=False)
    assert not rep.converged


def test_linearized_and_second_derivative_by_fd():
    dom = make_grid(1, [0, 1], 31)
    op = assemble_operator(dom)
    f = Nonlinearity("cubic")
    x = dom.coords[0]
    u = 20 * np.sin(np.pi * x)
    v1, v2 = np.cos(3 * x), x**2
    y = solve_state(op, f, u).y
    z1 = solve_linearized(op, y, f, v1)
    z2 = solve_linearized(op, y, f, v2)
    t = 1e-5
    fd = (solve_state(op, f, u + t * v1).y - solve_state(op, f, u - t * v1).y) / (2 * t)
    assert np.max(np.abs(fd - z1)) < 1e-7 * (1 + np.max(np.abs(z1)))
    w = solve_second_derivative(op, y, f, z1, z2)
    s = 1e-4
    ypp = solve_state(op, f, u + s * v1 + s * v2).y
    ypm = solve_state(op, f, u + s * v1 - s * v2).y
    ymp = solve_state(op, f, u - s * v1 + s * v2).y
    ymm = solve_state(op, f, u - s * v1 - s * v2).y
    fd2 = (ypp - ypm - ymp + ymm) / (4 * s * s)
    assert np.max(np.abs(fd2 - w)) < 1e-5 * (1 + np.max(np.abs(w)))
    assert not np.any(solve_second_derivative(op, y, Nonlinearity("zero"), z1, z2))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), dim=st.sampled_from([1, 2]))
def test_adjoint_identity(seed, dim):
    """<L_y(y) + e_J, z_v> = <phi, v> for every v."""
    dom = make_grid(dim, [0, 1], 9 if dim == 2 else 25)
    op = assemble_operator(dom)
    rng = np.random.default_rng(seed)
    f = Nonlinearity("cubic")
    y = solve_state(op, f, 5 * rng.standard_normal(dom.size)).y
    L = Tracking(rng.standard_normal(dom.size))
    e_J = rng.standard_normal(dom.size)
    phi = solve_adjoint(op, y, f, L, e_J)
    v = rng.standard_normal(dom.size)
    z = solve_linearized(op, y, f, v)
    lhs = dom.inner(L.dy(y) + e_J, z)
    rhs = dom.inner(phi, v)
    assert abs(lhs - rhs) <= 1e-10 * (abs(lhs) + dom.norm(phi) * dom.norm(v))


def test_linearized_is_linear():
    dom = make_grid(1, [0, 1], 17)
    op = assemble_operator(dom)
    f = Nonlinearity("cubic")
    y = solve_state(op, f, np.ones(dom.size) * 10).y
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((2, dom.size))
    za, zb = solve_linearized(op, y, f, a), solve_linearized(op, y, f, b)
    assert np.allclose(solve_linearized(op, y, f, 2 * a - b), 2 * za - zb, atol=1e-12)


def test_tolerance_floor_on_fine_grid():
    # 1/h^2 stencil entries make an absolute 1e-11 residual unreachable here
    dom = make_grid(1, [0, 1], 200_000)
    op = assemble_operator(dom)
    rep = solve_state(op, Nonlinearity("zero"), 1e3 * np.ones(dom.size))
    assert rep.converged
    assert rep.tolerance > 1e-11
