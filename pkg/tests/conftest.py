import numpy as np
import pytest

from pdemarginal.grid import make_grid
from pdemarginal.objective import make_instance, target_for_adjoint
from pdemarginal.pde import Nonlinearity, assemble_operator

ACCEPTANCE = []


def record_acceptance(number, ok, detail=""):
    ACCEPTANCE.append((number, bool(ok), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def crossing_adjoint(x):
    """4x(1-x)(x-1/2): slope 1 at the crossing, zero on the boundary."""
    return 4 * x * (1 - x) * (x - 0.5)


def bangbang_instance(n, f=None, alpha=-1.0, beta=1.0):
    dom = make_grid(1, [0, 1], n)
    x = dom.coords[0]
    f = f or Nonlinearity("zero")
    phi = crossing_adjoint(x)
    u = np.where(phi > 0, alpha, beta)
    yd = target_for_adjoint(assemble_operator(dom), f, u, phi)
    inst = make_instance(dom, nonlinearity=f, target=yd, alpha=alpha, beta=beta, norm_mode="bangbang")
    return inst, u, phi


def convex_instance(n=129):
    dom = make_grid(1, [0, 1], n)
    x = dom.coords[0]
    return make_instance(dom, target=10 * np.sin(2 * np.pi * x), zeta=1.0, alpha=-0.15, beta=0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
