"""Named catalog of grid functions used by configs and tests.

Each entry builds a callable of the coordinates; ``FieldSpec`` products and
sums let configs describe shapes such as a cubic crossing as
``linear(0, 1, -0.5) * linear(0, 1, -0.5) * linear(0, 1, -0.5)``.
"""

from __future__ import annotations

import numpy as np

from .grid import GridDomain


def _unit(domain: GridDomain, axis: int, x):
    a, b = domain.extents[axis]
    return (x - a) / (b - a)


def constant(domain, c):
    return domain.full(c)


def linear(domain, axis, slope, offset):
    return domain.sample(lambda *x: slope * x[int(axis)] + offset)


def sinpi(domain, amplitude, modes=1):
    modes = np.broadcast_to(np.atleast_1d(modes), (domain.dim,))
    out = np.full(domain.size, float(amplitude))
    for axis, m in enumerate(modes):
        out *= np.sin(m * np.pi * _unit(domain, axis, domain.coords[axis]))
    return out


def bump(domain, center, width, height):
    center = np.broadcast_to(np.atleast_1d(np.asarray(center, dtype=float)), (domain.dim,))
    r2 = sum((x - c) ** 2 for x, c in zip(domain.coords, center))
    return height * np.exp(-r2 / width**2)


def indicator(domain, box, value=1.0):
    box = np.asarray(box, dtype=float).reshape(-1, 2)
    if box.shape[0] != domain.dim:
        raise ValueError("indicator box needs one [lo, hi] pair per axis")
    mask = np.ones(domain.size, dtype=bool)
    for x, (lo, hi) in zip(domain.coords, box):
        mask &= (x >= lo) & (x <= hi)
    return np.where(mask, float(value), 0.0)


CATALOG = {
    "constant": constant,
    "linear": linear,
    "sinpi": sinpi,
    "bump": bump,
    "indicator": indicator,
}


class FieldSpec:
    """Sum of products of catalog calls, evaluated lazily on a grid."""

    def __init__(self, terms):
        # terms: list of products; each product is a list of (name, args)
        for product in terms:
            for name, _ in product:
                if name not in CATALOG:
                    raise ValueError(f"unknown field {name!r}; catalog: {', '.join(CATALOG)}")
        self.terms = terms

    @classmethod
    def call(cls, name, *args) -> "FieldSpec":
        return cls([[(name, tuple(args))]])

    @classmethod
    def const(cls, c) -> "FieldSpec":
        return cls.call("constant", float(c))

    def __mul__(self, other):
        return FieldSpec([a + b for a in self.terms for b in other.terms])

    def __add__(self, other):
        return FieldSpec(self.terms + other.terms)

    def __call__(self, domain: GridDomain) -> np.ndarray:
        out = domain.zeros()
        for product in self.terms:
            v = np.ones(domain.size)
            for name, args in product:
                v = v * CATALOG[name](domain, *args)
            out += v
        return out

    def __repr__(self):
        def fmt(name, args):
            return f"{name}({', '.join(repr(a) for a in args)})"

        return " + ".join(" * ".join(fmt(*f) for f in prod) for prod in self.terms)
