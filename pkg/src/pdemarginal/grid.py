"""Uniform tensor grids on boxes with homogeneous Dirichlet boundary.

Grid functions are flat float arrays holding one value per interior node,
ordered C-style over the per-axis node indices (axis 0 varies slowest).
Boundary values are implicitly zero and never stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

NORM_KINDS = ("L1", "L2", "Linf", "H1seminorm")


@dataclass(frozen=True)
class GridDomain:
    dim: int
    extents: tuple[tuple[float, float], ...]
    n_interior: tuple[int, ...]
    h: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if len(self.extents) != self.dim or len(self.n_interior) != self.dim:
            raise ValueError("extents and n_interior need one entry per axis")
        for (a, b), n in zip(self.extents, self.n_interior):
            if not b > a:
                raise ValueError(f"extent [{a}, {b}] is empty")
            if n < 3:
                raise ValueError(f"need at least 3 interior nodes per axis, got {n}")
        h = tuple((b - a) / (n + 1) for (a, b), n in zip(self.extents, self.n_interior))
        object.__setattr__(self, "h", h)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.n_interior

    @property
    def size(self) -> int:
        return int(np.prod(self.n_interior))

    @property
    def cell_volume(self) -> float:
        """Quadrature weight of one node, the product of the spacings."""
        return float(np.prod(self.h))

    @property
    def measure(self) -> float:
        """Quadrature measure of the full node set."""
        return self.size * self.cell_volume

    def axis_nodes(self, axis: int) -> np.ndarray:
        (a, _), n, h = self.extents[axis], self.n_interior[axis], self.h[axis]
        return a + h * np.arange(1, n + 1)

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        """Flat coordinate arrays, one per axis, aligned with field layout."""
        mesh = np.meshgrid(*(self.axis_nodes(i) for i in range(self.dim)), indexing="ij")
        return tuple(m.ravel() for m in mesh)

    def zeros(self) -> np.ndarray:
        return np.zeros(self.size)

    def full(self, value: float) -> np.ndarray:
        return np.full(self.size, float(value))

    def sample(self, func) -> np.ndarray:
        """Evaluate ``func(*coords)`` at the interior nodes."""
        values = np.asarray(func(*self.coords), dtype=float)
        return np.broadcast_to(values, (self.size,)).copy()

    def check(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.size,):
            raise ValueError(f"field has shape {v.shape}, grid expects ({self.size},)")
        return v

    def integrate(self, v) -> float:
        return self.cell_volume * float(np.sum(self.check(v)))

    def inner(self, a, b) -> float:
        """Discrete L2 pairing with constant nodal weight."""
        return self.cell_volume * float(np.dot(self.check(a), self.check(b)))

    def norm(self, v, kind: str = "L2") -> float:
        v = self.check(v)
        if kind == "L1":
            return self.cell_volume * float(np.sum(np.abs(v)))
        if kind == "L2":
            return float(np.sqrt(self.cell_volume * np.dot(v, v)))
        if kind == "Linf":
            return float(np.max(np.abs(v))) if v.size else 0.0
        if kind == "H1seminorm":
            return self.h1_seminorm(v)
        raise ValueError(f"unknown norm kind {kind!r}; expected one of {NORM_KINDS}")

    def h1_seminorm(self, v) -> float:
        # forward differences on the zero-padded array, boundary jumps included
        grid = np.pad(self.check(v).reshape(self.shape), 1)
        total = 0.0
        for axis, h in enumerate(self.h):
            d = np.diff(grid, axis=axis)
            # only differences along lines through interior nodes
            sl = [slice(1, -1)] * self.dim
            sl[axis] = slice(None)
            total += float(np.sum(d[tuple(sl)] ** 2)) / h**2
        return float(np.sqrt(self.cell_volume * total))

    def y_norm(self, v) -> float:
        """State-space norm: discrete H1_0 seminorm plus max norm."""
        return self.h1_seminorm(v) + self.norm(v, "Linf")

    def set_measure(self, mask) -> float:
        return int(np.count_nonzero(mask)) * self.cell_volume


def make_grid(dim: int, extents, n_interior) -> GridDomain:
    """Build a grid; scalars in ``extents``/``n_interior`` broadcast over axes.

    >>> make_grid(1, [0, 1], 3).h
    (0.25,)
    """
    extents = np.asarray(extents, dtype=float)
    if extents.ndim == 1:
        if extents.size == 2:
            extents = np.tile(extents, (dim, 1))
        else:
            extents = extents.reshape(-1, 2)
    n = np.atleast_1d(np.asarray(n_interior))
    if n.size == 1:
        n = np.repeat(n, dim)
    if np.any(n != np.round(n)) or np.any(n <= 0):
        raise ValueError(f"interior node counts must be positive integers, got {n_interior}")
    return GridDomain(
        dim=int(dim),
        extents=tuple((float(a), float(b)) for a, b in extents),
        n_interior=tuple(int(k) for k in n),
    )
