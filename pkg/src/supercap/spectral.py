"""Collocation grids and differentiation matrices.

Two discretisations share one interface: Chebyshev collocation on the
Gauss-Lobatto points ``cos(k*pi/N)`` and second-order central finite
differences on a uniform grid.  Reference operators live on ``[-1, 1]``
with nodes in descending order; :func:`map_to_physical` moves them onto a
physical interval and reverses the ordering so that index 0 is the left end.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BarycentricInterpolator


class Scheme(str, enum.Enum):
    CHEBYSHEV = "sem"
    FINITE_DIFFERENCE = "fdm"

    @classmethod
    def parse(cls, value: "Scheme | str") -> "Scheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown scheme {value!r}; expected 'sem' or 'fdm'") from None


@dataclass(frozen=True, eq=False)
class ReferenceGrid:
    """Nodes of a grid on the reference interval ``[-1, 1]`` (descending)."""

    order: int
    nodes: np.ndarray
    scheme: Scheme

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if self.order < 1:
            raise ValueError("grid order must be at least 1")
        if nodes.shape != (self.order + 1,):
            raise ValueError(f"expected {self.order + 1} nodes, got {nodes.shape}")
        if np.any(np.diff(nodes) >= 0):
            raise ValueError("reference nodes must be strictly descending")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)


@dataclass(frozen=True, eq=False)
class DiffOps:
    """First and second derivative matrices on a set of nodes.

    ``offset`` is the left end of the interval and ``domain_length`` its
    width; ``nodes`` are the coordinates the matrices act on.
    """

    d1: np.ndarray
    d2: np.ndarray
    domain_length: float
    offset: float
    nodes: np.ndarray
    scheme: Scheme

    def __post_init__(self):
        for name in ("d1", "d2", "nodes"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def order(self) -> int:
        return len(self.nodes) - 1


def chebyshev_nodes(order: int) -> ReferenceGrid:
    """Chebyshev-Gauss-Lobatto points ``cos((k-1)*pi/N)``, k = 1..N+1."""
    if order < 2:
        raise ValueError(f"order must be >= 2 to represent a second derivative, got {order}")
    k = np.arange(order + 1)
    return ReferenceGrid(order, np.cos(np.pi * k / order), Scheme.CHEBYSHEV)


def uniform_nodes(order: int) -> ReferenceGrid:
    """Uniform grid with spacing ``2/N`` on ``[-1, 1]``, descending."""
    if order < 2:
        raise ValueError(f"order must be >= 2 to represent a second derivative, got {order}")
    return ReferenceGrid(order, np.linspace(1.0, -1.0, order + 1), Scheme.FINITE_DIFFERENCE)


def reference_grid(scheme: Scheme | str, order: int) -> ReferenceGrid:
    scheme = Scheme.parse(scheme)
    if scheme is Scheme.CHEBYSHEV:
        return chebyshev_nodes(order)
    return uniform_nodes(order)


def chebyshev_diff_matrix(grid: ReferenceGrid) -> DiffOps:
    """Collocation differentiation matrix for the degree-N interpolant.

    Off-diagonal entries use the closed form ``c_i/c_j (-1)^(i+j)/(x_i-x_j)``;
    each diagonal entry is minus the sum of its row, which keeps the
    derivative of a constant at rounding level.
    """
    if grid.scheme is not Scheme.CHEBYSHEV:
        raise ValueError("chebyshev_diff_matrix needs a Chebyshev grid")
    x = grid.nodes
    n = grid.order
    c = np.ones(n + 1)
    c[0] = c[-1] = 2.0
    c *= (-1.0) ** np.arange(n + 1)
    dx = x[:, None] - x[None, :]
    d1 = np.outer(c, 1.0 / c) / (dx + np.eye(n + 1))
    np.fill_diagonal(d1, 0.0)
    d1[np.diag_indices(n + 1)] = -d1.sum(axis=1)
    return DiffOps(d1, d1 @ d1, 2.0, -1.0, x, Scheme.CHEBYSHEV)


def fdm_diff_matrix(grid: ReferenceGrid) -> DiffOps:
    """Second-order central differences with one-sided second-order ends."""
    if grid.scheme is not Scheme.FINITE_DIFFERENCE:
        raise ValueError("fdm_diff_matrix needs a finite-difference grid")
    n = grid.order
    if n < 2:
        raise ValueError("finite-difference stencils need at least three nodes")
    s = grid.nodes[1] - grid.nodes[0]  # signed spacing
    d1 = np.zeros((n + 1, n + 1))
    d2 = np.zeros((n + 1, n + 1))
    for j in range(1, n):
        d1[j, j - 1], d1[j, j + 1] = -1.0, 1.0
        d2[j, j - 1 : j + 2] = (1.0, -2.0, 1.0)
    d1[0, :3] = (-3.0, 4.0, -1.0)
    d1[n, n - 2 :] = (1.0, -4.0, 3.0)
    d1 /= 2.0 * s
    if n >= 3:
        d2[0, :4] = (2.0, -5.0, 4.0, -1.0)
        d2[n, n - 3 :] = (-1.0, 4.0, -5.0, 2.0)
    else:
        d2[0, :3] = d2[n, n - 2 :] = (1.0, -2.0, 1.0)
    d2 /= s * s
    return DiffOps(d1, d2, 2.0, -1.0, grid.nodes, Scheme.FINITE_DIFFERENCE)


def diff_ops(grid: ReferenceGrid) -> DiffOps:
    if grid.scheme is Scheme.CHEBYSHEV:
        return chebyshev_diff_matrix(grid)
    return fdm_diff_matrix(grid)


def map_to_physical(ops: DiffOps, left: float, right: float) -> DiffOps:
    """Affinely map ``ops`` onto ``[left, right]`` with ascending node order."""
    if not right > left:
        raise ValueError(f"interval must satisfy right > left, got [{left}, {right}]")
    length = right - left
    scale = ops.domain_length / length
    nodes = left + (ops.nodes - ops.offset) * (length / ops.domain_length)
    d1, d2 = ops.d1 * scale, ops.d2 * scale**2
    if nodes[0] > nodes[-1]:
        nodes = nodes[::-1]
        d1 = d1[::-1, ::-1]
        d2 = d2[::-1, ::-1]
    return DiffOps(d1, d2, length, left, nodes, ops.scheme)


def clenshaw_curtis_weights(order: int) -> np.ndarray:
    """Clenshaw-Curtis weights for the Chebyshev points on ``[-1, 1]``."""
    n = order
    theta = np.pi * np.arange(n + 1) / n
    w = np.zeros(n + 1)
    v = np.ones(n - 1)
    interior = slice(1, n)
    if n % 2 == 0:
        w[0] = w[n] = 1.0 / (n * n - 1)
        for k in range(1, n // 2):
            v -= 2.0 * np.cos(2 * k * theta[interior]) / (4 * k * k - 1)
        v -= np.cos(n * theta[interior]) / (n * n - 1)
    else:
        w[0] = w[n] = 1.0 / (n * n)
        for k in range(1, (n - 1) // 2 + 1):
            v -= 2.0 * np.cos(2 * k * theta[interior]) / (4 * k * k - 1)
    w[interior] = 2.0 * v / n
    return w


def quadrature_weights(ops: DiffOps) -> np.ndarray:
    """Quadrature weights consistent with the scheme of ``ops``.

    Clenshaw-Curtis on Chebyshev nodes, trapezoid on uniform nodes.
    Both rules are symmetric, so node ordering does not matter.
    """
    n = ops.order
    if ops.scheme is Scheme.CHEBYSHEV:
        w = clenshaw_curtis_weights(n)
    else:
        w = np.full(n + 1, 2.0 / n)
        w[0] = w[-1] = 1.0 / n
    return w * (ops.domain_length / 2.0)


@dataclass(frozen=True, eq=False)
class FluxLaplacian:
    """Second-derivative operator with boundary slopes supplied as data.

    ``lap @ u + left * du_left + right * du_right`` approximates ``u''`` on
    ascending nodes when the end slopes are ``du_left`` and ``du_right``.
    The operator satisfies ``w @ lap == 0``, ``w @ left == -1`` and
    ``w @ right == 1`` for the matching quadrature weights ``w``, so integrals
    of the result equal the net boundary flux exactly.
    """

    lap: np.ndarray
    left: np.ndarray
    right: np.ndarray


def flux_laplacian(ops: DiffOps) -> FluxLaplacian:
    if ops.nodes[0] > ops.nodes[-1]:
        raise ValueError("flux_laplacian needs ascending (physical) nodes")
    n = ops.order
    if ops.scheme is Scheme.CHEBYSHEV:
        d1 = np.array(ops.d1)
        inner = d1.copy()
        inner[0] = inner[-1] = 0.0
        return FluxLaplacian(d1 @ inner, d1[:, 0].copy(), d1[:, -1].copy())
    h = ops.domain_length / n
    lap = np.array(ops.d2)
    lap[0] = 0.0
    lap[-1] = 0.0
    lap[0, :2] = (-2.0 / h**2, 2.0 / h**2)
    lap[-1, -2:] = (2.0 / h**2, -2.0 / h**2)
    left = np.zeros(n + 1)
    right = np.zeros(n + 1)
    left[0] = -2.0 / h
    right[-1] = 2.0 / h
    return FluxLaplacian(lap, left, right)


def interpolate(ops: DiffOps, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Evaluate the scheme's own interpolant of ``values`` at ``x``.

    Polynomial (barycentric) for Chebyshev grids, piecewise linear for
    finite-difference grids.  ``values`` may carry extra trailing axes.
    """
    values = np.asarray(values, dtype=float)
    x = np.asarray(x, dtype=float)
    if ops.scheme is Scheme.CHEBYSHEV:
        return BarycentricInterpolator(ops.nodes, values, axis=0)(x)
    if values.ndim == 1:
        return np.interp(x, ops.nodes, values)
    flat = values.reshape(len(ops.nodes), -1)
    out = np.column_stack([np.interp(x, ops.nodes, col) for col in flat.T])
    return out.reshape((len(x),) + values.shape[1:])
