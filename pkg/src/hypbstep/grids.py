"""Uniform 1-D grids on [0,1], trapezoid quadrature, and linear interpolation.

Every solver in the package shares one uniform grid; all integral operators
(full, partial, and the moving-limit Volterra integrals) are realized as
trapezoid sums on it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid x_i = i*h on [0,1] with n nodes, h = 1/(n-1)."""

    n: int

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ValueError(f"grid needs at least 2 nodes, got n={self.n}")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n)


@dataclass(frozen=True)
class Field:
    """Real samples of a function on the nodes of a Grid1D."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", vals)
        if vals.shape != (self.grid.n,):
            raise ValueError(
                f"field has {vals.shape} values for a grid of {self.grid.n} nodes"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("field contains non-finite values")

    @classmethod
    def from_function(cls, grid: Grid1D, fn) -> "Field":
        return cls(grid, np.asarray(fn(grid.nodes), dtype=float) * np.ones(grid.n))


def trap_weights(n: int, h: float) -> np.ndarray:
    """Composite trapezoid weights over the full interval [0,1]."""
    w = np.full(n, h)
    w[0] = w[-1] = 0.5 * h
    return w


def trapezoid(f: Field) -> float:
    """Composite trapezoid approximation of the integral of f over [0,1]."""
    w = trap_weights(f.grid.n, f.grid.h)
    return float(w @ f.values)


def trapezoid_partial(f: Field, a: int, b: int) -> float:
    """Trapezoid value of the integral of f over [x_a, x_b]; zero when a == b."""
    n = f.grid.n
    if not (0 <= a <= b <= n - 1):
        raise ValueError(f"need 0 <= a <= b <= {n - 1}, got a={a}, b={b}")
    if a == b:
        return 0.0
    seg = f.values[a : b + 1]
    return float(np.trapezoid(seg, dx=f.grid.h))


def interp_linear(f: Field, x: float) -> float:
    """Piecewise-linear interpolant of f at x in [0,1]; exact at the nodes."""
    if not (0.0 <= x <= 1.0):
        raise ValueError(f"interpolation point {x} outside [0,1]")
    return float(np.interp(x, f.grid.nodes, f.values))


def interp_linear_array(nodes: np.ndarray, values: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Vectorized linear interpolation, clamping to the end values outside the grid."""
    return np.interp(x, nodes, values)


# ---------------------------------------------------------------------------
# Quadrature weight matrices shared by the kernel solvers and transforms.
# Row/column conventions: index i is the x-node, j the y-node.
# ---------------------------------------------------------------------------


def lower_weight_matrix(n: int, h: float) -> np.ndarray:
    """W[i, j] = trapezoid weight of node j in the integral over [0, x_i].

    Row i realizes the Volterra operator f -> int_0^{x_i} f(y) dy; row 0 is zero.
    """
    W = np.tril(np.full((n, n), h))
    idx = np.arange(n)
    W[idx, idx] = 0.5 * h
    W[1:, 0] = 0.5 * h
    W[0, 0] = 0.0
    return W


def upper_weight_matrix(n: int, h: float) -> np.ndarray:
    """W[t, j] = trapezoid weight of node t in the integral over [y_j, 1].

    Nonzero for t >= j: column j realizes f -> int_{y_j}^1 f(t) dt; column
    n-1 is zero (empty interval).
    """
    W = np.tril(np.full((n, n), h))
    idx = np.arange(n)
    W[idx, idx] = 0.5 * h
    W[-1, :-1] = 0.5 * h
    W[-1, -1] = 0.0
    return W


def convolution_weight_matrix(kernel_1d: np.ndarray, Wlow: np.ndarray) -> np.ndarray:
    """T[i, j] = kernel(x_i - y_j) * (weight of j in the integral over [0, x_i]).

    Realizes v -> int_0^{x} kernel(x - y) v(y) dy as a matrix on the shared grid.
    """
    n = kernel_1d.shape[0]
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    T = np.where(diff >= 0, kernel_1d[np.clip(diff, 0, n - 1)], 0.0)
    return T * Wlow


def convolve_lower(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    """c(s_m) = int_0^{s_m} a(s_m - s) b(s) ds by trapezoid, c(0) = 0."""
    n = a.shape[0]
    full = np.convolve(a, b)[:n] * h
    full -= 0.5 * h * (a * b[0] + a[0] * b)
    full[0] = 0.0
    return full
