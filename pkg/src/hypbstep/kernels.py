"""Backstepping kernel solvers and the delay-gridded kernel cache.

Direct kernels (k, gamma, q) map the plant to the target system; inverse
kernels (l, eta, p) map back.  k and l live on the lower triangle
T1 = {0 <= y <= x <= 1}; gamma and eta on the unit square; q(s) = gamma(s, 1)
and p(s) = eta(s, 1) are their one-dimensional edge traces.

The k and l systems as commonly printed carry inconsistent integrand indices;
the solvers here default to the forms required for the transform algebra to
close (see ``printed_forms`` to reproduce the other variant):

    k_x + k_y =  int_y^x k(x,t) f(t,y) dt - f(x,y),   k(x,0) = int_0^x k g dy - g(x)
    l_x + l_y = -int_y^x f(x,t) l(t,y) dt - f(x,y),   l(x,0) = -g(x)

gamma solves a transport equation in x with speed dy/dx = D, a nonlocal
boundary condition at y = 0, and initial slice gamma(0,y) = k(1,y); eta is
pure transport of l(1,y) and has a closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grids import (
    Grid1D,
    lower_weight_matrix,
    trap_weights,
    upper_weight_matrix,
)


class KernelSolveError(RuntimeError):
    """Successive approximation failed to converge within max_iter sweeps."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last sup-norm change {residual:.3e})")
        self.residual = residual


class DegenerateBoundaryError(ValueError):
    """Nonlocal y=0 closure is singular: |1 - w0*g(0)| below threshold."""


@dataclass(frozen=True)
class TriKernel:
    """Kernel samples on the lower triangle, zero above the diagonal."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        n = self.grid.n
        if self.values.shape != (n, n):
            raise ValueError("triangle kernel table must be n-by-n")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("kernel table contains non-finite values")


@dataclass(frozen=True)
class SquareKernel:
    """Kernel samples on the full unit square."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        n = self.grid.n
        if self.values.shape != (n, n):
            raise ValueError("square kernel table must be n-by-n")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("kernel table contains non-finite values")


@dataclass(frozen=True)
class EdgeKernel:
    """Samples of a one-argument kernel s -> q(s) or s -> p(s), s in [0,1]."""

    grid: Grid1D
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.values.shape != (self.grid.n,):
            raise ValueError("edge kernel table must have one value per node")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("kernel table contains non-finite values")


@dataclass(frozen=True)
class DelayBounds:
    """Known a-priori delay interval [d_low, d_high], both positive."""

    d_low: float
    d_high: float

    def __post_init__(self) -> None:
        if not (0.0 < self.d_low <= self.d_high):
            raise ValueError(
                f"need 0 < d_low <= d_high, got [{self.d_low}, {self.d_high}]"
            )


def sample_coefficients(g, f, grid: Grid1D) -> tuple[np.ndarray, np.ndarray]:
    """Sample g(x) on the nodes and f(x,y) on the node-by-node mesh."""
    x = grid.nodes
    gs = np.asarray(g(x), dtype=float) * np.ones(grid.n)
    fs = np.asarray(f(x[:, None], x[None, :]), dtype=float) * np.ones((grid.n, grid.n))
    return gs, fs


def _march_diagonals(rhs: np.ndarray, boundary: np.ndarray, h: float) -> np.ndarray:
    """Integrate d/ds K(x0+s, s) = rhs along every characteristic x - y = const.

    boundary[c] supplies K at the entry node (x_c, 0); the running integral is
    the trapezoid cumulative sum of rhs along the diagonal.
    """
    n = rhs.shape[0]
    out = np.zeros_like(rhs)
    for c in range(n):
        d = np.diagonal(rhs, offset=-c)
        vals = np.empty(n - c)
        vals[0] = boundary[c]
        if n - c > 1:
            vals[1:] = boundary[c] + np.cumsum(0.5 * h * (d[:-1] + d[1:]))
        idx = np.arange(n - c)
        out[idx + c, idx] = vals
    return out


def _volterra_rows(kernel_rows: np.ndarray, fs: np.ndarray, h: float) -> np.ndarray:
    """I[i,j] = int_{y_j}^{x_i} kernel(x_i, t) f(t, y_j) dt for j <= i.

    kernel_rows[i, t] supplies the first factor; per row the partial column
    sums realize the moving lower limit.
    """
    n = kernel_rows.shape[0]
    out = np.zeros((n, n))
    for i in range(1, n):
        sub = kernel_rows[i, : i + 1][:, None] * fs[: i + 1, : i + 1]
        cs = np.cumsum(sub, axis=0)
        dcs = np.diagonal(cs)
        dsub = np.diagonal(sub)
        colsum = cs[i, :] - dcs + dsub
        out[i, : i + 1] = h * (colsum - 0.5 * dsub - 0.5 * sub[i, :])
    return out


def _volterra_columns(table: np.ndarray, fs: np.ndarray, h: float) -> np.ndarray:
    """I[i,j] = int_{y_j}^{x_i} table(t, y_j) f(t, y_j) dt for j <= i.

    Integrand depends on the integration variable through the first index of
    both factors, so one cumulative sum covers all rows at once.
    """
    n = table.shape[0]
    C = table * fs
    cs = np.cumsum(C, axis=0)
    dcs = np.diagonal(cs)
    dC = np.diagonal(C)
    colsum = cs - dcs[None, :] + dC[None, :]
    out = h * (colsum - 0.5 * dC[None, :] - 0.5 * C)
    return np.tril(out)


def solve_k(
    g,
    f,
    grid: Grid1D,
    tol: float = 1e-10,
    max_iter: int = 200,
    printed_forms: bool = False,
) -> TriKernel:
    """Solve the direct triangle kernel k by successive approximation.

    Characteristics x - y = const are marched from the y = 0 edge; the
    nonlocal boundary closure k(x,0) = int_0^x k(x,y) g(y) dy - g(x) and the
    Volterra source are both evaluated on the previous iterate, so each sweep
    is an explicit pass and the Volterra structure makes the iteration a
    contraction.
    """
    n, h = grid.n, grid.h
    gs, fs = sample_coefficients(g, f, grid)
    Wlow = lower_weight_matrix(n, h)
    k = np.zeros((n, n))
    f_active = bool(np.any(fs))
    delta = np.inf
    for _ in range(max_iter):
        boundary = (k * Wlow) @ gs - gs
        if f_active:
            if printed_forms:
                integral = _volterra_columns(k, fs, h)
            else:
                integral = _volterra_rows(k, fs, h)
            rhs = integral - fs
        else:
            rhs = -fs
        k_new = _march_diagonals(np.tril(rhs), boundary, h)
        delta = float(np.max(np.abs(k_new - k)))
        k = k_new
        if delta < tol:
            return TriKernel(grid, k)
    raise KernelSolveError("k-kernel iteration did not converge", delta)


def solve_l(
    g,
    f,
    grid: Grid1D,
    tol: float = 1e-10,
    max_iter: int = 200,
    printed_forms: bool = False,
) -> TriKernel:
    """Solve the inverse triangle kernel l.

    The y = 0 boundary l(x,0) = -g(x) is local, so only the Volterra source
    term is iterated.
    """
    n, h = grid.n, grid.h
    gs, fs = sample_coefficients(g, f, grid)
    boundary = -gs
    l = np.zeros((n, n))
    f_active = bool(np.any(fs))
    if not f_active:
        return TriKernel(grid, _march_diagonals(np.tril(-fs), boundary, h))
    delta = np.inf
    for _ in range(max_iter):
        if printed_forms:
            integral = _volterra_columns(l, fs, h)
        else:
            integral = _volterra_rows(fs, l, h)
        rhs = -integral - fs
        l_new = _march_diagonals(np.tril(rhs), boundary, h)
        delta = float(np.max(np.abs(l_new - l)))
        l = l_new
        if delta < tol:
            return TriKernel(grid, l)
    raise KernelSolveError("l-kernel iteration did not converge", delta)


SINGULAR_CLOSURE_TOL = 1e-8


class _ShiftInterp:
    """Interpolation of a nodal slice at the uniformly shifted foot points
    y_j - D*h, whose fractional node offset is the same for every j.

    Uses a 4-point cubic Lagrange stencil where it fits, falling back to
    linear near the edges; exact when the shift is a whole number of nodes.
    """

    def __init__(self, n: int, D: float):
        self.n = n
        self.offset = D  # foot index = j - D
        m = int(np.floor(D))
        t = 1.0 - (D - m)  # position in [base, base+1] with base = j - m - 1
        self.exact = D - m == 0.0
        self.m = m
        if not self.exact:
            self.base = np.arange(n) - m - 1
            self.coeffs = np.array(
                [
                    -t * (t - 1.0) * (t - 2.0) / 6.0,
                    (t * t - 1.0) * (t - 2.0) / 2.0,
                    -t * (t + 1.0) * (t - 2.0) / 2.0,
                    t * (t * t - 1.0) / 6.0,
                ]
            )
            self.cubic_ok = (self.base - 1 >= 0) & (self.base + 2 <= n - 1)

    def __call__(self, row: np.ndarray, nodes: np.ndarray, foot: np.ndarray) -> np.ndarray:
        if self.exact:
            out = np.empty(self.n)
            m = self.m
            out[m:] = row[: self.n - m] if m > 0 else row
            out[:m] = row[0]
            return out
        out = np.interp(foot, nodes, row)
        ok = self.cubic_ok
        b = self.base[ok]
        c = self.coeffs
        out[ok] = c[0] * row[b - 1] + c[1] * row[b] + c[2] * row[b + 1] + c[3] * row[b + 2]
        return out


def solve_gamma(
    initial_slice: np.ndarray,
    gs: np.ndarray,
    fs: np.ndarray,
    D: float,
    grid: Grid1D,
) -> tuple[SquareKernel, EdgeKernel]:
    """March gamma in x with semi-Lagrangian steps along dy/dx = D.

    Second-order step: cubic back-traced interpolation, Heun (predictor-
    corrector) treatment of the source D * int_y^1 f(t,y) gamma(x,t) dt, and
    the nonlocal closure gamma(x,0) = int_0^1 g(y) gamma(x,y) dy solved
    exactly as a one-scalar linear equation per slice.  Nodes whose
    characteristic enters through y = 0 between slices interpolate the
    boundary value in x against a predictor closure.
    """
    if D <= 0.0:
        raise ValueError(f"delay must be positive, got {D}")
    n, h = grid.n, grid.h
    nodes = grid.nodes
    wfull = trap_weights(n, h)
    denom = 1.0 - wfull[0] * gs[0]
    if abs(denom) < SINGULAR_CLOSURE_TOL:
        raise DegenerateBoundaryError(
            f"nonlocal closure denominator {denom:.3e} is below the singularity threshold"
        )
    FU = fs * upper_weight_matrix(n, h)
    shift = D * h
    foot = np.maximum(nodes - shift, 0.0)
    inside = nodes - shift >= -1e-14
    layer = ~inside
    layer[0] = False
    interp = _ShiftInterp(n, D)
    gw = wfull * gs

    def closure(slice_tail: np.ndarray) -> float:
        return float(gw[1:] @ slice_tail) / denom

    gamma = np.zeros((n, n))
    gamma[0] = initial_slice
    for i in range(n - 1):
        row = gamma[i]
        source = D * (row @ FU)
        adv = interp(row, nodes, foot)
        src_foot = np.interp(foot, nodes, source)
        # predictor: Euler step, layer from the old boundary value
        pred = np.empty(n)
        pred[inside] = adv[inside] + h * src_foot[inside]
        pred[layer] = row[0] + (nodes[layer] / D) * source[0]
        pred[0] = closure(pred[1:])
        # corrector: trapezoid source along the characteristic, layer from
        # the x-interpolated boundary value
        source_p = D * (pred @ FU)
        new = np.empty(n)
        new[inside] = adv[inside] + 0.5 * h * (src_foot[inside] + source_p[inside])
        lam = 1.0 - nodes[layer] / shift  # entry position between the slices
        bval = (1.0 - lam) * row[0] + lam * pred[0]
        new[layer] = bval + (nodes[layer] / D) * source[0]
        new[0] = closure(new[1:])
        gamma[i + 1] = new
    return SquareKernel(grid, gamma), EdgeKernel(grid, gamma[:, -1].copy())


def solve_eta(
    initial_slice: np.ndarray, D: float, grid: Grid1D
) -> tuple[SquareKernel, EdgeKernel]:
    """Closed-form transport: eta(x,y) = slice(y - D*x) where y >= D*x, else 0."""
    if D <= 0.0:
        raise ValueError(f"delay must be positive, got {D}")
    nodes = grid.nodes
    arg = nodes[None, :] - D * nodes[:, None]
    vals = np.interp(arg, nodes, initial_slice)
    eta = np.where(arg >= 0.0, vals, 0.0)
    return SquareKernel(grid, eta), EdgeKernel(grid, eta[:, -1].copy())


@dataclass(frozen=True)
class KernelBounds:
    """Sup-norm kernel bounds and the induced norm-equivalence constants."""

    k_bar: float
    l_bar: float
    gamma_bar: float
    q_bar: float
    eta_bar: float
    p_bar: float
    r1: float
    r2: float
    s1: float
    s2: float


class KernelBundle:
    """Kernels evaluated at one delay estimate, ready for transform use.

    gamma, gamma_y, gamma_d are square tables; q, q_d edge tables.  eta and p
    have a closed form in the estimate, so they are computed on first access
    rather than interpolated from the cache.
    """

    def __init__(
        self,
        grid: Grid1D,
        dhat: float,
        gamma: np.ndarray,
        gamma_y: np.ndarray,
        gamma_d: np.ndarray,
        q: np.ndarray,
        q_d: np.ndarray,
        l_end_slice: np.ndarray,
        printed_forms: bool = False,
    ):
        self.grid = grid
        self.dhat = dhat
        self.gamma = gamma
        self.gamma_y = gamma_y
        self.gamma_d = gamma_d
        self.q = q
        self.q_d = q_d
        self.printed_forms = printed_forms
        self._l_end_slice = l_end_slice
        self._eta: np.ndarray | None = None
        self._p: np.ndarray | None = None

    def _transport(self) -> None:
        eta, p = solve_eta(self._l_end_slice, self.dhat, self.grid)
        self._eta = eta.values
        self._p = p.values

    @property
    def eta(self) -> np.ndarray:
        if self._eta is None:
            self._transport()
        return self._eta

    @property
    def p(self) -> np.ndarray:
        if self._p is None:
            self._transport()
        return self._p


class KernelCache:
    """k, l plus gamma/q tables and their derivatives on a grid of delays.

    gamma_y holds d(gamma)/dy by central differences in y; gamma_d and q_d
    hold the delay derivatives by central differences across the delay nodes
    (one-sided at the first and last node).  Immutable after construction.
    """

    def __init__(
        self,
        grid: Grid1D,
        bounds: DelayBounds,
        d_nodes: np.ndarray,
        k: TriKernel,
        l: TriKernel,
        gammas: np.ndarray,
        qs: np.ndarray,
        gs: np.ndarray,
        fs: np.ndarray,
        printed_forms: bool = False,
    ):
        self.grid = grid
        self.bounds = bounds
        self.d_nodes = d_nodes
        self.k = k
        self.l = l
        self.gammas = gammas
        self.qs = qs
        self.gs = gs
        self.fs = fs
        self.printed_forms = printed_forms
        self.gammas_y = np.gradient(gammas, grid.h, axis=2)
        self.gammas_d = np.gradient(gammas, d_nodes, axis=0)
        self.qs_d = np.gradient(qs, d_nodes, axis=0)

    @property
    def n_delays(self) -> int:
        return self.d_nodes.shape[0]


def build_cache(
    g,
    f,
    bounds: DelayBounds,
    n_delays: int,
    grid: Grid1D,
    tol: float = 1e-10,
    max_iter: int = 200,
    printed_forms: bool = False,
) -> KernelCache:
    """Solve k, l once and (gamma, q) at each of n_delays candidate delays."""
    if n_delays < 3:
        raise ValueError(f"delay cache needs at least 3 nodes, got {n_delays}")
    gs, fs = sample_coefficients(g, f, grid)
    k = solve_k(g, f, grid, tol=tol, max_iter=max_iter, printed_forms=printed_forms)
    l = solve_l(g, f, grid, tol=tol, max_iter=max_iter, printed_forms=printed_forms)
    d_nodes = np.linspace(bounds.d_low, bounds.d_high, n_delays)
    n = grid.n
    gammas = np.empty((n_delays, n, n))
    qs = np.empty((n_delays, n))
    k_end = k.values[-1, :].copy()
    for m, d in enumerate(d_nodes):
        try:
            gam, q = solve_gamma(k_end, gs, fs, float(d), grid)
        except KernelSolveError as exc:
            raise KernelSolveError(
                f"delay node {m} (D={d:.6g}) failed", exc.residual
            ) from exc
        except DegenerateBoundaryError as exc:
            raise DegenerateBoundaryError(f"delay node {m} (D={d:.6g}): {exc}") from exc
        gammas[m] = gam.values
        qs[m] = q.values
    return KernelCache(
        grid, bounds, d_nodes, k, l, gammas, qs, gs, fs, printed_forms=printed_forms
    )


def query_cache(cache: KernelCache, dhat: float) -> KernelBundle:
    """Linear interpolation of the cached tables in the delay coordinate."""
    lo, hi = cache.bounds.d_low, cache.bounds.d_high
    if not (lo - 1e-12 <= dhat <= hi + 1e-12):
        raise ValueError(f"delay estimate {dhat} outside cached range [{lo}, {hi}]")
    dhat = min(max(dhat, lo), hi)
    d = cache.d_nodes
    idx = int(np.searchsorted(d, dhat, side="right") - 1)
    idx = min(max(idx, 0), len(d) - 2)
    span = d[idx + 1] - d[idx]
    alpha = (dhat - d[idx]) / span

    def mix(tables: np.ndarray) -> np.ndarray:
        if alpha == 0.0:
            return tables[idx]
        if alpha == 1.0:
            return tables[idx + 1]
        return (1.0 - alpha) * tables[idx] + alpha * tables[idx + 1]

    return KernelBundle(
        cache.grid,
        dhat,
        gamma=mix(cache.gammas),
        gamma_y=mix(cache.gammas_y),
        gamma_d=mix(cache.gammas_d),
        q=mix(cache.qs),
        q_d=mix(cache.qs_d),
        l_end_slice=cache.l.values[-1, :],
        printed_forms=cache.printed_forms,
    )


def kernel_bounds(cache: KernelCache) -> KernelBounds:
    """Sampled sup-norms of all six kernels and the four equivalence constants."""
    k_bar = float(np.max(np.abs(cache.k.values)))
    l_bar = float(np.max(np.abs(cache.l.values)))
    gamma_bar = float(np.max(np.abs(cache.gammas)))
    q_bar = float(np.max(np.abs(cache.qs)))
    eta_bar = 0.0
    p_bar = 0.0
    l_end = cache.l.values[-1, :]
    for d in cache.d_nodes:
        eta, p = solve_eta(l_end, float(d), cache.grid)
        eta_bar = max(eta_bar, float(np.max(np.abs(eta.values))))
        p_bar = max(p_bar, float(np.max(np.abs(p.values))))
    d_high = cache.bounds.d_high
    return KernelBounds(
        k_bar=k_bar,
        l_bar=l_bar,
        gamma_bar=gamma_bar,
        q_bar=q_bar,
        eta_bar=eta_bar,
        p_bar=p_bar,
        r1=2.0 + 2.0 * l_bar**2 + 3.0 * eta_bar**2,
        r2=3.0 + 3.0 * d_high**2 * p_bar**2,
        s1=2.0 + 2.0 * k_bar**2 + 3.0 * gamma_bar**2,
        s2=3.0 + 3.0 * d_high**2 * q_bar**2,
    )
