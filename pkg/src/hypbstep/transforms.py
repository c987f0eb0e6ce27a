"""Backstepping transformations between plant (u, v) and target (w, z) states.

Direct transform:

    w(x) = u(x) - int_0^x k(x,y) u(y) dy
    z(x) = v(x) - int_0^1 gamma(x,y,Dh) u(y) dy - Dh int_0^x q(x-y,Dh) v(y) dy

Inverse transform:

    u(x) = w(x) + int_0^x l(x,y) w(y) dy
    v(x) = z(x) + int_0^1 eta(x,y,Dh) w(y) dy + Dh int_0^x p(x-y,Dh) z(y) dy

The v-inverse integrates the target state w, not u: with eta the pure
transport of l(1,y), that is the only form whose composition with the direct
transform is the identity (the transform algebra closes through
eta(0,y) = l(1,y) = the w-kernel of u(1)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import Field, Grid1D, convolution_weight_matrix, lower_weight_matrix, trap_weights
from .kernels import KernelBundle, TriKernel


@dataclass(frozen=True)
class TargetState:
    """Target variables on the shared grid at one instant."""

    w: Field
    z: Field
    t: float = 0.0

    def __post_init__(self) -> None:
        if self.w.grid.n != self.z.grid.n:
            raise ValueError("target fields live on different grids")


def _check_grid(grid: Grid1D, *fields: Field) -> None:
    for f in fields:
        if f.grid.n != grid.n:
            raise ValueError(
                f"field on {f.grid.n}-node grid incompatible with {grid.n}-node kernels"
            )


def forward_transform(
    u: Field, v: Field, bundle: KernelBundle, k: TriKernel, dhat: float, t: float = 0.0
) -> TargetState:
    """Map plant state (u, v) to target state (w, z) at delay estimate dhat."""
    grid = bundle.grid
    _check_grid(grid, u, v)
    n, h = grid.n, grid.h
    Wlow = lower_weight_matrix(n, h)
    wfull = trap_weights(n, h)
    uv, vv = u.values, v.values
    w = uv - (k.values * Wlow) @ uv
    Tq = convolution_weight_matrix(bundle.q, Wlow)
    z = vv - bundle.gamma @ (wfull * uv) - dhat * (Tq @ vv)
    return TargetState(Field(grid, w), Field(grid, z), t)


def inverse_transform(
    w: Field, z: Field, bundle: KernelBundle, l: TriKernel, dhat: float
) -> tuple[Field, Field]:
    """Map target state (w, z) back to plant state (u, v)."""
    grid = bundle.grid
    _check_grid(grid, w, z)
    n, h = grid.n, grid.h
    Wlow = lower_weight_matrix(n, h)
    wfull = trap_weights(n, h)
    wv, zv = w.values, z.values
    u = wv + (l.values * Wlow) @ wv
    Tp = convolution_weight_matrix(bundle.p, Wlow)
    v = zv + bundle.eta @ (wfull * wv) + dhat * (Tp @ zv)
    return Field(grid, u), Field(grid, v)


def weighted_norm_N(w: Field, z: Field, b1: float) -> float:
    """N = 1/2 int (1+x) w^2 + (b1/2) int (1+x) z^2, by trapezoid."""
    if b1 <= 0.0:
        raise ValueError(f"b1 must be positive, got {b1}")
    grid = w.grid
    wts = trap_weights(grid.n, grid.h) * (1.0 + grid.nodes)
    return float(0.5 * wts @ (w.values**2) + 0.5 * b1 * wts @ (z.values**2))
