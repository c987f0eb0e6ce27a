"""Delay-adaptive control law, perturbation functions, and the update law.

The controller is the certainty-equivalence boundary feedback

    U = int_0^1 gamma(1,y,Dh) u(y) dy + Dh int_0^1 q(1-y,Dh) v(y) dy.

The target actuator equation picks up two perturbation fields driven by the
estimation error Dt = D - Dh and the estimate rate:

    D z_t = z_x - Dt P1 - D Dh' P2,
    P1 = z(0) M1 + int_0^1 w M2 dy,
    P2 = int_0^x z M3 dy + int_0^1 w M4 dy,

where P2 is the sensitivity -dz/dDh of the transform at frozen (u, v).  The
chain rule groups M3's leading pair as q + Dh * q_Dh; the ungrouped variant
(q + q_Dh) is available behind ``printed_forms`` for comparison.

The update law is Dh' = theta * Proj(tau) with the standard projection that
freezes adaptation at the known delay bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grids import (
    Field,
    convolution_weight_matrix,
    convolve_lower,
    lower_weight_matrix,
    trap_weights,
    upper_weight_matrix,
)
from .kernels import DelayBounds, KernelBundle, KernelCache, TriKernel, query_cache
from .transforms import weighted_norm_N


@dataclass(frozen=True)
class UpdateLawConfig:
    """Adaptation gain, Lyapunov weight, and the admissible delay interval."""

    theta: float
    b1: float
    bounds: DelayBounds

    def __post_init__(self) -> None:
        if self.theta <= 0.0:
            raise ValueError(f"adaptation gain must be positive, got {self.theta}")
        if self.b1 <= 2.0 * self.bounds.d_high:
            raise ValueError(
                f"b1 must exceed 2*D_bar = {2.0 * self.bounds.d_high}, got {self.b1}"
            )


@dataclass(frozen=True)
class MFields:
    """Perturbation kernel tables at one delay estimate.

    M1 is the gamma(x,1) edge slice; M2 and M4 are square tables acting on w;
    M3 acts on z and is supported on the lower triangle y <= x.
    """

    dhat: float
    M1: np.ndarray = field(repr=False)
    M2: np.ndarray = field(repr=False)
    M3: np.ndarray = field(repr=False)
    M4: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class StabilityConstants:
    """Perturbation bound, admissible-gain bound, and the stability-envelope
    constants of the global estimate Psi(t) <= R (e^{rho Psi(0)} - 1)."""

    l_bar: float
    theta_star: float
    R: float
    rho: float


def control_U(u: Field, v: Field, bundle: KernelBundle, dhat: float) -> float:
    """Boundary control value for the current state and delay estimate."""
    grid = bundle.grid
    w = trap_weights(grid.n, grid.h)
    return float(
        (bundle.gamma[-1, :] * w) @ u.values
        + dhat * ((bundle.q[::-1] * w) @ v.values)
    )


def _m3_edge(bundle: KernelBundle, h: float) -> np.ndarray:
    """M3 depends only on s = x - y; return that edge function."""
    dhat = bundle.dhat
    if bundle.printed_forms:
        lead = bundle.q + bundle.q_d
    else:
        lead = bundle.q + dhat * bundle.q_d
    c_qp = convolve_lower(bundle.q, bundle.p, h)
    c_qdp = convolve_lower(bundle.q_d, bundle.p, h)
    return lead + dhat * c_qp + dhat**2 * c_qdp


def eval_M(bundle: KernelBundle, l: TriKernel, fs: np.ndarray) -> MFields:
    """Assemble the full perturbation kernel tables at the bundle's estimate."""
    grid = bundle.grid
    n, h = grid.n, grid.h
    UP = upper_weight_matrix(n, h)
    Wf = fs * UP
    Wl = l.values * UP
    gamma, gamma_y, gamma_d = bundle.gamma, bundle.gamma_y, bundle.gamma_d

    M1 = gamma[:, -1].copy()
    A = gamma @ Wf  # A(x,s) = int_s^1 gamma(x,t) f(t,s) dt
    M2 = np.outer(M1, l.values[-1, :]) - gamma_y + A - gamma_y @ Wl + A @ Wl

    m3 = _m3_edge(bundle, h)
    idx = np.arange(n)
    diff = idx[:, None] - idx[None, :]
    M3 = np.where(diff >= 0, m3[np.clip(diff, 0, n - 1)], 0.0)

    Wlow = lower_weight_matrix(n, h)
    if bundle.printed_forms:
        lead = bundle.q + bundle.q_d
    else:
        lead = bundle.q + bundle.dhat * bundle.q_d
    TQ = convolution_weight_matrix(lead, Wlow)
    M4 = gamma_d + gamma_d @ Wl + TQ @ bundle.eta
    return MFields(bundle.dhat, M1, M2, M3, M4)


def eval_P(w: Field, z: Field, M: MFields) -> tuple[Field, Field]:
    """Assemble the perturbation fields P1, P2 from the kernel tables."""
    grid = w.grid
    n, h = grid.n, grid.h
    wfull = trap_weights(n, h)
    Wlow = lower_weight_matrix(n, h)
    wv, zv = w.values, z.values
    P1 = zv[0] * M.M1 + M.M2 @ (wfull * wv)
    # M3 lives on the triangle; integrate z over [0, x] with moving-limit weights
    P2 = (M.M3 * Wlow) @ zv + M.M4 @ (wfull * wv)
    return Field(grid, P1), Field(grid, P2)


def eval_P_fields(
    w: Field, z: Field, bundle: KernelBundle, l: TriKernel, fs: np.ndarray
) -> tuple[Field, Field]:
    """P1, P2 without materializing the M tables (matrix-vector path).

    Algebraically identical to eval_P(eval_M(...)to machine precision; used
    inside the simulation loop where the full tables would dominate runtime.
    """
    grid = bundle.grid
    n, h = grid.n, grid.h
    UP = upper_weight_matrix(n, h)
    wfull = trap_weights(n, h)
    wv, zv = w.values, z.values
    wt = wfull * wv
    gamma, gamma_y = bundle.gamma, bundle.gamma_y

    Wf_wt = (fs * UP) @ wt
    Wl_wt = (l.values * UP) @ wt
    Wf_Wl_wt = (fs * UP) @ ((l.values * UP) @ wt)
    M1 = gamma[:, -1]
    P1 = (
        zv[0] * M1
        + M1 * float(l.values[-1, :] @ wt)
        - gamma_y @ wt
        + gamma @ Wf_wt
        - gamma_y @ Wl_wt
        + gamma @ Wf_Wl_wt
    )

    m3 = _m3_edge(bundle, h)
    Wlow = lower_weight_matrix(n, h)
    Tm3 = convolution_weight_matrix(m3, Wlow)
    gamma_d = bundle.gamma_d
    if bundle.printed_forms:
        lead = bundle.q + bundle.q_d
    else:
        lead = bundle.q + bundle.dhat * bundle.q_d
    TQ = convolution_weight_matrix(lead, Wlow)
    P2 = Tm3 @ zv + gamma_d @ wt + gamma_d @ Wl_wt + TQ @ (bundle.eta @ wt)
    return Field(grid, P1), Field(grid, P2)


def tau(w: Field, z: Field, P1: Field, b1: float) -> float:
    """Update signal tau = -b1 int (1+x) z P1 dx / N; zero at the equilibrium."""
    if b1 <= 0.0:
        raise ValueError(f"b1 must be positive, got {b1}")
    N = weighted_norm_N(w, z, b1)
    if N <= 0.0:
        return 0.0
    grid = w.grid
    wts = trap_weights(grid.n, grid.h) * (1.0 + grid.nodes)
    num = -b1 * float(wts @ (z.values * P1.values))
    return num / N


def project(dhat: float, tau_val: float, bounds: DelayBounds) -> float:
    """Standard projection: freeze adaptation when it would leave [D_low, D_high]."""
    if not (bounds.d_low <= dhat <= bounds.d_high):
        raise ValueError(
            f"estimate {dhat} outside [{bounds.d_low}, {bounds.d_high}]"
        )
    if dhat == bounds.d_low and tau_val < 0.0:
        return 0.0
    if dhat == bounds.d_high and tau_val > 0.0:
        return 0.0
    return tau_val


def update_dhat(
    dhat: float, tau_val: float, config: UpdateLawConfig, dt: float
) -> float:
    """Forward-Euler step of Dh' = theta * Proj(tau), clamped to the bounds.

    The clamp guards the discrete overshoot past a boundary within one step.
    """
    if dt <= 0.0:
        raise ValueError(f"time step must be positive, got {dt}")
    step = dhat + dt * config.theta * project(dhat, tau_val, config.bounds)
    return min(max(step, config.bounds.d_low), config.bounds.d_high)


def theta_star(b1: float, bounds: DelayBounds, l_bar: float) -> float:
    """Admissible-gain bound min{D_low, b1-2*D_high} min{1,b1} / (2 b1^2 L^2)."""
    if b1 <= 2.0 * bounds.d_high:
        raise ValueError(
            f"b1 must exceed 2*D_bar = {2.0 * bounds.d_high} for a positive gain bound"
        )
    if l_bar <= 0.0:
        raise ValueError(f"perturbation bound must be positive, got {l_bar}")
    return (
        min(bounds.d_low, b1 - 2.0 * bounds.d_high)
        * min(1.0, b1)
        / (2.0 * b1**2 * l_bar**2)
    )


def estimate_lbar(M: MFields) -> float:
    """L_bar = max{sup|M1| + sup|M2|, 2 sup|M3| + sup|M4|} over the tables."""
    m1 = float(np.max(np.abs(M.M1)))
    m2 = float(np.max(np.abs(M.M2)))
    m3 = float(np.max(np.abs(M.M3)))
    m4 = float(np.max(np.abs(M.M4)))
    return max(m1 + m2, 2.0 * m3 + m4)


def lbar_over_cache(cache: KernelCache) -> float:
    """L_bar maximized over every cached delay node."""
    worst = 0.0
    for d in cache.d_nodes:
        bundle = query_cache(cache, float(d))
        worst = max(worst, estimate_lbar(eval_M(bundle, cache.l, cache.fs)))
    return worst
