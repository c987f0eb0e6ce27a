"""Plant/transport cascade stepping and the closed-loop simulation drivers.

The plant couples a first-order PIDE for u (leftward transport at speed 1
with recirculation through u(0,t) and a Volterra source) to a transport
equation for the actuator state v (speed 1/D, inflow v(1,t) = U(t)), with
u(1,t) = v(0,t).  Both are advanced by first-order explicit upwind under the
shared CFL constraint dt <= cfl * h * min(1, D).

Two actuator representations are provided: the transport PDE itself
(``simulate``) and a pure dead-time ring buffer of past control values
(``delay_buffer_oracle``); their agreement is a discretization check of the
delay identity v(x,t) = U(t + D(x-1)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adaptive import UpdateLawConfig, lbar_over_cache, project, theta_star, update_dhat
from .grids import Field, Grid1D, convolve_lower, lower_weight_matrix, trap_weights, upper_weight_matrix
from .kernels import KernelCache, query_cache
from .scenario import ScenarioConfig


class DivergenceError(RuntimeError):
    """Plant state left the finite range (closed loop diverged)."""


@dataclass(frozen=True)
class PlantState:
    """Live closed-loop state at one instant."""

    t: float
    u: Field
    v: Field
    dhat: float


@dataclass(frozen=True)
class Snapshot:
    """Full distributed state stored on the snapshot stride."""

    t: float
    u: np.ndarray = field(repr=False)
    v: np.ndarray = field(repr=False)
    dhat: float = 0.0


@dataclass
class Trace:
    """Per-step scalar records plus periodic full snapshots."""

    t: np.ndarray
    norm_u: np.ndarray
    norm_v: np.ndarray
    norm_w: np.ndarray
    norm_z: np.ndarray
    U: np.ndarray
    tau: np.ndarray
    dhat: np.ndarray
    V1: np.ndarray
    N: np.ndarray
    max_u: np.ndarray
    max_v: np.ndarray
    h1_w: np.ndarray
    h1_z: np.ndarray
    dhat_rate: np.ndarray
    snapshots: list[Snapshot]
    meta: dict
    diverged: bool = False


def step_plant(
    state: PlantState,
    U: float,
    d_true: float,
    dt: float,
    gs: np.ndarray,
    fs: np.ndarray,
) -> PlantState:
    """One explicit upwind step of the cascade with control value U.

    gs and fs are the coefficient samples on the state's grid.  Interiors
    advance first, then v(1) takes the control value and u(1) the fresh
    v(0).  Source terms are evaluated at the old time level.
    """
    grid = state.u.grid
    n, h = grid.n, grid.h
    if d_true <= 0.0:
        raise ValueError(f"true delay must be positive, got {d_true}")
    if dt > h * min(1.0, d_true) * (1.0 + 1e-9):
        raise ValueError(
            f"CFL violation: dt = {dt} exceeds h*min(1, D) = {h * min(1.0, d_true)}"
        )
    WfL = fs * lower_weight_matrix(n, h)
    u, v = state.u.values, state.v.values
    un, vn = _advance(u, v, U, d_true, dt, h, gs, WfL)
    if not (np.all(np.isfinite(un)) and np.all(np.isfinite(vn))):
        raise DivergenceError(f"non-finite state at t = {state.t + dt}")
    return PlantState(state.t + dt, Field(grid, un), Field(grid, vn), state.dhat)


def _advance(u, v, U, d_true, dt, h, gs, WfL):
    source = gs * u[0] + WfL @ u
    un = np.empty_like(u)
    vn = np.empty_like(v)
    un[:-1] = u[:-1] + (dt / h) * (u[1:] - u[:-1]) + dt * source[:-1]
    vn[:-1] = v[:-1] + (dt / (d_true * h)) * (v[1:] - v[:-1])
    vn[-1] = U
    un[-1] = vn[0]
    return un, vn


def mild_solution_z(z0: Field, D: float, t: float) -> Field:
    """Exact transport solution z(x,t) = z0(x + t/D) on [0,1], zero past exit."""
    if D <= 0.0:
        raise ValueError(f"delay must be positive, got {D}")
    if t < 0.0:
        raise ValueError(f"time must be nonnegative, got {t}")
    grid = z0.grid
    arg = grid.nodes + t / D
    vals = np.where(arg <= 1.0, np.interp(arg, grid.nodes, z0.values), 0.0)
    return Field(grid, vals)


class _DelayBuffer:
    """Past control values sampled at dt, prefilled from v0 via the delay
    identity U(s) = v0(1 + s/D) for s in [-D, 0]."""

    def __init__(self, v0: np.ndarray, d_true: float, grid: Grid1D, dt: float):
        self.dt = dt
        pre_t = (grid.nodes - 1.0) * d_true  # s in [-D, 0]
        self.times = list(pre_t[:-1])  # s = 0 arrives with the first push
        self.values = list(v0[:-1])

    def push(self, t: float, U: float) -> None:
        self.times.append(t)
        self.values.append(U)

    def eval(self, s) -> np.ndarray:
        return np.interp(s, np.asarray(self.times), np.asarray(self.values))


def simulate(scenario: ScenarioConfig, cache: KernelCache) -> Trace:
    """Run the closed loop with the transport representation of the delay."""
    return _run(scenario, cache, buffer_actuator=False)


def delay_buffer_oracle(scenario: ScenarioConfig, cache: KernelCache) -> Trace:
    """Run the identical loop with the actuator as a pure dead-time buffer."""
    return _run(scenario, cache, buffer_actuator=True)


def _check_compatible(scenario: ScenarioConfig, cache: KernelCache) -> None:
    if cache.grid.n != scenario.n_x:
        raise ValueError(
            f"cache grid ({cache.grid.n} nodes) does not match scenario n_x = {scenario.n_x}"
        )
    if (
        abs(cache.bounds.d_low - scenario.bounds.d_low) > 1e-12
        or abs(cache.bounds.d_high - scenario.bounds.d_high) > 1e-12
    ):
        raise ValueError("cache delay bounds do not match the scenario")
    if cache.printed_forms != scenario.compat_printed_kernels:
        raise ValueError("cache kernel-form flag does not match the scenario")


def _run(scenario: ScenarioConfig, cache: KernelCache, buffer_actuator: bool) -> Trace:
    _check_compatible(scenario, cache)
    grid = cache.grid
    n, h = grid.n, grid.h
    nodes = grid.nodes
    d_true = scenario.d_true
    b1 = scenario.b1
    adaptive = scenario.mode == "adaptive"

    theta_eff = scenario.theta
    meta = {
        "mode": scenario.mode,
        "d_true": d_true,
        "d_hat0": scenario.d_hat0,
        "theta": scenario.theta,
        "b1": b1,
        "n_x": n,
        "actuator": "buffer" if buffer_actuator else "transport",
    }
    if scenario.strict_stability:
        l_bar = lbar_over_cache(cache)
        t_star = theta_star(b1, scenario.bounds, l_bar)
        if theta_eff >= t_star:
            theta_eff = 0.9 * t_star
            meta["theta_clamped"] = True
        meta["l_bar"] = l_bar
        meta["theta_star"] = t_star
    meta["theta_effective"] = theta_eff
    config = UpdateLawConfig(theta_eff, b1, scenario.bounds)

    dt_max = scenario.cfl * h * min(1.0, d_true)
    n_steps = max(1, math.ceil(scenario.t_final / dt_max))
    dt = scenario.t_final / n_steps
    meta["dt"] = dt
    meta["n_steps"] = n_steps

    u = np.asarray(scenario.u0(nodes), dtype=float) * np.ones(n)
    v = np.asarray(scenario.v0(nodes), dtype=float) * np.ones(n)
    dhat = scenario.d_hat0

    # static workspace
    wfull = trap_weights(n, h)
    wts1px = wfull * (1.0 + nodes)
    Wlow = lower_weight_matrix(n, h)
    UP = upper_weight_matrix(n, h)
    KW = cache.k.values * Wlow
    WfL = cache.fs * Wlow
    Wf = cache.fs * UP
    Wl = cache.l.values * UP
    l_end = cache.l.values[-1, :]
    gs = cache.gs

    buf = _DelayBuffer(v.copy(), d_true, grid, dt) if buffer_actuator else None

    cols: dict[str, list[float]] = {
        k: []
        for k in (
            "t",
            "norm_u",
            "norm_v",
            "norm_w",
            "norm_z",
            "U",
            "tau",
            "dhat",
            "V1",
            "N",
            "max_u",
            "max_v",
            "h1_w",
            "h1_z",
            "dhat_rate",
        )
    }
    snapshots: list[Snapshot] = []
    stride = scenario.snapshot_stride
    diverged = False
    bundle = query_cache(cache, dhat)
    q_rev_w = bundle.q[::-1] * wfull
    v_cur = buf.eval(-d_true * (1.0 - nodes)) if buffer_actuator else v
    # boundary control applied at the current time; at t = 0 the actuator
    # still holds the initial datum v0(1), so the formula value is recorded
    U_val = float((bundle.gamma[-1] * wfull) @ u + dhat * (q_rev_w @ v_cur))

    for m in range(n_steps + 1):
        t = m * dt
        w = u - KW @ u
        z = v_cur - bundle.gamma @ (wfull * u) - dhat * convolve_lower(bundle.q, v_cur, h)

        Nv = float(0.5 * wts1px @ (w * w) + 0.5 * b1 * wts1px @ (z * z))
        tau_val = 0.0
        if adaptive and Nv > 0.0:
            wt_w = wfull * w
            M1 = bundle.gamma[:, -1]
            P1 = (
                z[0] * M1
                + M1 * float(l_end @ wt_w)
                - bundle.gamma_y @ wt_w
                + bundle.gamma @ (Wf @ wt_w)
                - bundle.gamma_y @ (Wl @ wt_w)
                + bundle.gamma @ (Wf @ (Wl @ wt_w))
            )
            tau_val = float(-b1 * (wts1px @ (z * P1))) / Nv
        dtil = d_true - dhat
        V1 = d_true * math.log1p(Nv) + dtil * dtil / (2.0 * theta_eff)

        cols["t"].append(t)
        cols["norm_u"].append(float(np.sqrt(wfull @ (u * u))))
        cols["norm_v"].append(float(np.sqrt(wfull @ (v_cur * v_cur))))
        cols["norm_w"].append(float(np.sqrt(wfull @ (w * w))))
        cols["norm_z"].append(float(np.sqrt(wfull @ (z * z))))
        cols["U"].append(U_val)
        cols["tau"].append(tau_val)
        cols["dhat"].append(dhat)
        cols["V1"].append(V1)
        cols["N"].append(Nv)
        cols["max_u"].append(float(np.max(np.abs(u))))
        cols["max_v"].append(float(np.max(np.abs(v_cur))))
        cols["h1_w"].append(float(np.sqrt(np.sum(np.diff(w) ** 2) / h)))
        cols["h1_z"].append(float(np.sqrt(np.sum(np.diff(z) ** 2) / h)))
        cols["dhat_rate"].append(
            theta_eff * project(dhat, tau_val, scenario.bounds) if adaptive else 0.0
        )
        if stride > 0 and (m % stride == 0 or m == n_steps):
            snapshots.append(Snapshot(t, u.copy(), v_cur.copy(), dhat))

        if m == n_steps:
            break

        # estimate update first, then the upwind plant step closed with the
        # control value at the new time: v(1, t+dt) = U(t+dt) with the fresh
        # estimate, solved as one scalar equation since v(1) sits inside its
        # own quadrature (this zeroes z(1) at quadrature level along the run)
        if adaptive:
            dhat = update_dhat(dhat, tau_val, config, dt)
            bundle = query_cache(cache, dhat)
            q_rev_w = bundle.q[::-1] * wfull
        source = gs * u[0] + WfL @ u
        un = np.empty_like(u)
        un[:-1] = u[:-1] + (dt / h) * (u[1:] - u[:-1]) + dt * source[:-1]
        if buffer_actuator:
            buf.push(t, U_val)
            un[-1] = float(buf.eval(t + dt - d_true))
            v_part = buf.eval(t + dt - d_true * (1.0 - nodes[:-1]))
            head = float((bundle.gamma[-1] * wfull) @ un + dhat * (q_rev_w[:-1] @ v_part))
            U_val = head / (1.0 - dhat * q_rev_w[-1])
            v_cur = np.concatenate([v_part, [U_val]])
            u = un
        else:
            vn = np.empty_like(v)
            vn[:-1] = v[:-1] + (dt / (d_true * h)) * (v[1:] - v[:-1])
            un[-1] = vn[0]
            head = float((bundle.gamma[-1] * wfull) @ un + dhat * (q_rev_w[:-1] @ vn[:-1]))
            U_val = head / (1.0 - dhat * q_rev_w[-1])
            vn[-1] = U_val
            u, v = un, vn
            v_cur = v
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v_cur))):
            diverged = True
            break

    return Trace(
        **{k: np.asarray(vs) for k, vs in cols.items()},
        snapshots=snapshots,
        meta=meta,
        diverged=diverged,
    )
