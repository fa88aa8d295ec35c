"""Bicharacteristic integration, exit times, scattering relation / lens data,
and the variational flow Jacobian dZ/dz.

The phase space is T*M in a fixed chart; states are Z = (x, xi) with xi a
covector. Unit-speed rays satisfy |xi|^2_{g^{-1}} = 1, i.e. H = 1/2.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import solve_ivp

from .errors import DomainError, TrappedRayError
from .geometry import (
    Chart,
    Hypersurface,
    MetricModel,
    hamiltonian,
    hamiltonian_field,
    hamiltonian_field_and_jacobian,
    hamiltonian_field_jacobian,
)

TRAP_FACTOR = 50.0  # time cap: TRAP_FACTOR * chart diameter / min wave speed


# ---------------------------------------------------------------------------
# Phase points and ray paths
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def as_state(self):
        return np.concatenate([self.x, self.xi])

    @staticmethod
    def from_state(z):
        n = z.size // 2
        return PhasePoint(z[:n].copy(), z[n:].copy())


def unit_phase_point(metric: MetricModel, x, v=None, xi=None):
    """Phase point with g-unit covector, from a direction v or covector xi."""
    x = np.asarray(x, float)
    if (v is None) == (xi is None):
        raise ValueError("give exactly one of v, xi")
    if v is not None:
        xi = metric.eval(x) @ np.asarray(v, float)
    else:
        xi = np.asarray(xi, float)
    nrm = metric.conorm(x, xi)
    xi = xi / nrm
    err = abs(metric.conorm(x, xi) - 1.0)
    if err > 1e-9:
        raise ValueError(f"unit covector normalization failed: |xi|-1 = {err:.2e}")
    return PhasePoint(x, xi)


@dataclass
class RayPath:
    """One integrated bicharacteristic with dense output."""

    metric: MetricModel
    ts: np.ndarray
    states: np.ndarray           # (len(ts), 2n)
    dense: object                # scipy OdeSolution
    exit_flag: str               # 'boundary' | 'target' | 'trapped' | 'left_chart' | 'time'
    length: float
    energy_drift: float

    @property
    def n(self):
        return self.metric.dim

    def state(self, t):
        return np.moveaxis(self.dense(t), 0, -1)

    def position(self, t):
        return self.state(t)[..., : self.n]

    def covector(self, t):
        return self.state(t)[..., self.n:]

    def tangent(self, t):
        """Tangent vector g^{-1} xi along the ray."""
        z = self.state(t)
        x, xi = z[..., : self.n], z[..., self.n:]
        return np.einsum("...ij,...j->...i", self.metric.inverse(x), xi)

    @property
    def entry(self):
        return PhasePoint.from_state(self.states[0])

    @property
    def exit(self):
        return PhasePoint.from_state(self.states[-1])

    def quad_nodes(self, order=48):
        """Gauss-Legendre nodes and weights on [0, length]."""
        s, w = np.polynomial.legendre.leggauss(order)
        half = 0.5 * self.length
        return half * (s + 1.0), half * w


@dataclass(frozen=True)
class LensRecord:
    entry: PhasePoint
    exit: PhasePoint
    length: float
    status: str = "ok"           # 'ok' | 'trapped' | 'left_chart' | 'error'
    path: Optional[RayPath] = None

    def row(self):
        return np.concatenate(
            [self.entry.x, self.entry.xi, self.exit.x, self.exit.xi, [self.length]]
        )


# ---------------------------------------------------------------------------
# Ray integration
# ---------------------------------------------------------------------------

def _rhs(metric):
    n = metric.dim

    def fun(t, z):
        x, xi = z[:n], z[n:]
        dx, dxi = hamiltonian_field(metric, x, xi)
        return np.concatenate([dx, dxi])

    return fun


def _time_cap(metric: MetricModel):
    chart = metric.chart
    probe = np.random.default_rng(1).uniform(chart.lo, chart.hi, (128, metric.dim))
    probe = probe[chart.contains(probe)]
    if probe.size == 0:
        probe = 0.5 * (chart.lo + chart.hi)[None]
    vmin, _ = metric.wave_speed_bounds(probe)
    return TRAP_FACTOR * chart.diameter / max(vmin, 1e-12)


def integrate_ray(metric: MetricModel, z0: PhasePoint, stop="boundary",
                  t_max=None, rtol=1e-11, atol=1e-12):
    """Integrate the Hamiltonian flow from z0 until a stopping event.

    stop: "boundary" (chart boundary function crossing), a Hypersurface
    (target level set, one-sided crossing from either side), or ("time", T).
    Boundary crossings are located by the integrator's root finder to
    ~1e-12 in t. A ray that never triggers its event within the trapping
    time cap is flagged 'trapped'.
    """
    n = metric.dim
    z0v = z0.as_state()
    # metrics are extended across the boundary of M: accept any start inside
    # the chart box (entry points sit exactly on, or get nudged across, dM)
    if np.any(z0v[:n] < metric.chart.lo - 1e-9) or np.any(z0v[:n] > metric.chart.hi + 1e-9):
        raise DomainError("integrate_ray: initial point outside chart box")
    cap = _time_cap(metric)
    events = []
    flag_of_event = []

    rho = metric.chart.boundary

    def ev_boundary(t, z):
        return rho.value(z[:n])

    ev_boundary.terminal = True
    ev_boundary.direction = -1.0

    fixed_time = None
    target = None
    if stop == "boundary":
        events.append(ev_boundary)
        flag_of_event.append("boundary")
    elif isinstance(stop, Hypersurface):
        # the target may lie outside M (pushed surfaces); the ray runs on
        # the extended metric and only the target/box events terminate it
        target = stop

        def ev_target(t, z):
            return target.value(z[:n])

        ev_target.terminal = True
        ev_target.direction = 0.0
        events.append(ev_target)
        flag_of_event.append("target")
    elif isinstance(stop, tuple) and stop[0] == "time":
        fixed_time = float(stop[1])
    else:
        raise ValueError(f"unknown stop rule: {stop!r}")

    # always watch for leaving the chart box
    lo, hi = metric.chart.lo, metric.chart.hi

    def ev_box(t, z):
        return float(np.min(np.minimum(z[:n] - lo, hi - z[:n])))

    ev_box.terminal = True
    ev_box.direction = -1.0
    events.append(ev_box)
    flag_of_event.append("left_chart")

    t_end = fixed_time if fixed_time is not None else (t_max or cap)
    sol = solve_ivp(
        _rhs(metric), (0.0, t_end), z0v, method="DOP853",
        rtol=rtol, atol=atol, dense_output=True, events=events,
    )
    exit_flag = "time" if fixed_time is not None else "trapped"
    t_exit = sol.t[-1]
    for k, te in enumerate(sol.t_events):
        if te.size > 0 and te[0] <= t_exit + 1e-15:
            t_exit = te[0]
            exit_flag = flag_of_event[k]

    ts = sol.t[sol.t <= t_exit]
    if ts.size == 0 or ts[-1] < t_exit:
        ts = np.append(ts, t_exit)
    states = sol.sol(ts).T

    H0 = hamiltonian(metric, z0v[:n], z0v[n:])
    Hs = hamiltonian(metric, states[:, :n], states[:, n:])
    drift = float(np.max(np.abs(Hs - H0)) / abs(H0))

    path = RayPath(metric, ts, states, sol.sol, exit_flag, float(t_exit), drift)
    return path


def exit_time(metric: MetricModel, z: PhasePoint, target: Hypersurface,
              grazing_tol=1e-3):
    """First positive time at which the forward ray meets the target surface.

    Returns (tau, grazing) where grazing flags a near-tangential crossing
    (normal speed through the surface below grazing_tol), the regime where
    tau develops a square-root-type sensitivity.
    """
    path = integrate_ray(metric, z, stop=target)
    if path.exit_flag != "target":
        raise TrappedRayError(f"ray did not reach target (flag={path.exit_flag})")
    tau = path.length
    xs = path.position(tau)
    vel = path.tangent(tau)
    df = target.field.grad(xs)
    grazing = abs(float(np.dot(df, vel))) < grazing_tol * np.linalg.norm(df) * np.linalg.norm(vel)
    return tau, grazing


def scattering_relation(metric: MetricModel, entry: PhasePoint,
                        target: Optional[Hypersurface] = None,
                        keep_path=True):
    """Lens record of the ray from an inward boundary (or H_delta) point.

    With target=None the ray runs boundary-to-boundary; with a Hypersurface
    it runs from the pushed surface back to itself (the locally redefined
    relation acting between inward and outward near-tangent sets).
    """
    stop = target if target is not None else "boundary"
    path = integrate_ray(metric, entry, stop=stop)
    ok = path.exit_flag in ("boundary", "target")
    status = "ok" if ok else path.exit_flag
    return LensRecord(entry, path.exit, path.length, status,
                      path if keep_path else None)


# ---------------------------------------------------------------------------
# Variational flow
# ---------------------------------------------------------------------------

def flow_jacobian(metric: MetricModel, z0: PhasePoint, t, rtol=1e-10, atol=1e-11):
    """dZ/dz at time t from z0, solving the variational ODE alongside the flow."""
    n = metric.dim
    z0v = z0.as_state()
    W0 = np.eye(2 * n).ravel()

    def fun(s, y):
        z = y[: 2 * n]
        W = y[2 * n:].reshape(2 * n, 2 * n)
        dx, dxi = hamiltonian_field(metric, z[:n], z[n:])
        DV = hamiltonian_field_jacobian(metric, z[:n], z[n:])
        return np.concatenate([dx, dxi, (DV @ W).ravel()])

    sol = solve_ivp(fun, (0.0, float(t)), np.concatenate([z0v, W0]),
                    method="DOP853", rtol=rtol, atol=atol)
    y = sol.y[:, -1]
    return y[2 * n:].reshape(2 * n, 2 * n)


# ---------------------------------------------------------------------------
# Batched fixed-step integration (internal kernels)
# ---------------------------------------------------------------------------

def _rk4_step(f, y, dt):
    k1 = f(y)
    k2 = f(y + 0.5 * dt * k1)
    k3 = f(y + 0.5 * dt * k2)
    k4 = f(y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _flow_rhs_batch(metric, n):
    def f(Y):
        x, xi = Y[:, :n], Y[:, n:]
        dx, dxi = hamiltonian_field(metric, x, xi)
        return np.concatenate([dx, dxi], axis=1)

    return f


def batch_geodesic_states(metric: MetricModel, base, vel, t_grid, rk_steps=160):
    """Full states (x, xi) along geodesics from (base, vel) at the signed
    times t_grid, vectorized over rays with fixed-step RK4.

    Returns (len(t_grid), m, 2n). Used by collar construction and the ray
    families, where thousands of short rays are needed and per-ray adaptive
    stepping would dominate the cost.
    """
    base = np.atleast_2d(np.asarray(base, float))
    vel = np.atleast_2d(np.asarray(vel, float))
    m, n = base.shape
    xi0 = np.einsum("mij,mj->mi", metric.eval(base), vel)
    Y0 = np.concatenate([base, xi0], axis=1)
    t_grid = np.asarray(t_grid, float)
    out = np.empty((t_grid.size, m, 2 * n))
    f = _flow_rhs_batch(metric, n)
    order = np.argsort(np.abs(t_grid), kind="stable")
    width = max(np.abs(t_grid).max(), 1e-30)
    state_pos, t_pos = Y0.copy(), 0.0
    state_neg, t_neg = Y0.copy(), 0.0
    for idx in order:
        t = t_grid[idx]
        if t >= 0:
            seg = t - t_pos
            nstep = max(1, int(np.ceil(rk_steps * seg / width)))
            dt = seg / nstep
            for _ in range(nstep):
                state_pos = _rk4_step(f, state_pos, dt)
            t_pos = t
            out[idx] = state_pos
        else:
            seg = t - t_neg
            nstep = max(1, int(np.ceil(rk_steps * abs(seg) / width)))
            dt = seg / nstep
            for _ in range(nstep):
                state_neg = _rk4_step(f, state_neg, dt)
            t_neg = t
            out[idx] = state_neg
    return out


def batch_geodesic_positions(metric: MetricModel, base, vel, t_grid, rk_steps=160):
    """Positions only; see batch_geodesic_states."""
    n = metric.dim
    return batch_geodesic_states(metric, base, vel, t_grid, rk_steps)[..., :n]


def batch_flow(metric: MetricModel, Z0, durations, rk_steps=200):
    """Endpoints Z(T_i, z_i) of the Hamiltonian flow, batched.

    Durations may differ per row (time is rescaled per ray); fixed-step RK4.
    """
    Z0 = np.atleast_2d(np.asarray(Z0, float))
    m, two_n = Z0.shape
    n = two_n // 2
    T = np.asarray(durations, float).reshape(m, 1)
    f0 = _flow_rhs_batch(metric, n)

    def f(Y):
        return T * f0(Y)

    Y = Z0.copy()
    dt = 1.0 / rk_steps
    for _ in range(rk_steps):
        Y = _rk4_step(f, Y, dt)
    return Y


def batch_flow_with_jacobian(metric: MetricModel, Z0, durations, rk_steps=200):
    """Endpoints and flow Jacobians dZ/dz, batched over initial conditions.

    Returns (Z_end (m, 2n), W_end (m, 2n, 2n)). The variational matrix is
    propagated with the analytic field Jacobian.
    """
    Z0 = np.atleast_2d(np.asarray(Z0, float))
    m, two_n = Z0.shape
    n = two_n // 2
    T = np.asarray(durations, float).reshape(m, 1)

    def f(Y):
        z = Y[:, :two_n]
        W = Y[:, two_n:].reshape(m, two_n, two_n)
        dx, dxi, DV = hamiltonian_field_and_jacobian(metric, z[:, :n], z[:, n:])
        dW = DV @ W
        return T * np.concatenate([dx, dxi, dW.reshape(m, -1)], axis=1)

    Y = np.concatenate([Z0, np.tile(np.eye(two_n).ravel(), (m, 1))], axis=1)
    dt = 1.0 / rk_steps
    for _ in range(rk_steps):
        Y = _rk4_step(f, Y, dt)
    return Y[:, :two_n], Y[:, two_n:].reshape(m, two_n, two_n)


# ---------------------------------------------------------------------------
# Lens datasets
# ---------------------------------------------------------------------------

@dataclass
class FanSpec:
    """Boundary fan sampling on a disk/ball chart.

    n_points boundary sites, n_dirs directions per site, aimed inward with
    aperture half-angle (radians) measured from the inward normal. For
    dim 3 the directions sample a spherical cap grid (n_dirs x n_dirs).
    """

    n_points: int = 10
    n_dirs: int = 10
    aperture: float = 1.25
    radius: float = 1.0
    dim: int = 2

    def entries(self, metric: MetricModel):
        out = []
        if self.dim == 2:
            betas = np.linspace(0.0, 2.0 * np.pi, self.n_points, endpoint=False)
            alphas = np.linspace(-self.aperture, self.aperture, self.n_dirs)
            for b in betas:
                p = self.radius * np.array([np.cos(b), np.sin(b)])
                inward = -np.array([np.cos(b), np.sin(b)])
                tang = np.array([-np.sin(b), np.cos(b)])
                for a in alphas:
                    v = np.cos(a) * inward + np.sin(a) * tang
                    out.append(unit_phase_point(metric, p, v=v))
        elif self.dim == 3:
            betas = np.linspace(0.0, 2.0 * np.pi, self.n_points, endpoint=False)
            zs = np.linspace(-0.6, 0.6, max(2, self.n_points // 2))
            alphas = np.linspace(-self.aperture, self.aperture, self.n_dirs)
            for z0 in zs:
                rho = np.sqrt(1.0 - z0 * z0)
                for b in betas:
                    p = self.radius * np.array([rho * np.cos(b), rho * np.sin(b), z0])
                    nrm = p / np.linalg.norm(p)
                    inward = -nrm
                    t1 = np.array([-np.sin(b), np.cos(b), 0.0])
                    for a in alphas:
                        v = np.cos(a) * inward + np.sin(a) * t1
                        out.append(unit_phase_point(metric, p, v=v))
        else:
            raise ValueError("FanSpec supports dim 2 and 3")
        return out


def lens_dataset(metric: MetricModel, sampling: FanSpec, keep_paths=False):
    """Scattering relation over a deterministic fan of entry phase points.

    Per-ray failures (trapping, chart exit) are recorded in the record
    status, not raised.
    """
    records = []
    for z in sampling.entries(metric):
        try:
            rec = scattering_relation(metric, z, keep_path=keep_paths)
        except (DomainError, TrappedRayError) as e:
            rec = LensRecord(z, z, np.inf, "error", None)
        records.append(rec)
    return records
