"""Symmetric tensor calculus: symmetric gradients, exponentially conjugated
variants, along-geodesic calculus identities, and the normal-gauge
reduction ODEs on a collar.

Rank conventions: rank 0 fields evaluate to scalars, rank 1 to covectors
(..., n), rank 2 to symmetric cotensors (..., n, n).
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import make_interp_spline

from .errors import DomainError, SolverError
from .geometry import (
    CollarChart,
    MetricModel,
    ScalarField,
    _fit_nd_spline,
    christoffel,
)


# ---------------------------------------------------------------------------
# Symmetric tensor fields
# ---------------------------------------------------------------------------

class SymField:
    """Symmetric tensor field of rank 0, 1 or 2 over a chart.

    value(p): (...,) | (..., n) | (..., n, n)
    deriv(p): adds a leading derivative axis: deriv(p)[..., a, ...] = d_a (value)
    """

    rank: int
    dim: int

    def value(self, p):
        raise NotImplementedError

    def deriv(self, p):
        raise NotImplementedError

    def support_mask(self, p):
        return np.ones(np.asarray(p).shape[:-1], bool)


class CallableSymField(SymField):
    def __init__(self, rank, dim, value, deriv=None, mask=None):
        self.rank = rank
        self.dim = dim
        self._value = value
        self._deriv = deriv
        self._mask = mask

    def value(self, p):
        return self._value(np.asarray(p, float))

    def deriv(self, p):
        p = np.asarray(p, float)
        if self._deriv is not None:
            return self._deriv(p)
        h = 1e-6
        rows = []
        for a in range(self.dim):
            e = np.zeros(self.dim)
            e[a] = h
            rows.append((self._value(p + e) - self._value(p - e)) / (2 * h))
        return np.stack(rows, axis=-1 - self.rank)

    def support_mask(self, p):
        if self._mask is None:
            return super().support_mask(p)
        return self._mask(np.asarray(p, float))


class GridSymField(SymField):
    """Spline-backed tensor field on a tensor-product grid.

    Components are stored packed: rank 0 -> (), rank 1 -> (n,),
    rank 2 -> upper triangle (n(n+1)/2,). Derivatives come from the spline.
    """

    def __init__(self, axes, comps, rank, dim, periodic_axes=(), mask=None):
        self.rank = rank
        self.dim = dim
        self.axes = [np.asarray(a, float) for a in axes]
        comps = np.asarray(comps, float)
        self._scalar = rank == 0
        if rank == 0:
            comps = comps[..., None]
        self.iu = np.triu_indices(dim)
        self.spline = _fit_nd_spline(self.axes, comps, periodic_axes=periodic_axes)
        self._mask = mask
        self._packed = comps.shape[-1]

    @classmethod
    def from_function(cls, fun, axes, rank, dim, periodic_axes=()):
        mesh = np.meshgrid(*[np.asarray(a, float) for a in axes], indexing="ij")
        pts = np.stack(mesh, axis=-1)
        vals = fun(pts)
        if rank == 2:
            iu = np.triu_indices(dim)
            vals = vals[..., iu[0], iu[1]]
        return cls(axes, vals, rank, dim, periodic_axes=periodic_axes)

    def _unpack(self, packed):
        if self.rank == 0:
            return packed[..., 0]
        if self.rank == 1:
            return packed
        out = np.zeros(packed.shape[:-1] + (self.dim, self.dim))
        out[..., self.iu[0], self.iu[1]] = packed
        out[..., self.iu[1], self.iu[0]] = packed
        return out

    def value(self, p):
        return self._unpack(self.spline(np.asarray(p, float)))

    def deriv(self, p):
        p = np.asarray(p, float)
        d = len(self.axes)
        rows = []
        for a in range(d):
            nu = [0] * d
            nu[a] = 1
            rows.append(self._unpack(self.spline(p, nu=nu)))
        return np.stack(rows, axis=-1 - self.rank)

    def support_mask(self, p):
        p = np.asarray(p, float)
        inside = np.ones(p.shape[:-1], bool)
        for a, ax in enumerate(self.axes):
            inside &= (p[..., a] >= ax[0]) & (p[..., a] <= ax[-1])
        if self._mask is not None:
            inside &= self._mask(p)
        return inside


def bump_scalar_field(center, radius, amplitude=1.0, dim=2):
    """Compactly supported C^inf bump amp * exp(-s/(1-s)), s = |x-c|^2/R^2."""
    c = np.asarray(center, float)

    def value(p):
        d = (np.asarray(p, float) - c) / radius
        s = np.sum(d * d, axis=-1)
        out = np.zeros_like(s)
        m = s < 1.0 - 1e-12
        out[m] = amplitude * np.exp(-s[m] / (1.0 - s[m]))
        return out

    def deriv(p):
        p = np.asarray(p, float)
        d = (p - c) / radius
        s = np.sum(d * d, axis=-1)
        f1 = np.zeros_like(s)
        m = s < 1.0 - 1e-12
        u = 1.0 / (1.0 - s[m])
        f1[m] = -amplitude * np.exp(-s[m] * u) * u * u
        return f1[..., None] * (2.0 * d / radius)

    return CallableSymField(0, dim, value, deriv,
                            mask=lambda p: np.sum(((p - c) / radius) ** 2, axis=-1) < 1.0)


def constant_tensor_field(mat, dim=2):
    mat = np.asarray(mat, float)

    def value(p):
        p = np.asarray(p, float)
        return np.broadcast_to(mat, p.shape[:-1] + mat.shape).copy()

    def deriv(p):
        p = np.asarray(p, float)
        return np.zeros(p.shape[:-1] + (dim,) + mat.shape)

    return CallableSymField(mat.ndim, dim, value, deriv)


# ---------------------------------------------------------------------------
# Symmetric gradient and conjugated variant
# ---------------------------------------------------------------------------

def sym_diff(v: SymField, metric: MetricModel) -> SymField:
    """(d^s v)_ij = 1/2 (nabla_i v_j + nabla_j v_i)
                 = 1/2 (d_i v_j + d_j v_i) - Gamma^k_ij v_k."""
    if v.rank != 1:
        raise ValueError("sym_diff acts on one-forms")
    n = v.dim

    def value(p):
        dv = v.deriv(p)       # (..., j, a) ordering? deriv adds axis before comps
        # deriv(p)[..., a, j] = d_a v_j
        G = christoffel(metric, p)
        sym = 0.5 * (dv + np.swapaxes(dv, -1, -2))
        return sym - np.einsum("...kij,...k->...ij", G, v.value(p))

    def deriv(p):
        h = 1e-6
        rows = []
        for a in range(n):
            e = np.zeros(n)
            e[a] = h
            rows.append((value(p + e) - value(p - e)) / (2 * h))
        return np.stack(rows, axis=-3)

    return CallableSymField(2, n, value, deriv, mask=v.support_mask)


def conjugated_sym_diff(v: SymField, metric: MetricModel, digamma: float,
                        xfun: ScalarField) -> SymField:
    """d^s_F v = e^{-F/x} d^s (e^{F/x} v) = d^s v - (F/x^2) dx (x)_s v.

    The conjugation is applied as the exact zeroth-order correction
    -(F/x^2) dx tensor_sym v; no large exponential factors are formed.
    Requires x > 0 on the support of v.
    """
    base = sym_diff(v, metric)
    n = v.dim

    def value(p):
        p = np.asarray(p, float)
        x = xfun.value(p)
        if np.any((x <= 0) & v.support_mask(p)):
            raise DomainError("conjugated_sym_diff: support touches {x <= 0}")
        dx = xfun.grad(p)
        vv = v.value(p)
        corr = 0.5 * (dx[..., :, None] * vv[..., None, :]
                      + dx[..., None, :] * vv[..., :, None])
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(x > 0, digamma / (x * x), 0.0)
        return base.value(p) - fac[..., None, None] * corr

    return CallableSymField(2, n, value, mask=v.support_mask)


def divergence_sym(F: SymField, metric: MetricModel) -> SymField:
    """delta^s F: the negative divergence, adjoint of d^s.

    (delta^s F)_k = -g^{ij} (d_i F_jk - Gamma^l_ij F_lk - Gamma^l_ik F_jl).
    """
    if F.rank != 2:
        raise ValueError("divergence_sym acts on symmetric 2-tensors")
    n = F.dim

    def value(p):
        gi = metric.inverse(p)
        dF = F.deriv(p)       # (..., a, j, k) = d_a F_jk
        G = christoffel(metric, p)
        Fv = F.value(p)
        cov = dF - np.einsum("...lij,...lk->...ijk", G, Fv) \
                 - np.einsum("...lik,...jl->...ijk", G, Fv)
        return -np.einsum("...ij,...ijk->...k", gi, cov)

    return CallableSymField(1, n, value, mask=F.support_mask)


# ---------------------------------------------------------------------------
# Along-ray fundamental-theorem identity
# ---------------------------------------------------------------------------

def ftc_along_ray(v: SymField, metric: MetricModel, path, n_check=33, quad_order=64):
    """Residual of the along-geodesic identity

        <v(gamma(s)), gamma'(s)> - <v(gamma(0)), gamma'(0)>
            = int_0^s (d^s v)(gamma', gamma') dt.

    Returns the max over an s-grid of the two sides' difference; for exact
    integration this vanishes identically.
    """
    dsv = sym_diff(v, metric)
    ell = path.length
    s_grid = np.linspace(0.0, ell, n_check)

    def pairing(ts):
        x = path.position(ts)
        if not np.all(metric.chart.contains(x, slack=1e-9)):
            raise DomainError("ftc_along_ray: path exits chart")
        vel = path.tangent(ts)
        return np.einsum("...i,...i->...", v.value(x), vel)

    lhs = pairing(s_grid) - pairing(np.array(0.0))

    nodes, w = np.polynomial.legendre.leggauss(quad_order)
    rhs = np.empty_like(s_grid)
    for i, s in enumerate(s_grid):
        ts = 0.5 * s * (nodes + 1.0)
        ww = 0.5 * s * w
        x = path.position(ts)
        vel = path.tangent(ts)
        integrand = np.einsum("...ij,...i,...j->...", dsv.value(x), vel, vel)
        rhs[i] = np.dot(ww, integrand)
    return float(np.max(np.abs(lhs - rhs)))


def ray_derivative_residual(v: SymField, metric: MetricModel, path, n_check=65):
    """Max pointwise residual of d/ds <v, gamma'> = (d^s v)(gamma', gamma').

    The left side is computed by central differences along the ray's dense
    output, the right side from the symmetric gradient.
    """
    dsv = sym_diff(v, metric)
    ell = path.length
    s = np.linspace(0.05 * ell, 0.95 * ell, n_check)
    h = 1e-6 * ell

    def pairing(ts):
        x = path.position(ts)
        vel = path.tangent(ts)
        return np.einsum("...i,...i->...", v.value(x), vel)

    lhs = (pairing(s + h) - pairing(s - h)) / (2 * h)
    x = path.position(s)
    vel = path.tangent(s)
    rhs = np.einsum("...ij,...i,...j->...", dsv.value(x), vel, vel)
    return float(np.max(np.abs(lhs - rhs)))


# ---------------------------------------------------------------------------
# Gauge split on a collar
# ---------------------------------------------------------------------------

class GaugeSplit:
    """Normal/tangential decomposition of a rank-2 field on a collar.

    Components live on the collar coordinate grid (t, y):
        nn  (nt, ny)            normal-normal
        nt  (nt, ny, n-1)       normal-tangential
        tt  (nt, ny, n-1, n-1)  tangential-tangential
    """

    def __init__(self, collar: CollarChart, nn, nt, tt):
        self.collar = collar
        self.nn = np.asarray(nn, float)
        self.nt = np.asarray(nt, float)
        self.tt = np.asarray(tt, float)

    @classmethod
    def from_components(cls, collar: CollarChart, comp):
        """comp: full (nt, ny, n, n) symmetric array in collar coordinates."""
        comp = np.asarray(comp, float)
        return cls(collar, comp[..., 0, 0], comp[..., 0, 1:], comp[..., 1:, 1:])

    def reassemble(self):
        shape = self.nn.shape
        n = self.tt.shape[-1] + 1
        out = np.zeros(shape + (n, n))
        out[..., 0, 0] = self.nn
        out[..., 0, 1:] = self.nt
        out[..., 1:, 0] = self.nt
        out[..., 1:, 1:] = self.tt
        return out


def normal_gauge_reduce(u: GaugeSplit, digamma: float, x_of_t=None,
                        n_substeps=8):
    """Solve for the one-form v = (v_N, v_T) with v = 0 at the outer collar
    face such that u + d^s_F v has vanishing normal components.

    On a collar with metric dt^2 + h(t, y, dy), with x = x_of_t(t) > 0
    decreasing in t (t increases inward) and F = digamma, the triangular
    system obtained from the collar Christoffel symbols is (x' = dx/dt):

        d_t v_N = (F x' / x^2) v_N - u_NN
        d_t v_j = (F x' / x^2) v_j + h^{kl} (d_t h_lj) v_k - 2 u_Nj - d_j v_N

    integrated from the outer face (t = t_min) inward, where the
    exponential weight e^{-F/x} makes the sweep stable.
    """
    collar = u.collar
    t_grid = collar.t_grid
    y_axes = collar.y_axes
    if len(y_axes) != 1:
        raise NotImplementedError("normal_gauge_reduce implemented for collars with 1-d base")
    y = y_axes[0]
    nt_pts, ny_pts = t_grid.size, y.size

    if x_of_t is None:
        # default foliation coordinate: positive, decreasing inward
        span = t_grid[-1] - t_grid[0]
        x_of_t = lambda t: (t_grid[-1] - t) + 0.6 * span
        dx_of_t = lambda t: -np.ones_like(t)
    else:
        x_of_t, dx_of_t = x_of_t

    x_vals = x_of_t(t_grid)
    if np.any(x_vals <= 0):
        raise DomainError("normal_gauge_reduce: x must stay positive on the collar")

    periodic = 0 in collar.surface.periodic
    bc = "periodic" if periodic else None

    kt = 5 if t_grid.size > 5 else 3
    # u components splined in t for substeps
    u_nn_s = make_interp_spline(t_grid, u.nn, k=kt, axis=0)
    u_nt_s = make_interp_spline(t_grid, u.nt, k=kt, axis=0)

    damp = lambda t: digamma * dx_of_t(np.asarray(t)) / x_of_t(np.asarray(t)) ** 2

    # --- v_N sweep (per y, independent) -----------------------------------
    vN = np.zeros((nt_pts, ny_pts))
    # integrate from outer face t_grid[0]... outer face = largest x = smallest t
    for i in range(nt_pts - 1):
        t0, t1 = t_grid[i], t_grid[i + 1]
        vn = vN[i]
        hstep = (t1 - t0) / n_substeps
        t = t0
        for _ in range(n_substeps):
            def rhs(tt, val):
                return damp(tt) * val - u_nn_s(tt)

            k1 = rhs(t, vn)
            k2 = rhs(t + 0.5 * hstep, vn + 0.5 * hstep * k1)
            k3 = rhs(t + 0.5 * hstep, vn + 0.5 * hstep * k2)
            k4 = rhs(t + hstep, vn + hstep * k3)
            vn = vn + (hstep / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += hstep
        vN[i + 1] = vn

    # y-derivative of v_N on the grid (periodic-aware spline)
    ky = 5 if y.size > 5 else 3
    vN_y = make_interp_spline(y, vN, k=ky, axis=1, bc_type=bc)(y, nu=1)
    vN_y_s = make_interp_spline(t_grid, vN_y, k=kt, axis=0)

    # --- v_T sweep ---------------------------------------------------------
    mesh_t, mesh_y = np.meshgrid(t_grid, y, indexing="ij")
    q = np.stack([mesh_t, mesh_y], axis=-1)
    h_tt = collar.tangential_metric(q)[..., 0, 0]          # (nt, ny), 1-d base
    h_dt = collar.tangential_metric_dt(q)[..., 0, 0]
    conn = h_dt / h_tt                                      # h^{kl} d_t h_lj, scalar case
    conn_s = make_interp_spline(t_grid, conn, k=kt, axis=0)

    vT = np.zeros((nt_pts, ny_pts))
    for i in range(nt_pts - 1):
        t0, t1 = t_grid[i], t_grid[i + 1]
        vt = vT[i]
        hstep = (t1 - t0) / n_substeps
        t = t0
        for _ in range(n_substeps):
            def rhs(tt, val):
                return (damp(tt) + conn_s(tt)) * val - 2.0 * u_nt_s(tt)[..., 0] - vN_y_s(tt)

            k1 = rhs(t, vt)
            k2 = rhs(t + 0.5 * hstep, vt + 0.5 * hstep * k1)
            k3 = rhs(t + 0.5 * hstep, vt + 0.5 * hstep * k2)
            k4 = rhs(t + hstep, vt + hstep * k3)
            vt = vt + (hstep / 6) * (k1 + 2 * k2 + 2 * k3 + k4)
            t += hstep
        vT[i + 1] = vt

    if not (np.all(np.isfinite(vN)) and np.all(np.isfinite(vT))):
        raise SolverError("normal_gauge_reduce: ODE sweep diverged")
    return vN, vT


def gauge_residual(u: GaugeSplit, vN, vT, digamma, x_of_t=None):
    """Normal components of u + d^s_F v on the collar grid (should vanish)."""
    collar = u.collar
    t_grid = collar.t_grid
    y = collar.y_axes[0]
    periodic = 0 in collar.surface.periodic
    bc = "periodic" if periodic else None
    if x_of_t is None:
        span = t_grid[-1] - t_grid[0]
        x_fun = lambda t: (t_grid[-1] - t) + 0.6 * span
        dx_fun = lambda t: -np.ones_like(np.asarray(t))
    else:
        x_fun, dx_fun = x_of_t

    kt = 5 if t_grid.size > 5 else 3
    ky = 5 if y.size > 5 else 3
    vN_t = make_interp_spline(t_grid, vN, k=kt, axis=0)(t_grid, nu=1)
    vT_t = make_interp_spline(t_grid, vT, k=kt, axis=0)(t_grid, nu=1)
    vN_y = make_interp_spline(y, vN, k=ky, axis=1, bc_type=bc)(y, nu=1)

    mesh_t, mesh_y = np.meshgrid(t_grid, y, indexing="ij")
    q = np.stack([mesh_t, mesh_y], axis=-1)
    h_tt = collar.tangential_metric(q)[..., 0, 0]
    h_dt = collar.tangential_metric_dt(q)[..., 0, 0]
    conn = h_dt / h_tt

    damp = digamma * dx_fun(t_grid)[:, None] / x_fun(t_grid)[:, None] ** 2
    res_nn = u.nn + vN_t - damp * vN
    res_nt = u.nt[..., 0] + 0.5 * (vT_t + vN_y) - 0.5 * conn * vT - 0.5 * damp * vT
    return float(np.abs(res_nn).max()), float(np.abs(res_nt).max())
