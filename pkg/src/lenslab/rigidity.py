"""The nonlinear pipeline: pseudolinearization identity, lens-data residual
assembly, ridge-regularized linearized inversion on a collar, layer-stripping
reconstruction, and the radial (Herglotz) and convex-foliation conditions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse import csr_matrix, eye as sp_eye
from scipy.sparse.linalg import cg as sparse_cg

from .errors import DomainError, SolverError, TrappedRayError
from .flow import (
    LensRecord,
    PhasePoint,
    RayPath,
    batch_flow_with_jacobian,
    batch_geodesic_states,
    integrate_ray,
    scattering_relation,
    unit_phase_point,
)
from .geometry import (
    BumpDiffeo,
    CollarChart,
    Hypersurface,
    MetricModel,
    ScalarField,
    hessian_matrix,
    second_fundamental_form,
    sphere_surface,
)
from .tensorcalc import CallableSymField
from .xray import WeightPack, weighted_xray


# ---------------------------------------------------------------------------
# Metric pairs
# ---------------------------------------------------------------------------

@dataclass
class MetricPair:
    """Two metrics on a common chart, equal outside |x| = band_radius when
    such an agreement band exists (the extension convention: both extended
    identically); band_radius = inf declares no agreement anywhere."""

    g: MetricModel
    ghat: MetricModel
    band_radius: float = np.inf

    def check_agreement(self, n_probe=200, seed=0):
        r = np.random.default_rng(seed)
        n = self.g.dim
        th = r.uniform(0, 2 * np.pi, n_probe)
        rad = r.uniform(self.band_radius, 1.0, n_probe)
        if n == 2:
            pts = rad[:, None] * np.stack([np.cos(th), np.sin(th)], axis=-1)
        else:
            z = r.uniform(-1, 1, n_probe)
            s = np.sqrt(1 - z * z)
            pts = rad[:, None] * np.stack([s * np.cos(th), s * np.sin(th), z], axis=-1)
        return float(np.abs(self.g.eval(pts) - self.ghat.eval(pts)).max())

    def difference_fields(self):
        """The n+1 cotensor fields (f_0, f_1..f_n) of the weighted transform:
        f_0 = g (g^{-1} - ghat^{-1}) g lowered at the same point, and
        f_a the lowered a-th chart derivative of (g^{-1} - ghat^{-1})."""
        n = self.g.dim
        g, gh = self.g, self.ghat

        def f0(p):
            gm = g.eval(p)
            diff = g.inverse(p) - gh.inverse(p)
            return np.einsum("...ik,...kl,...lj->...ij", gm, diff, gm)

        def fa(a):
            def val(p):
                gm = g.eval(p)
                ddiff = g.inverse_deriv(p) - gh.inverse_deriv(p)
                return np.einsum("...ik,...kl,...lj->...ij", gm, ddiff[..., a, :, :], gm)

            return val

        fields = [CallableSymField(2, n, f0)]
        fields += [CallableSymField(2, n, fa(a)) for a in range(n)]
        return fields


def pullback_pair(metric: MetricModel, diffeo: BumpDiffeo):
    """Equal-lens-data pair manufactured by pulling g back under an interior
    diffeomorphism (data equality is exact by construction)."""
    from .geometry import PullbackMetric

    band = max(
        np.linalg.norm(c) + r for c, r in zip(diffeo.centers, diffeo.radii)
    )
    return MetricPair(metric, PullbackMetric(metric, diffeo), band_radius=band)


# ---------------------------------------------------------------------------
# Pseudolinearization identity
# ---------------------------------------------------------------------------

def pseudolin_identity_check(pair: MetricPair, z0: PhasePoint, t,
                             order=192, rk_per_unit=150):
    """Residual of the flow-difference identity

        Z~(t, z0) - Z(t, z0)
            = int_0^t (dZ~/dz)(t - s, Z(s, z0)) (V~ - V)(Z(s, z0)) ds,

    both sides evaluated independently (left: two flows; right: quadrature
    over the g-ray with the ghat variational flow per node). This is an
    identity: the residual is integration error for ANY metric pair.
    """
    g, gh = pair.g, pair.ghat
    n = g.dim
    path_g = integrate_ray(g, z0, stop=("time", float(t)))
    path_h = integrate_ray(gh, z0, stop=("time", float(t)))
    # both flows must exist on [0, t]; truncate to the common interval if a
    # ray left the chart box early (the identity holds on any subinterval)
    t = min(float(t), path_g.length, path_h.length)
    lhs = path_h.state(t) - path_g.state(t)

    # (V~ - V) vanishes where the metrics agree: quadrature over the
    # support interval only (exact restriction)
    seg = _support_interval(path_g, pair.band_radius)
    if seg is None:
        return float(np.abs(lhs).max())
    seg = (min(seg[0], t), min(seg[1], t))
    sN, w = np.polynomial.legendre.leggauss(order)
    s_nodes = 0.5 * (seg[1] - seg[0]) * (sN + 1.0) + seg[0]
    ww = 0.5 * (seg[1] - seg[0]) * w
    Z = path_g.state(s_nodes)
    taus = t - s_nodes
    steps = max(48, int(rk_per_unit * float(t)))
    _, W = batch_flow_with_jacobian(gh, Z, taus, rk_steps=steps)
    X, Xi = Z[:, :n], Z[:, n:]
    f = g.inverse(X) - gh.inverse(X)
    df = g.inverse_deriv(X) - gh.inverse_deriv(X)
    fXi = np.einsum("mkl,ml->mk", f, Xi)
    dfXiXi = np.einsum("makl,mk,ml->ma", df, Xi, Xi)
    diffV = np.concatenate([-fXi, 0.5 * dfXiXi], axis=1)    # V~ - V
    rhs = np.einsum("m,mab,mb->a", ww, W, diffV)
    return float(np.abs(lhs - rhs).max())


def pseudolin_identity_check_batch(pair: MetricPair, samples, order=96,
                                   rk_per_unit=200):
    """Identity residuals for many (z0, t) samples of one metric pair, with
    all right-hand-side variational solves in a single batch."""
    g, gh = pair.g, pair.ghat
    n = g.dim
    sN, wq = np.polynomial.legendre.leggauss(order)
    lhs_list, Zs, taus, wws = [], [], [], []
    for z0, t in samples:
        path_g = integrate_ray(g, z0, stop=("time", float(t)))
        path_h = integrate_ray(gh, z0, stop=("time", float(t)))
        t = min(float(t), path_g.length, path_h.length)
        lhs_list.append(path_h.state(t) - path_g.state(t))
        seg = _support_interval(path_g, pair.band_radius) or (0.0, t)
        seg = (min(seg[0], t), min(seg[1], t))
        s_nodes = 0.5 * (seg[1] - seg[0]) * (sN + 1.0) + seg[0]
        wws.append(0.5 * (seg[1] - seg[0]) * wq)
        Zs.append(path_g.state(s_nodes))
        taus.append(t - s_nodes)
    Zb = np.concatenate(Zs, axis=0)
    taub = np.concatenate(taus)
    steps = max(64, int(rk_per_unit * float(np.max(taub))))
    _, W = batch_flow_with_jacobian(gh, Zb, taub, rk_steps=steps)
    X, Xi = Zb[:, :n], Zb[:, n:]
    f = g.inverse(X) - gh.inverse(X)
    df = g.inverse_deriv(X) - gh.inverse_deriv(X)
    fXi = np.einsum("mkl,ml->mk", f, Xi)
    dfXiXi = np.einsum("makl,mk,ml->ma", df, Xi, Xi)
    diffV = np.concatenate([-fXi, 0.5 * dfXiXi], axis=1)
    out = np.empty(len(samples))
    for k in range(len(samples)):
        sl = slice(k * order, (k + 1) * order)
        rhs = np.einsum("m,mab,mb->a", wws[k], W[sl], diffV[sl])
        out[k] = np.abs(lhs_list[k] - rhs).max()
    return out


# ---------------------------------------------------------------------------
# Rigidity residual (the weighted-transform route)
# ---------------------------------------------------------------------------

def _support_interval(path, radius, n_scan=160):
    """Parameter interval on which the ray lies inside |x| <= radius
    (single interval for rays through a convex region), padded slightly."""
    ell = path.length
    ts = np.linspace(0.0, ell, n_scan)
    r = np.linalg.norm(path.position(ts), axis=-1)
    inside = r <= radius
    if not np.any(inside):
        return None
    i0, i1 = np.argmax(inside), n_scan - 1 - np.argmax(inside[::-1])
    pad = 1.5 * ell / n_scan
    return max(0.0, ts[i0] - pad), min(ell, ts[i1] + pad)


def build_weights_batch(g: MetricModel, ghat: MetricModel, paths,
                        order=160, rk_per_unit=280, min_steps=64,
                        support_radius=None):
    """Weight packs for many rays via one batched variational solve of the
    second metric's flow over all quadrature nodes of all rays.

    With support_radius given, quadrature nodes are restricted to the part
    of each ray inside |x| <= support_radius (where the difference fields
    the weights will be paired with can be nonzero); rays that miss the
    region entirely get empty packs.
    """
    n = g.dim
    all_Z, all_tau, counts, nodes, wts = [], [], [], [], []
    for path in paths:
        if support_radius is not None:
            seg = _support_interval(path, support_radius)
        else:
            seg = (0.0, path.length)
        if seg is None:
            counts.append(0)
            nodes.append(np.zeros(0))
            wts.append(np.zeros(0))
            continue
        sN, w = np.polynomial.legendre.leggauss(order)
        ts = 0.5 * (seg[1] - seg[0]) * (sN + 1.0) + seg[0]
        w = 0.5 * (seg[1] - seg[0]) * w
        Z = path.state(ts)
        all_Z.append(Z)
        all_tau.append(path.length - ts)
        counts.append(ts.size)
        nodes.append(ts)
        wts.append(w)
    if not all_Z:
        return [WeightPack(np.zeros(0), np.zeros(0), np.zeros((0, 2 * n)),
                           np.zeros((0, n, n)), np.zeros((0, n, n)),
                           np.zeros((0, n))) for _ in paths]
    Zb = np.concatenate(all_Z, axis=0)
    taub = np.concatenate(all_tau)
    steps = max(min_steps, int(rk_per_unit * float(np.max(np.abs(taub)))))
    _, W = batch_flow_with_jacobian(ghat, Zb, taub, rk_steps=steps)
    packs = []
    off = 0
    for k, path in enumerate(paths):
        m = counts[k]
        if m == 0:
            packs.append(WeightPack(nodes[k], wts[k], np.zeros((0, 2 * n)),
                                    np.zeros((0, n, n)), np.zeros((0, n, n)),
                                    np.zeros((0, n))))
            continue
        Wk = W[off:off + m]
        Zk = Zb[off:off + m]
        off += m
        dXidx = Wk[:, n:, :n]
        A = -0.5 * Wk[:, n:, n:]
        gi = g.inverse(Zk[:, :n])
        gv = np.einsum("mjk,mk->mj", gi, Zk[:, n:])
        B = np.einsum("mij,mj->mi", dXidx, gv)
        packs.append(WeightPack(nodes[k], wts[k], Zk, A, dXidx, B))
    return packs


def rigidity_residual(pair: MetricPair, records, order=160, mode="exact",
                      rk_per_unit=280, restrict_support=True):
    """Per-ray weighted-transform residual vectors J_i for the difference
    tensor f = g^{-1} - ghat^{-1} (lowered), computed via build_weights +
    weighted_xray. Zero (to quadrature tolerance) on rays along which the
    two metrics have equal lens data.

    Quadrature is restricted to the agreement-band complement (where the
    difference fields live); rays missing it give exactly zero. Records
    with non-'ok' status, or without stored paths, produce NaN rows.
    """
    n = pair.g.dim
    fields = pair.difference_fields()
    paths = []
    idx = []
    for i, rec in enumerate(records):
        if rec.status == "ok" and rec.path is not None:
            paths.append(rec.path)
            idx.append(i)
    out = np.full((len(records), n), np.nan)
    if not paths:
        return out
    rad = pair.band_radius if restrict_support else None
    packs = build_weights_batch(pair.g, pair.ghat, paths, order=order,
                                rk_per_unit=rk_per_unit, support_radius=rad)
    for i, path, wp in zip(idx, paths, packs):
        if wp.nodes.size == 0:
            out[i] = 0.0
        else:
            out[i] = weighted_xray(fields, wp, path, mode=mode)
    return out


def tangent_band_records(metric: MetricModel, radius, n_rays, spread=0.25,
                         seed=None, keep_paths=True):
    """Deterministic fan of rays whose turning depth brackets the given
    radius (the tangent-band data set of a foliation level)."""
    n_beta = max(1, int(np.sqrt(n_rays)))
    n_aim = max(1, n_rays // n_beta)
    betas = np.linspace(0.0, 2 * np.pi, n_beta, endpoint=False)
    # aiming angle from the inward normal whose Euclidean chord grazes the
    # target radius: sin(a) ~ radius; spread widens the band
    a0 = np.arcsin(min(0.98, radius))
    aims = np.linspace(a0 - spread, min(1.45, a0 + spread), n_aim)
    recs = []
    for b in betas:
        p = np.array([np.cos(b), np.sin(b)])
        inward = -p
        tang = np.array([-np.sin(b), np.cos(b)])
        for a in aims:
            v = np.cos(a) * inward + np.sin(a) * tang
            z = unit_phase_point(metric, p, v=v)
            recs.append(scattering_relation(metric, z, keep_path=keep_paths))
    return recs


# ---------------------------------------------------------------------------
# Linearized inversion on a collar (ridge least squares)
# ---------------------------------------------------------------------------

def _bilinear_stencil(tq, yq, t_grid, y_grid, periodic_y=True):
    """Cell-local bilinear weights for values and partial derivatives.

    Returns (cols, w_val, w_dt, w_dy): indices into the flattened
    (nt x ny) grid and weight arrays of shape (m, 4).
    """
    nt, ny = t_grid.size, y_grid.size
    dt = t_grid[1] - t_grid[0]
    dy = y_grid[1] - y_grid[0]
    it = np.clip(((tq - t_grid[0]) / dt).astype(int), 0, nt - 2)
    u = (tq - t_grid[it]) / dt
    if periodic_y:
        yy = np.mod(yq - y_grid[0], ny * dy)
        iy = np.clip((yy / dy).astype(int), 0, ny - 1)
        v = (yy - iy * dy) / dy
        iy1 = (iy + 1) % ny
    else:
        iy = np.clip(((yq - y_grid[0]) / dy).astype(int), 0, ny - 2)
        v = (yq - y_grid[iy]) / dy
        iy1 = iy + 1
    c00 = it * ny + iy
    c01 = it * ny + iy1
    c10 = (it + 1) * ny + iy
    c11 = (it + 1) * ny + iy1
    cols = np.stack([c00, c01, c10, c11], axis=1)
    w_val = np.stack([(1 - u) * (1 - v), (1 - u) * v, u * (1 - v), u * v], axis=1)
    w_dt = np.stack([-(1 - v), -v, (1 - v), v], axis=1) / dt
    w_dy = np.stack([-(1 - u), (1 - u), -u, u], axis=1) / dy
    return cols, w_val, w_dt, w_dy


def assemble_collar_system(paths, packs, gauge: CollarChart, t_grid=None,
                           y_grid=None):
    """Sparse design matrix of the map (tangential-tangential grid values on
    the collar) -> (per-ray weighted-transform residual components).

    The unknown f is the TT cotensor f_TT(t, y) E^y x E^y in collar
    coordinates; its chart derivatives differentiate both the bilinear
    interpolant and the coframe. Nodes outside the collar contribute zero.
    """
    collar = gauge
    if t_grid is None:
        t_grid = collar.t_grid
    if y_grid is None:
        y_grid = collar.y_axes[0]
    nt, ny = t_grid.size, y_grid.size
    n_unknown = nt * ny
    rows_i, cols_i, vals_i = [], [], []
    rhs_rows = 0
    metric = collar.metric
    n = metric.dim
    t_lo, t_hi = collar.t_grid[0], collar.t_grid[-1]
    r_out = np.linalg.norm(collar.forward(np.array([t_lo, 0.0])))
    r_in = np.linalg.norm(collar.forward(np.array([t_hi, 0.0])))

    for path, wp in zip(paths, packs):
        Z = wp.states
        X = Z[:, :n]
        gi = metric.inverse(X)
        vel = np.einsum("mij,mj->mi", gi, Z[:, n:])
        m = X.shape[0]
        inside = np.zeros(m, bool)
        q = np.zeros((m, 2))
        rad = np.linalg.norm(X, axis=1)
        guess = (rad > r_in - 0.2) & (rad < r_out + 0.2)
        if np.any(guess):
            q_try = collar.inverse(X[guess], strict=False)
            ok = (q_try[:, 0] >= t_lo) & (q_try[:, 0] <= t_hi)
            ok &= np.linalg.norm(collar.forward(q_try) - X[guess], axis=1) < 1e-7
            pos = np.where(guess)[0][ok]
            inside[pos] = True
            q[pos] = q_try[ok]
        if not np.any(inside):
            rhs_rows += 2
            continue

        qi = q[inside]
        E = collar.coframe(qi)                 # (mi, 2, n): rows (dt, dy)
        Ey = E[:, 1, :]
        Jq = _frame_derivative(collar, qi)
        dEy = _coframe_row_derivative(E, Jq)   # (mi, chart deriv, n)
        veli = vel[inside]
        Evel = np.einsum("mi,mi->m", Ey, veli)
        dE_vel = np.einsum("mai,mi->ma", dEy, veli)
        A = wp.A[inside]
        Bmat = np.einsum("mij,mjk->mik", wp.dXidx[inside], gi[inside])
        w_quad = wp.weights[inside]

        cols, w_val, w_dt, w_dy = _bilinear_stencil(qi[:, 0], qi[:, 1],
                                                    t_grid, y_grid)
        # d_a f_TT = (df/dt) E^t_a + (df/dy) E^y_a on the stencil
        grad_stencil = (E[:, 0, :, None] * w_dt[:, None, :]
                        + E[:, 1, :, None] * w_dy[:, None, :])   # (mi, n, 4)
        termA = np.einsum("mia,mas->mis", A, grad_stencil) \
            * (Evel**2)[:, None, None]
        termA += 2.0 * np.einsum("mia,ma->mi", A, dE_vel)[:, :, None] \
            * Evel[:, None, None] * w_val[:, None, :]
        termB = np.einsum("mia,ma->mi", Bmat, Ey)[:, :, None] \
            * Evel[:, None, None] * w_val[:, None, :]
        total = (termA + termB) * w_quad[:, None, None]          # (mi, 2, 4)

        for i_comp in range(2):
            rows_i.append(np.full(cols.size, rhs_rows + i_comp))
            cols_i.append(cols.ravel())
            vals_i.append(total[:, i_comp, :].ravel())
        rhs_rows += 2

    rows = np.concatenate(rows_i) if rows_i else np.zeros(0, int)
    colsv = np.concatenate(cols_i) if cols_i else np.zeros(0, int)
    valsv = np.concatenate(vals_i) if vals_i else np.zeros(0)
    M = csr_matrix((valsv, (rows, colsv)), shape=(rhs_rows, n_unknown))
    return M, (t_grid, y_grid)


def _frame_derivative(collar: CollarChart, q):
    """Second derivatives of the collar position map: (m, n, a, c) with
    a the frame column and c the collar-coordinate derivative."""
    d = collar.dim
    out = np.empty(q.shape[:-1] + (d, d, d))
    for a in range(d):
        for c in range(a, d):
            nu = [0] * d
            nu[a] += 1
            nu[c] += 1
            val = collar._pos(collar._wrap(q), nu=nu)
            out[..., a, c] = val
            out[..., c, a] = val
    return out


def _coframe_row_derivative(E, Jq):
    """Chart derivative of the tangential coframe row E^y.

    d(J^{-1})/dx^b = -J^{-1} (dJ/dq_c) J^{-1} E^c_b; returns (m, b, n)."""
    # J columns: dphi/dq_a; Jq[m, i, a, c] = d^2 phi^i / dq_a dq_c
    Jinv = E  # E rows are exactly J^{-1}
    dJ_dq = Jq  # (m, i, a, c)
    # dJinv/dq_c = -Jinv dJ/dq_c Jinv
    m, n = E.shape[0], E.shape[-1]
    dJinv = -np.einsum("mri,miac,man->mrnc", Jinv, dJ_dq, Jinv)
    # chain to chart: d/dx^b = E^c_b d/dq_c
    dJinv_chart = np.einsum("mrnc,mcb->mbrn", dJinv, Jinv)
    return dJinv_chart[:, :, 1, :]  # row r = 1: E^y


@dataclass
class InversionResult:
    values: np.ndarray          # (nt, ny) recovered TT component
    grids: tuple
    data_residual: float
    relative_error: Optional[float] = None
    cg_iterations: int = 0


def linearized_invert(data, paths, packs, gauge: CollarChart, ridge=1e-4,
                      t_grid=None, y_grid=None, truth=None, maxiter=2000):
    """Ridge-regularized least squares for the TT collar component from
    per-ray residual vectors, via conjugate gradient on the normal
    equations. Reports the data residual and, when truth is given on the
    same grid, the relative L2 recovery error.
    """
    M, grids = assemble_collar_system(paths, packs, gauge, t_grid, y_grid)
    d = np.asarray(data, float).ravel()
    if d.size != M.shape[0]:
        raise ValueError("data size does not match assembled system")
    MtM = (M.T @ M).tocsr()
    A = MtM + ridge * sp_eye(M.shape[1], format="csr")
    b = M.T @ d
    it = [0]

    def cb(xk):
        it[0] += 1

    x, info = sparse_cg(A, b, rtol=1e-10, atol=0.0, maxiter=maxiter, callback=cb)
    if info != 0:
        raise SolverError(f"conjugate gradient did not converge (info={info})")
    res = float(np.linalg.norm(M @ x - d) / max(np.linalg.norm(d), 1e-300))
    nt, ny = grids[0].size, grids[1].size
    vals = x.reshape(nt, ny)
    rel = None
    if truth is not None:
        tnorm = np.linalg.norm(truth)
        rel = float(np.linalg.norm(vals - truth) / max(tnorm, 1e-300))
    return InversionResult(vals, grids, res, rel, it[0])


# ---------------------------------------------------------------------------
# Herglotz and foliation conditions
# ---------------------------------------------------------------------------

def herglotz_check(profile, radii, metric=None):
    """Margins of d_r (r / c) and, independently, the smallest eigenvalue of
    the second fundamental form of the spheres in the metric c^{-2} dx^2;
    the two signs agree radius by radius.
    """
    from .geometry import ConformalMetric, disk_chart

    radii = np.asarray(radii, float)
    c = profile.radial(radii)
    dc = profile.radial_deriv(radii)
    margin = (c - radii * dc) / (c * c)
    if metric is None:
        metric = ConformalMetric(profile, 2, chart=disk_chart(float(radii.max() + 0.25), 2))
    ii_min = np.empty_like(radii)
    for k, R in enumerate(radii):
        surf = sphere_surface(R, dim=2)
        p = R * np.array([np.cos(0.37), np.sin(0.37)])
        ii_min[k] = second_fundamental_form(metric, surf, p).min_eigenvalue()
    agree = bool(np.all(np.sign(margin) == np.sign(ii_min)))
    return {"radii": radii, "margin": margin, "ii_min": ii_min, "agree": agree}


@dataclass
class FoliationSpec:
    """Level-set foliation with per-level strict-convexity certificates."""

    field: ScalarField
    levels: np.ndarray
    step: float
    certificates: np.ndarray       # min II eigenvalue per level
    excluded_radius: float = 0.0
    flagged: Optional[np.ndarray] = None

    def certified(self):
        return self.certificates > 0


def foliation_from_convex(f: ScalarField, metric: MetricModel, level_range,
                          n_levels=10, center=None, exclusion=0.15,
                          n_probe=24):
    """Foliate by level sets of a convex function, certifying each level by
    the minimum second-fundamental-form eigenvalue over probe points; a
    ball around the (at most one) critical point is excluded and reported.
    """
    n = metric.dim
    center = np.zeros(n) if center is None else np.asarray(center, float)
    levels = np.linspace(level_range[0], level_range[1], n_levels)
    certs = np.empty(n_levels)
    flagged = np.zeros(n_levels, bool)
    from .geometry import level_surface

    for k, c in enumerate(levels):
        try:
            surf = level_surface(f, c, center, dim=n)
            ths = np.linspace(0, 2 * np.pi, n_probe, endpoint=False)
            pts = surf.param(ths[:, None])
        except (ValueError, RuntimeError):
            # non-closed level set (saddle region): reject the level
            flagged[k] = True
            certs[k] = -np.inf
            continue
        if np.any(np.linalg.norm(pts - center, axis=-1) < exclusion):
            flagged[k] = True
            certs[k] = -np.inf
            continue
        vals = [second_fundamental_form(metric, surf, p).min_eigenvalue()
                for p in pts]
        certs[k] = min(vals)
        # also demand Hess f > 0 on the probe ring (the defining property)
        H = hessian_matrix(f, metric, pts)
        if np.linalg.eigvalsh(H).min() <= 0:
            flagged[k] = True
            certs[k] = min(certs[k], -np.inf)
    step = float(levels[1] - levels[0]) if n_levels > 1 else 0.0
    return FoliationSpec(f, levels, step, certs, exclusion, flagged)


# ---------------------------------------------------------------------------
# Layer stripping
# ---------------------------------------------------------------------------

@dataclass
class LayerLog:
    level: float
    radius: float
    sup_rel_metric_error: float
    inversion_norm: float
    residual_max: float
    n_rays: int


@dataclass
class ReconstructionState:
    depth: float
    layers: list
    boundary_diffeo_error: float
    halt_reason: str
    recovered: list            # per-layer (t_grid, y_grid, h_g, h_ghat)

    def max_metric_error(self):
        if not self.layers:
            return np.nan
        return max(l.sup_rel_metric_error for l in self.layers)


def _collar_from_points(metric, base_points, normals, half_width, t_nodes,
                        y_axis, surface, rk_steps=64):
    """CollarChart from explicit base points and unit normals on a closed
    loop (the y-grid parameterization is inherited from the caller, without
    the duplicated endpoint)."""
    t_grid = np.linspace(-half_width, half_width, t_nodes)
    pos = batch_geodesic_states(metric, base_points, normals, t_grid,
                                rk_steps)[..., : metric.dim]
    positions = pos.reshape(t_grid.size, base_points.shape[0], metric.dim)
    # close the periodic y-axis for the spline fit
    period = 2.0 * np.pi
    y_closed = np.concatenate([y_axis, [y_axis[0] + period]])
    positions = np.concatenate([positions, positions[:, :1, :]], axis=1)
    return CollarChart(surface, t_grid, [y_closed], positions, metric,
                       periodic_axes=(0,))


def layer_strip(pair: MetricPair, fol: FoliationSpec, n_y=192, t_nodes=13,
                half_width=None, rays_per_layer=48, ridge=1e-4,
                error_threshold=5e-3, residual_order=128, invert=True):
    """Iterative normal-gauge reconstruction down the certified foliation.

    Per layer: build the g-side collar on the level surface and the
    ghat-side collar on its image under the accumulated identification
    (shared y-parameterization), compare the pulled-back tangential metrics
    (the recovered metric), and run the weighted-transform residual +
    linearized inversion on the collar as the data-side certificate. Halts
    at the first uncertified level or on error growth, returning the
    partial state.

    half_width=None picks 1.4x the largest consecutive-surface gap so each
    collar safely contains the next level surface.
    """
    g, gh = pair.g, pair.ghat
    ys = np.linspace(0.0, 2 * np.pi, n_y, endpoint=False)
    layers = []
    recovered = []
    prev = None      # (collar_g, collar_gh) of the previous layer
    halt = "completed"
    boundary_err = np.nan
    depth_done = 0.0

    if half_width is None:
        pts0 = [level_surface_for(fol, lev).param(np.zeros((1, 1)))[0]
                for lev in fol.levels]
        gaps = [np.linalg.norm(a - b) for a, b in zip(pts0[:-1], pts0[1:])]
        half_width = 1.4 * max(gaps) if gaps else 0.08

    for k, lev in enumerate(fol.levels):
        if fol.certificates[k] <= 0:
            halt = f"uncertified level {lev:g}"
            break
        try:
            surf = level_surface_for(fol, lev)
            base_g = surf.param(ys[:, None])
            nrm_g = -surf.unit_normal(g, base_g)     # inward
            if prev is None:
                # first layer sits in the agreement band: the
                # identification is the identity there
                base_h = base_g
                nrm_h = nrm_g
            else:
                cg, ch = prev
                q = cg.inverse(base_g, strict=False)
                miss = np.linalg.norm(cg.forward(q) - base_g, axis=-1)
                if miss.max() > 1e-7:
                    raise DomainError(
                        f"level surface escapes the previous collar "
                        f"(worst miss {miss.max():.2e}); widen half_width")
                base_h = ch.forward(q)
                # push the normal through the accumulated identification:
                # d(Psi) = (frame of ch)(frame of cg)^{-1} at the shared
                # collar coordinates; an isometry in exact arithmetic, so
                # ghat-unit up to solver error (renormalized defensively)
                Jg = cg._frame(q)
                Jh = ch._frame(q)
                nrm_h = np.einsum("mij,mj->mi", Jh,
                                  np.linalg.solve(Jg, nrm_g[..., None])[..., 0])
                nrm_h /= gh.norm(base_h, nrm_h)[..., None]
            col_g = _collar_from_points(g, base_g, nrm_g, half_width,
                                        t_nodes, ys, surf)
            col_h = _collar_from_points(gh, base_h, nrm_h, half_width,
                                        t_nodes, ys, surf)
        except Exception as e:            # collar fold / containment failure
            halt = f"collar failure at level {lev:g}: {e}"
            break

        if k == 0:
            # the boundary-side face of the first collar: the accumulated
            # identification restricted there should be the identity
            qb = np.stack([np.full(n_y, -half_width), ys], axis=-1)
            boundary_err = float(
                np.abs(col_h.forward(qb) - col_g.forward(qb)).max()
            )

        mesh_t, mesh_y = np.meshgrid(col_g.t_grid, ys, indexing="ij")
        qq = np.stack([mesh_t, mesh_y], axis=-1)
        h_g = col_g.tangential_metric(qq)[..., 0, 0]
        h_h = col_h.tangential_metric(qq)[..., 0, 0]
        sup_rel = float(np.abs(h_h - h_g).max() / np.abs(h_g).max())

        res_max = 0.0
        inv_norm = 0.0
        n_rays = 0
        if invert:
            radius = float(np.linalg.norm(base_g[0]))
            recs = tangent_band_records(g, radius, rays_per_layer)
            ok = [r for r in recs if r.status == "ok"]
            n_rays = len(ok)
            res = rigidity_residual(pair, ok, order=residual_order)
            res_max = float(np.nanmax(np.abs(res)))
            packs = build_weights_batch(g, gh, [r.path for r in ok],
                                        order=residual_order)
            inv = linearized_invert(res, [r.path for r in ok], packs, col_g,
                                    ridge=ridge)
            scale = max(np.abs(h_g).max(), 1.0)
            inv_norm = float(np.abs(inv.values).max() / scale)

        layers.append(LayerLog(float(lev), float(np.linalg.norm(base_g[0])),
                               sup_rel, inv_norm, res_max, n_rays))
        recovered.append((col_g.t_grid.copy(), ys.copy(), h_g, h_h))
        depth_done = float(lev)
        if sup_rel > error_threshold:
            halt = f"error growth at level {lev:g} (sup rel {sup_rel:.2e})"
            break
        prev = (col_g, col_h)

    return ReconstructionState(depth_done, layers, boundary_err, halt, recovered)


def level_surface_for(fol: FoliationSpec, lev):
    from .geometry import level_surface

    return level_surface(fol.field, float(lev), np.zeros(2), dim=2)


def _image_inward_normal(metric, base_points):
    """Inward unit normal of an image curve given by ordered points on a
    closed loop (periodic spline tangent, metric-orthogonal complement)."""
    from scipy.interpolate import make_interp_spline

    m = base_points.shape[0]
    s = np.arange(m + 1, dtype=float)
    loop = np.vstack([base_points, base_points[:1]])
    spl = make_interp_spline(s, loop, k=3, axis=0, bc_type="periodic")
    tang = spl(s[:-1], nu=1)
    g = metric.eval(base_points)
    # solve g(n, t) = 0 with inward orientation (toward the origin)
    n_raw = np.stack([-tang[:, 1], tang[:, 0]], axis=-1)
    # metric-orthogonalize: n = n_raw - g(n_raw,t)/g(t,t) t
    gt = np.einsum("mij,mj->mi", g, tang)
    coef = (n_raw * gt).sum(1) / (tang * gt).sum(1)
    n_vec = n_raw - coef[:, None] * tang
    nrm = np.sqrt(np.einsum("mij,mi,mj->m", g, n_vec, n_vec))
    n_vec /= nrm[:, None]
    flip = (n_vec * base_points).sum(1) > 0
    n_vec[flip] *= -1.0
    return n_vec
