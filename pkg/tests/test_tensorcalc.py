import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import boundary_entry, random_interior_one_form

from lenslab import flow, geometry as geo
from lenslab import tensorcalc as tc

rng = np.random.default_rng(11)


def gaussian_scalar_and_gradient_form(dim=2):
    """v = d f for f = exp(-|x|^2): d^s v is then the Hessian of f."""
    def f_hess(p):
        p = np.asarray(p, float)
        e = np.exp(-np.sum(p * p, axis=-1))
        eye = np.eye(dim)
        return e[..., None, None] * (4.0 * p[..., :, None] * p[..., None, :] - 2.0 * eye)

    def v_val(p):
        p = np.asarray(p, float)
        return -2.0 * p * np.exp(-np.sum(p * p, axis=-1))[..., None]

    def v_der(p):
        return np.swapaxes(f_hess(p), -1, -2)

    return tc.CallableSymField(1, dim, v_val, v_der), f_hess


# ---------------------------------------------------------------------------
# sym_diff
# ---------------------------------------------------------------------------

def test_sym_diff_of_exact_form_is_hessian(euclid2):
    v, f_hess = gaussian_scalar_and_gradient_form()
    pts = rng.uniform(-0.7, 0.7, (25, 2))
    dsv = tc.sym_diff(v, euclid2)
    assert np.abs(dsv.value(pts) - f_hess(pts)).max() < 1e-12


def test_killing_field_symmetric_gradient_vanishes():
    # rotation generator d_theta on the round sphere patch is Killing
    m = geo.round_sphere_metric(1.0)
    phi = lambda r: np.sin(r)

    def v_val(p):
        p = np.asarray(p, float)
        out = np.zeros_like(p)
        out[..., 1] = phi(p[..., 0]) ** 2
        return out

    def v_der(p):
        p = np.asarray(p, float)
        out = np.zeros(p.shape[:-1] + (2, 2))
        out[..., 0, 1] = 2.0 * phi(p[..., 0]) * np.cos(p[..., 0])
        return out

    v = tc.CallableSymField(1, 2, v_val, v_der)
    dsv = tc.sym_diff(v, m)
    pts = np.stack([rng.uniform(0.4, 2.2, 30), rng.uniform(-2, 2, 30)], axis=-1)
    assert np.abs(dsv.value(pts)).max() < 1e-7


def test_sym_diff_matches_fd_covariant_oracle(herglotz2):
    v = random_interior_one_form(3)
    pts = rng.uniform(-0.5, 0.5, (20, 2))
    dsv = tc.sym_diff(v, herglotz2).value(pts)
    h = 1e-6
    dv = np.empty((20, 2, 2))
    for a in range(2):
        e = np.zeros(2)
        e[a] = h
        dv[:, a] = (v.value(pts + e) - v.value(pts - e)) / (2 * h)
    G = geo.christoffel(herglotz2, pts)
    oracle = 0.5 * (dv + np.swapaxes(dv, -1, -2)) - np.einsum(
        "...kij,...k->...ij", G, v.value(pts)
    )
    assert np.abs(dsv - oracle).max() < 1e-5


# ---------------------------------------------------------------------------
# conjugated variant
# ---------------------------------------------------------------------------

def xfield_coordinate(dim=2, axis=0, offset=1.5):
    """x(p) = offset + p[axis] as a ScalarField (positive on the chart)."""
    e = np.zeros(dim)
    e[axis] = 1.0
    return geo.linear_field(e, dim).shifted(offset)


def test_conjugated_sym_diff_reduces_at_zero(herglotz2):
    v = random_interior_one_form(5)
    xf = xfield_coordinate()
    pts = rng.uniform(-0.5, 0.5, (15, 2))
    a = tc.conjugated_sym_diff(v, herglotz2, 0.0, xf).value(pts)
    b = tc.sym_diff(v, herglotz2).value(pts)
    assert np.abs(a - b).max() < 1e-14


def test_conjugated_sym_diff_constant_form_flat(euclid2):
    # constant v: d^s v = 0 and the correction is the exact rank-one update
    v = tc.constant_tensor_field(np.array([0.7, -0.3]), dim=2)
    xf = xfield_coordinate()
    digamma = 1.3
    pts = rng.uniform(-0.5, 0.5, (15, 2))
    out = tc.conjugated_sym_diff(v, euclid2, digamma, xf).value(pts)
    x = xf.value(pts)
    dx = np.array([1.0, 0.0])
    vv = np.array([0.7, -0.3])
    sym = 0.5 * (np.outer(dx, vv) + np.outer(vv, dx))
    expected = -(digamma / x**2)[:, None, None] * sym
    assert np.abs(out - expected).max() < 1e-15


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_conjugation_identity_on_safe_region(seed):
    # e^{F/x} (conjugated result) = d^s (e^{F/x} v) where x >= 0.3
    m = geo.EuclideanMetric(2)
    v = random_interior_one_form(seed)
    xf = xfield_coordinate(offset=1.5)  # x in [0.5, 2.5] on the disk
    digamma = 0.8
    pts = rng.uniform(-0.45, 0.45, (10, 2))

    conj = tc.conjugated_sym_diff(v, m, digamma, xf).value(pts)
    lhs = np.exp(digamma / xf.value(pts))[:, None, None] * conj

    def ev(p):
        return np.exp(digamma / xf.value(p))[..., None] * v.value(p)

    w = tc.CallableSymField(1, 2, ev)
    rhs = tc.sym_diff(w, m).value(pts)
    assert np.abs(lhs - rhs).max() < 1e-9


# ---------------------------------------------------------------------------
# adjointness
# ---------------------------------------------------------------------------

def test_sym_diff_divergence_adjoint(herglotz2):
    v = random_interior_one_form(8)
    w_form, _ = gaussian_scalar_and_gradient_form()
    # symmetric 2-tensor test field: bump * constant matrix
    bump = tc.bump_scalar_field([0.1, -0.05], 0.7, 1.0, 2)
    M = np.array([[0.6, 0.2], [0.2, -0.4]])

    def W_val(p):
        return bump.value(p)[..., None, None] * M

    def W_der(p):
        return bump.deriv(p)[..., :, None, None] * M

    W = tc.CallableSymField(2, 2, W_val, W_der, mask=bump.support_mask)

    ax = np.linspace(-0.98, 0.98, 221)
    mesh = np.meshgrid(ax, ax, indexing="ij")
    pts = np.stack(mesh, axis=-1)
    g = herglotz2.eval(pts)
    gi = np.linalg.inv(g)
    vol = np.sqrt(np.linalg.det(g))
    dA = (ax[1] - ax[0]) ** 2

    dsv = tc.sym_diff(v, herglotz2).value(pts)
    dlw = tc.divergence_sym(W, herglotz2).value(pts)
    lhs = np.sum(
        np.einsum("...ik,...jl,...ij,...kl->...", gi, gi, dsv, W_val(pts)) * vol
    ) * dA
    rhs = np.sum(
        np.einsum("...ij,...i,...j->...", gi, v.value(pts), dlw) * vol
    ) * dA
    assert abs(lhs - rhs) < 1e-5 * max(1.0, abs(lhs))


# ---------------------------------------------------------------------------
# along-ray identities
# ---------------------------------------------------------------------------

def test_ftc_zero_field(herglotz2):
    v = tc.constant_tensor_field(np.zeros(2), dim=2)
    z = boundary_entry(herglotz2, 0.3, 0.4)
    path = flow.integrate_ray(herglotz2, z)
    assert tc.ftc_along_ray(v, herglotz2, path) < 1e-15


def test_interior_form_annihilation(herglotz2):
    # I(d^s v) = 0 for v supported away from the ray endpoints
    from lenslab.xray import xray

    v = random_interior_one_form(13)
    dsv = tc.sym_diff(v, herglotz2)
    for k in range(10):
        z = boundary_entry(herglotz2, rng.uniform(0, 2 * np.pi), rng.uniform(-1.0, 1.0))
        path = flow.integrate_ray(herglotz2, z)
        assert abs(xray(dsv, path, order=256)) < 1e-7


def test_ftc_residual_random_rays(herglotz2):
    v = random_interior_one_form(21)
    worst = 0.0
    for k in range(50):
        z = boundary_entry(herglotz2, rng.uniform(0, 2 * np.pi), rng.uniform(-1.1, 1.1))
        path = flow.integrate_ray(herglotz2, z)
        worst = max(worst, tc.ftc_along_ray(v, herglotz2, path, n_check=17, quad_order=160))
    assert worst < 1e-6


def test_ftc_convergence_order(herglotz2):
    # residual decays at least like order^{-4} under quadrature refinement
    v = random_interior_one_form(34)
    z = boundary_entry(herglotz2, 1.2, 0.5)
    path = flow.integrate_ray(herglotz2, z)
    res = [tc.ftc_along_ray(v, herglotz2, path, n_check=7, quad_order=q)
           for q in (16, 32, 64)]
    assert res[2] < res[0] * (16.0 / 64.0) ** 4 * 1.5 + 1e-12


def test_pointwise_transport_derivative(herglotz2):
    v = random_interior_one_form(55)
    z = boundary_entry(herglotz2, 2.6, -0.7)
    path = flow.integrate_ray(herglotz2, z)
    assert tc.ray_derivative_residual(v, herglotz2, path) < 1e-6


# ---------------------------------------------------------------------------
# normal gauge reduction
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def herglotz_collar():
    m = geo.ConformalMetric(geo.herglotz_profile(0.2), 2)
    surf = geo.sphere_surface(0.9, dim=2)
    return m, geo.build_normal_gauge(m, surf, 0.15, ny=96, nt=25)


def collar_xfun(collar, offset=0.75):
    t0 = collar.t_grid[0]
    x_of_t = lambda t: offset - (np.asarray(t) - t0)
    dx_of_t = lambda t: -np.ones_like(np.asarray(t))
    return x_of_t, dx_of_t


def test_reduce_zero_input(herglotz_collar):
    _, collar = herglotz_collar
    nt, ny = collar.t_grid.size, collar.y_axes[0].size
    u = tc.GaugeSplit(collar, np.zeros((nt, ny)), np.zeros((nt, ny, 1)),
                      np.zeros((nt, ny, 1, 1)))
    vN, vT = tc.normal_gauge_reduce(u, 1.0, x_of_t=collar_xfun(collar))
    assert np.abs(vN).max() < 1e-14 and np.abs(vT).max() < 1e-14


def forward_generated_split(collar, digamma, xfun, seed=2):
    """u = d^s_F w for a one-form w vanishing at the outer collar face."""
    r = np.random.default_rng(seed)
    t0 = collar.t_grid[0]
    w_amp = r.uniform(0.5, 1.0, 2)
    k = r.integers(1, 3)

    cm = collar.as_metric()
    x_of_t, dx_of_t = xfun
    xf = geo.ScalarField(
        lambda q: x_of_t(np.asarray(q, float)[..., 0]),
        lambda q: np.stack(
            [dx_of_t(np.asarray(q, float)[..., 0]),
             np.zeros(np.asarray(q).shape[:-1])], axis=-1),
        None,
    )

    def w_val(q):
        q = np.asarray(q, float)
        t, y = q[..., 0], q[..., 1]
        s = (t - t0) ** 2
        return np.stack(
            [w_amp[0] * s * np.cos(k * y), w_amp[1] * s * np.sin(k * y)], axis=-1
        )

    def w_der(q):
        q = np.asarray(q, float)
        t, y = q[..., 0], q[..., 1]
        s = t - t0
        out = np.zeros(q.shape[:-1] + (2, 2))
        out[..., 0, 0] = 2 * w_amp[0] * s * np.cos(k * y)
        out[..., 0, 1] = 2 * w_amp[1] * s * np.sin(k * y)
        out[..., 1, 0] = -w_amp[0] * s**2 * k * np.sin(k * y)
        out[..., 1, 1] = w_amp[1] * s**2 * k * np.cos(k * y)
        return out

    w = tc.CallableSymField(1, 2, w_val, w_der)
    u_field = tc.conjugated_sym_diff(w, cm, digamma, xf)
    mesh_t, mesh_y = np.meshgrid(collar.t_grid, collar.y_axes[0], indexing="ij")
    q = np.stack([mesh_t, mesh_y], axis=-1)
    return tc.GaugeSplit.from_components(collar, u_field.value(q)), w, q


def test_reduce_forward_generated(herglotz_collar):
    _, collar = herglotz_collar
    digamma = 1.0
    xfun = collar_xfun(collar)
    u, w, q = forward_generated_split(collar, digamma, xfun)
    vN, vT = tc.normal_gauge_reduce(u, digamma, x_of_t=xfun, n_substeps=16)
    w_grid = w.value(q)
    assert np.abs(vN + w_grid[..., 0]).max() < 1e-6
    assert np.abs(vT + w_grid[..., 1]).max() < 1e-6
    res_nn, res_nt = tc.gauge_residual(u, vN, vT, digamma, x_of_t=xfun)
    assert res_nn < 1e-6 and res_nt < 1e-6


def test_reduce_linearity(herglotz_collar):
    _, collar = herglotz_collar
    digamma = 1.0
    xfun = collar_xfun(collar)
    u1, _, _ = forward_generated_split(collar, digamma, xfun, seed=3)
    u2, _, _ = forward_generated_split(collar, digamma, xfun, seed=4)
    u12 = tc.GaugeSplit(collar, u1.nn + u2.nn, u1.nt + u2.nt, u1.tt + u2.tt)
    a = tc.normal_gauge_reduce(u1, digamma, x_of_t=xfun)
    b = tc.normal_gauge_reduce(u2, digamma, x_of_t=xfun)
    c = tc.normal_gauge_reduce(u12, digamma, x_of_t=xfun)
    assert np.abs(c[0] - a[0] - b[0]).max() < 1e-10
    assert np.abs(c[1] - a[1] - b[1]).max() < 1e-10


def test_one_dimensional_integrating_factor_toy(euclid2):
    # flat collar, y-independent data: the normal ODE has the explicit
    # integrating-factor solution through e^{-F/x}
    surf = geo.plane_surface(axis=0, level=0.0, dim=2, extent=0.8)
    collar = geo.build_normal_gauge(euclid2, surf, 0.3, ny=17, nt=41)
    t_grid = collar.t_grid
    ny = collar.y_axes[0].size
    digamma = 0.9
    x0 = 1.1
    t0 = t_grid[0]
    x_of_t = lambda t: x0 - (np.asarray(t) - t0)
    dx_of_t = lambda t: -np.ones_like(np.asarray(t))

    # u chosen so the closed form is elementary: u(t) = e^{-F/x(t)} p(t)
    p_coef = (0.7, -0.3, 0.4)

    def p(t):
        return p_coef[0] + p_coef[1] * (t - t0) + p_coef[2] * (t - t0) ** 2

    def P(t):
        s = t - t0
        return p_coef[0] * s + p_coef[1] * s**2 / 2 + p_coef[2] * s**3 / 3

    u_nn = np.exp(-digamma / x_of_t(t_grid))[:, None] * p(t_grid)[:, None]
    u_nn = np.broadcast_to(u_nn, (t_grid.size, ny)).copy()
    u = tc.GaugeSplit(collar, u_nn, np.zeros((t_grid.size, ny, 1)),
                      np.zeros((t_grid.size, ny, 1, 1)))
    vN, _ = tc.normal_gauge_reduce(u, digamma, x_of_t=(x_of_t, dx_of_t),
                                   n_substeps=24)
    exact = -np.exp(-digamma / x_of_t(t_grid)) * P(t_grid)
    assert np.abs(vN - exact[:, None]).max() < 1e-8
