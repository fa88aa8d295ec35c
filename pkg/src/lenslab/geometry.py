"""Metric models, Christoffel symbols, second fundamental forms, and
normal-gauge (semigeodesic) collar construction.

All point-valued APIs are vectorized: a "point" argument accepts any array
of shape (..., n) and tensor results gain the corresponding leading axes.
Derivative index conventions:

    deriv(p)[..., a, i, j]      = d_a g_ij
    deriv2(p)[..., a, b, i, j]  = d_a d_b g_ij
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import NdBSpline, make_interp_spline

from .errors import CollarFoldError, DomainError, MetricError

EPS_PD = 1e-8  # positive-definiteness floor; violating metrics are rejected


# ---------------------------------------------------------------------------
# Scalar fields
# ---------------------------------------------------------------------------

class ScalarField:
    """Smooth scalar function with gradient and Hessian callables.

    value/grad/hess accept (..., n) arrays and return (...,), (..., n),
    (..., n, n).
    """

    def __init__(self, value, grad, hess, name=""):
        self.value = value
        self.grad = grad
        self.hess = hess
        self.name = name

    def shifted(self, offset):
        return ScalarField(
            lambda p: self.value(p) + offset,
            self.grad,
            self.hess,
            name=f"{self.name}{offset:+g}",
        )


def radius_squared_field(center=None, dim=2):
    """f(p) = |p - center|^2 / 2; spheres as level sets, Hess = identity."""
    c = np.zeros(dim) if center is None else np.asarray(center, float)

    def value(p):
        d = np.asarray(p, float) - c
        return 0.5 * np.sum(d * d, axis=-1)

    def grad(p):
        return np.asarray(p, float) - c

    def hess(p):
        p = np.asarray(p, float)
        return np.broadcast_to(np.eye(p.shape[-1]), p.shape + (p.shape[-1],)).copy()

    return ScalarField(value, grad, hess, name="|x|^2/2")


def radial_coordinate_field(center=None, dim=2):
    """f(p) = |p - center|; smooth away from the center."""
    c = np.zeros(dim) if center is None else np.asarray(center, float)

    def value(p):
        d = np.asarray(p, float) - c
        return np.sqrt(np.sum(d * d, axis=-1))

    def grad(p):
        d = np.asarray(p, float) - c
        r = np.sqrt(np.sum(d * d, axis=-1))
        return d / r[..., None]

    def hess(p):
        d = np.asarray(p, float) - c
        n = d.shape[-1]
        r2 = np.sum(d * d, axis=-1)
        r = np.sqrt(r2)
        eye = np.eye(n)
        return (eye - d[..., :, None] * d[..., None, :] / r2[..., None, None]) / r[..., None, None]

    return ScalarField(value, grad, hess, name="|x|")


def linear_field(normal, dim=2):
    """f(p) = <normal, p>; hyperplanes as level sets."""
    a = np.asarray(normal, float)

    def value(p):
        return np.sum(np.asarray(p, float) * a, axis=-1)

    def grad(p):
        p = np.asarray(p, float)
        return np.broadcast_to(a, p.shape).copy()

    def hess(p):
        p = np.asarray(p, float)
        n = p.shape[-1]
        return np.zeros(p.shape + (n,))

    return ScalarField(value, grad, hess, name="<a,x>")


# ---------------------------------------------------------------------------
# Charts
# ---------------------------------------------------------------------------

class Chart:
    """A coordinate box carrying a boundary-defining function.

    ``boundary`` is a ScalarField positive in the manifold interior, zero on
    the boundary of M. The box bounds clip the working region of grid
    metrics and ray integration.
    """

    def __init__(self, dim, lo, hi, boundary: ScalarField):
        self.dim = dim
        self.lo = np.asarray(lo, float)
        self.hi = np.asarray(hi, float)
        self.boundary = boundary

    def contains(self, p, slack=0.0):
        p = np.asarray(p, float)
        inside_box = np.all((p >= self.lo - slack) & (p <= self.hi + slack), axis=-1)
        return inside_box & (self.boundary.value(p) >= -slack)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.hi - self.lo))


def disk_chart(radius=1.0, dim=2):
    """Chart for the closed ball |x| <= radius; boundary function R^2 - |x|^2."""
    r2 = radius * radius

    def value(p):
        p = np.asarray(p, float)
        return r2 - np.sum(p * p, axis=-1)

    def grad(p):
        return -2.0 * np.asarray(p, float)

    def hess(p):
        p = np.asarray(p, float)
        n = p.shape[-1]
        return np.broadcast_to(-2.0 * np.eye(n), p.shape + (n,)).copy()

    rho = ScalarField(value, grad, hess, name="R^2-|x|^2")
    ext = 1.5 * radius
    return Chart(dim, -ext * np.ones(dim), ext * np.ones(dim), rho)


def box_chart(lo, hi, boundary=None):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dim = lo.size
    if boundary is None:
        # distance-like product function, positive inside the open box
        def value(p):
            p = np.asarray(p, float)
            return np.min(np.minimum(p - lo, hi - p), axis=-1)

        boundary = ScalarField(value, None, None, name="box")
    return Chart(dim, lo, hi, boundary)


# ---------------------------------------------------------------------------
# Metric models
# ---------------------------------------------------------------------------

def _sym_inv(g):
    """Inverse of batched symmetric 2x2 / 3x3 matrices by explicit cofactors
    (the hot path of ray integration); falls back to linalg.inv otherwise."""
    n = g.shape[-1]
    if n == 2:
        a, b, d = g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]
        det = a * d - b * b
        out = np.empty_like(g)
        out[..., 0, 0] = d / det
        out[..., 1, 1] = a / det
        out[..., 0, 1] = -b / det
        out[..., 1, 0] = out[..., 0, 1]
        return out
    if n == 3:
        a, b, c = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
        d, e, f = g[..., 1, 1], g[..., 1, 2], g[..., 2, 2]
        A = d * f - e * e
        B = c * e - b * f
        C = b * e - c * d
        det = a * A + b * B + c * C
        out = np.empty_like(g)
        out[..., 0, 0] = A / det
        out[..., 0, 1] = B / det
        out[..., 0, 2] = C / det
        out[..., 1, 1] = (a * f - c * c) / det
        out[..., 1, 2] = (b * c - a * e) / det
        out[..., 2, 2] = (a * d - b * b) / det
        out[..., 1, 0] = out[..., 0, 1]
        out[..., 2, 0] = out[..., 0, 2]
        out[..., 2, 1] = out[..., 1, 2]
        return out
    return np.linalg.inv(g)


class MetricModel:
    """Base Riemannian metric over a chart.

    Subclasses implement eval/deriv/deriv2 (batched). Inverse-metric
    derivatives are provided generically:

        d_a g^{ij}     = -(g^{-1} d_a g g^{-1})^{ij}
        d_a d_b g^{ij} = -(g^{-1} d_ad_b g g^{-1})^{ij}
                         + (g^{-1} d_a g g^{-1} d_b g g^{-1})^{ij}
                         + (g^{-1} d_b g g^{-1} d_a g g^{-1})^{ij}
    """

    dim: int
    chart: Chart

    def eval(self, p):
        raise NotImplementedError

    def deriv(self, p):
        raise NotImplementedError

    def deriv2(self, p):
        raise NotImplementedError

    # -- derived quantities -------------------------------------------------

    def inverse(self, p):
        return _sym_inv(self.eval(p))

    def inverse_deriv(self, p):
        gi = self.inverse(p)
        dg = self.deriv(p)
        gi_b = gi[..., None, :, :]
        return -(gi_b @ dg @ gi_b)

    def inverse_deriv2(self, p):
        gi = self.inverse(p)
        dg = self.deriv(p)
        d2g = self.deriv2(p)
        gi_b = gi[..., None, :, :]
        gi_bb = gi[..., None, None, :, :]
        dgi = -(gi_b @ dg @ gi_b)
        t0 = -(gi_bb @ d2g @ gi_bb)
        t1 = -dgi[..., :, None, :, :] @ dg[..., None, :, :, :] @ gi_bb
        t2 = np.swapaxes(t1, -4, -3)
        return t0 + t1 + t2

    def inv_bundle(self, p):
        """(g^{-1}, d g^{-1}): the first-order flow bundle; overridable to
        share work between eval and deriv."""
        gi = _sym_inv(self.eval(p))
        dg = self.deriv(p)
        gi_b = gi[..., None, :, :]
        return gi, -(gi_b @ dg @ gi_b)

    def inv_bundle2(self, p):
        """(g^{-1}, d g^{-1}, d^2 g^{-1}): the variational-flow bundle."""
        gi = _sym_inv(self.eval(p))
        dg = self.deriv(p)
        d2g = self.deriv2(p)
        gi_b = gi[..., None, :, :]
        gi_bb = gi[..., None, None, :, :]
        dgi = -(gi_b @ dg @ gi_b)
        t0 = -(gi_bb @ d2g @ gi_bb)
        t1 = -dgi[..., :, None, :, :] @ dg[..., None, :, :, :] @ gi_bb
        d2gi = t0 + t1 + np.swapaxes(t1, -4, -3)
        return gi, dgi, d2gi

    def norm(self, p, v):
        """Norm of a tangent vector v at p."""
        g = self.eval(p)
        return np.sqrt(np.einsum("...ij,...i,...j->...", g, v, v))

    def conorm(self, p, xi):
        """Norm of a covector xi at p."""
        gi = self.inverse(p)
        return np.sqrt(np.einsum("...ij,...i,...j->...", gi, xi, xi))

    def check_positive(self, sample_points):
        w = np.linalg.eigvalsh(self.eval(sample_points))
        wmin = float(w.min())
        if wmin < EPS_PD:
            raise MetricError(
                f"metric loses positive definiteness: min eigenvalue {wmin:.3e}"
            )

    def wave_speed_bounds(self, sample_points):
        w = np.linalg.eigvalsh(self.eval(sample_points))
        # unit-speed rays move at |dx/dt| between these Euclidean speeds
        return float(1.0 / np.sqrt(w.max())), float(1.0 / np.sqrt(w.min()))


class EuclideanMetric(MetricModel):
    def __init__(self, dim=2, chart=None):
        self.dim = dim
        self.chart = chart if chart is not None else disk_chart(1.0, dim)

    def eval(self, p):
        p = np.asarray(p, float)
        return np.broadcast_to(np.eye(self.dim), p.shape[:-1] + (self.dim, self.dim)).copy()

    def deriv(self, p):
        p = np.asarray(p, float)
        return np.zeros(p.shape[:-1] + (self.dim,) * 3)

    def deriv2(self, p):
        p = np.asarray(p, float)
        return np.zeros(p.shape[:-1] + (self.dim,) * 4)


class IsotropicProfile:
    """Sound speed c(x) = C(s) with s = |x - center|^2, C given with two
    derivatives. Smooth at the center by construction."""

    def __init__(self, C, dC, d2C, center=None, name="c"):
        self.C, self.dC, self.d2C = C, dC, d2C
        self.center = center
        self.name = name

    def _s(self, p):
        p = np.asarray(p, float)
        if self.center is not None:
            p = p - self.center
        return p, np.sum(p * p, axis=-1)

    def value(self, p):
        _, s = self._s(p)
        return self.C(s)

    def grad(self, p):
        d, s = self._s(p)
        return 2.0 * self.dC(s)[..., None] * d

    def hess(self, p):
        d, s = self._s(p)
        n = d.shape[-1]
        eye = np.eye(n)
        return (
            2.0 * self.dC(s)[..., None, None] * eye
            + 4.0 * self.d2C(s)[..., None, None] * d[..., :, None] * d[..., None, :]
        )

    def radial(self, r):
        """c as a function of the radius (center-based profiles)."""
        r = np.asarray(r, float)
        return self.C(r * r)

    def radial_deriv(self, r):
        r = np.asarray(r, float)
        return 2.0 * r * self.dC(r * r)


def herglotz_profile(a=0.2):
    """c(r) = 1 + a (1 - r^2). Satisfies the Herglotz condition on the unit
    ball for moderate a > 0."""
    return IsotropicProfile(
        lambda s: 1.0 + a * (1.0 - s),
        lambda s: np.full(np.shape(s), -a),
        lambda s: np.zeros(np.shape(s)),
        name=f"herglotz(a={a:g})",
    )


def gaussian_speed_profile(amp, sigma, center=None):
    """c(r) = 1 + amp * exp(-r^2 / (2 sigma^2))."""
    k = 1.0 / (2.0 * sigma * sigma)
    return IsotropicProfile(
        lambda s: 1.0 + amp * np.exp(-k * s),
        lambda s: -amp * k * np.exp(-k * s),
        lambda s: amp * k * k * np.exp(-k * s),
        center=center,
        name=f"gauss(amp={amp:g},sigma={sigma:g})",
    )


def exponential_profile(b=1.0):
    """c(r) = exp(b r^2); violates the Herglotz condition where 2 b r^2 > 1."""
    return IsotropicProfile(
        lambda s: np.exp(b * s),
        lambda s: b * np.exp(b * s),
        lambda s: b * b * np.exp(b * s),
        name=f"exp(b={b:g})",
    )


class AffineProfile:
    """Sound speed c(x) = c0 + <a, x> (not radial; for plumbing tests)."""

    def __init__(self, a, c0=1.0):
        self.a = np.asarray(a, float)
        self.c0 = float(c0)
        self.name = "affine"

    def value(self, p):
        return self.c0 + np.sum(np.asarray(p, float) * self.a, axis=-1)

    def grad(self, p):
        p = np.asarray(p, float)
        return np.broadcast_to(self.a, p.shape).copy()

    def hess(self, p):
        p = np.asarray(p, float)
        n = p.shape[-1]
        return np.zeros(p.shape + (n,))


class ConformalMetric(MetricModel):
    """g_ij = c(x)^{-2} delta_ij for an isotropic speed profile c."""

    def __init__(self, profile: IsotropicProfile, dim=2, chart=None):
        self.profile = profile
        self.dim = dim
        self.chart = chart if chart is not None else disk_chart(1.0, dim)
        probe = np.random.default_rng(0).uniform(self.chart.lo, self.chart.hi, (64, dim))
        self.check_positive(probe)

    def eval(self, p):
        c = self.profile.value(p)
        eye = np.eye(self.dim)
        return eye / (c * c)[..., None, None]

    def deriv(self, p):
        c = self.profile.value(p)
        dc = self.profile.grad(p)
        eye = np.eye(self.dim)
        return (-2.0 / c**3)[..., None, None, None] * dc[..., :, None, None] * eye

    def deriv2(self, p):
        c = self.profile.value(p)
        dc = self.profile.grad(p)
        d2c = self.profile.hess(p)
        eye = np.eye(self.dim)
        coef = (
            6.0 / c[..., None, None] ** 4 * dc[..., :, None] * dc[..., None, :]
            - 2.0 / c[..., None, None] ** 3 * d2c
        )
        return coef[..., :, :, None, None] * eye


class WarpedPolarMetric(MetricModel):
    """g = d rho^2 + phi(rho)^2 d theta^2 on a (rho, theta) strip.

    With phi(rho) = a sin(rho / a) this is the round sphere of curvature
    1/a^2 in geodesic polar coordinates.
    """

    def __init__(self, phi, dphi, d2phi, rho_range=(0.1, 3.0), chart=None):
        self.phi, self.dphi, self.d2phi = phi, dphi, d2phi
        self.dim = 2
        if chart is None:
            lo = [rho_range[0], -10.0]
            hi = [rho_range[1], 10.0]

            def value(p):
                p = np.asarray(p, float)
                return np.minimum(p[..., 0] - rho_range[0], rho_range[1] - p[..., 0])

            chart = Chart(2, lo, hi, ScalarField(value, None, None, "strip"))
        self.chart = chart

    def eval(self, p):
        p = np.asarray(p, float)
        f = self.phi(p[..., 0])
        g = np.zeros(p.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = f * f
        return g

    def deriv(self, p):
        p = np.asarray(p, float)
        rho = p[..., 0]
        d = np.zeros(p.shape[:-1] + (2, 2, 2))
        d[..., 0, 1, 1] = 2.0 * self.phi(rho) * self.dphi(rho)
        return d

    def deriv2(self, p):
        p = np.asarray(p, float)
        rho = p[..., 0]
        d2 = np.zeros(p.shape[:-1] + (2, 2, 2, 2))
        d2[..., 0, 0, 1, 1] = 2.0 * (
            self.dphi(rho) ** 2 + self.phi(rho) * self.d2phi(rho)
        )
        return d2


def round_sphere_metric(curvature=1.0, rho_range=(0.1, 3.0)):
    a = 1.0 / np.sqrt(curvature)
    return WarpedPolarMetric(
        lambda r: a * np.sin(r / a),
        lambda r: np.cos(r / a),
        lambda r: -np.sin(r / a) / a,
        rho_range=rho_range,
    )


# ---------------------------------------------------------------------------
# Interior diffeomorphisms and pullback metrics
# ---------------------------------------------------------------------------

class BumpDiffeo:
    """psi(x) = x + sum_k a_k * b_k(x), with b_k compactly supported bumps
    b(x) = exp(-s/(1-s)), s = |x - x0|^2 / R^2.

    Exactly the identity outside the bump supports, so the pullback of a
    metric under psi has identical lens data through the untouched region.
    Derivatives up to third order are closed-form.
    """

    def __init__(self, dim, centers, radii, amplitudes):
        self.dim = dim
        self.centers = [np.asarray(c, float) for c in centers]
        self.radii = [float(r) for r in radii]
        self.amps = [np.asarray(a, float) for a in amplitudes]
        # crude sup-norm bound of the displacement Jacobian keeps psi invertible
        for a, r in zip(self.amps, self.radii):
            if np.linalg.norm(a) / r > 0.2:
                raise ValueError("bump amplitude too large for a safe diffeomorphism")

    @staticmethod
    def _bump(s):
        out = np.zeros_like(s)
        m = s < 1.0 - 1e-12
        sm = s[m]
        out[m] = np.exp(-sm / (1.0 - sm))
        return out

    @staticmethod
    def _bump_derivs(s):
        """f, f', f'', f''' of f(s) = exp(-s/(1-s)) on s < 1 (0 beyond)."""
        f = BumpDiffeo._bump(s)
        u = np.zeros_like(s)
        m = s < 1.0 - 1e-12
        u[m] = 1.0 / (1.0 - s[m])
        f1 = -f * u**2
        f2 = f * (u**4 - 2.0 * u**3)
        f3 = f * (-(u**6) + 6.0 * u**5 - 6.0 * u**4)
        return f, f1, f2, f3

    def _terms(self, p):
        p = np.asarray(p, float)
        for c, r, a in zip(self.centers, self.radii, self.amps):
            d = (p - c) / r
            s = np.sum(d * d, axis=-1)
            yield d / r, s, a, 1.0 / (r * r)  # ds/dx = 2 (x - c) / R^2

    def value(self, p):
        p = np.asarray(p, float)
        out = p.copy()
        for dr, s, a, _ in self._terms(p):
            out = out + self._bump(s)[..., None] * a
        return out

    def jacobian(self, p):
        """J[..., k, i] = d psi^k / d x^i."""
        p = np.asarray(p, float)
        n = self.dim
        J = np.broadcast_to(np.eye(n), p.shape[:-1] + (n, n)).copy()
        for dr, s, a, _ in self._terms(p):
            _, f1, _, _ = self._bump_derivs(s)
            ds = 2.0 * dr  # (..., i)
            J = J + f1[..., None, None] * a[:, None] * ds[..., None, :]
        return J

    def jacobian_deriv(self, p):
        """D2[..., k, i, j] = d^2 psi^k / d x^i d x^j."""
        p = np.asarray(p, float)
        n = self.dim
        D2 = np.zeros(p.shape[:-1] + (n, n, n))
        eye = np.eye(n)
        for dr, s, a, inv_r2 in self._terms(p):
            _, f1, f2, _ = self._bump_derivs(s)
            ds = 2.0 * dr
            d2s = 2.0 * inv_r2 * eye
            term = (
                f2[..., None, None] * ds[..., :, None] * ds[..., None, :]
                + f1[..., None, None] * d2s
            )
            D2 = D2 + a[:, None, None] * term[..., None, :, :]
        return D2

    def jacobian_deriv2(self, p):
        """D3[..., k, i, j, l] = d^3 psi^k / d x^i d x^j d x^l."""
        p = np.asarray(p, float)
        n = self.dim
        D3 = np.zeros(p.shape[:-1] + (n, n, n, n))
        eye = np.eye(n)
        for dr, s, a, inv_r2 in self._terms(p):
            _, f1, f2, f3 = self._bump_derivs(s)
            ds = 2.0 * dr
            d2s = 2.0 * inv_r2 * eye
            t3 = f3[..., None, None, None] * (
                ds[..., :, None, None] * ds[..., None, :, None] * ds[..., None, None, :]
            )
            t2 = f2[..., None, None, None] * (
                d2s[..., :, :, None] * ds[..., None, None, :]
                + d2s[..., :, None, :] * ds[..., None, :, None]
                + ds[..., :, None, None] * d2s[..., None, :, :]
            )
            D3 = D3 + a[:, None, None, None] * (t3 + t2)[..., None, :, :, :]
        return D3

    def stack(self, p):
        """(psi, J, DJ, D2J) in one pass over the bumps (the pullback
        metric's derivative bundle calls this instead of four separate
        traversals)."""
        p = np.asarray(p, float)
        n = self.dim
        eye = np.eye(n)
        psi = p.copy()
        J = np.broadcast_to(eye, p.shape[:-1] + (n, n)).copy()
        D2 = np.zeros(p.shape[:-1] + (n, n, n))
        D3 = np.zeros(p.shape[:-1] + (n, n, n, n))
        for dr, s, a, inv_r2 in self._terms(p):
            f, f1, f2, f3 = self._bump_derivs(s)
            ds = 2.0 * dr
            d2s = 2.0 * inv_r2 * eye
            psi += f[..., None] * a
            J += f1[..., None, None] * a[:, None] * ds[..., None, :]
            term2 = (f2[..., None, None] * ds[..., :, None] * ds[..., None, :]
                     + f1[..., None, None] * d2s)
            D2 += a[:, None, None] * term2[..., None, :, :]
            t3 = f3[..., None, None, None] * (
                ds[..., :, None, None] * ds[..., None, :, None] * ds[..., None, None, :]
            )
            t2 = f2[..., None, None, None] * (
                d2s[..., :, :, None] * ds[..., None, None, :]
                + d2s[..., :, None, :] * ds[..., None, :, None]
                + ds[..., :, None, None] * d2s[..., None, :, :]
            )
            D3 += a[:, None, None, None] * (t3 + t2)[..., None, :, :, :]
        return psi, J, D2, D3

    def inverse(self, q, tol=1e-13, maxit=60):
        """Invert by Newton iteration; psi is a small displacement of the identity."""
        q = np.asarray(q, float)
        x = q.copy()
        for _ in range(maxit):
            r = self.value(x) - q
            if np.max(np.abs(r)) < tol:
                break
            J = self.jacobian(x)
            x = x - np.linalg.solve(J, r[..., None])[..., 0]
        return x

    def pushforward_ray(self, x, xi):
        """Map a phase point of psi* g to the corresponding one of g:
        (x, xi) -> (psi(x), J^{-T} xi)."""
        J = self.jacobian(x)
        return self.value(x), np.linalg.solve(np.swapaxes(J, -1, -2), xi[..., None])[..., 0]

    def pullback_ray(self, y, eta):
        """Inverse of pushforward_ray."""
        x = self.inverse(y)
        J = self.jacobian(x)
        return x, np.einsum("...ki,...k->...i", J, eta)


class PullbackMetric(MetricModel):
    """(psi* g)_ij(x) = J^k_i g_kl(psi x) J^l_j with J = D psi."""

    def __init__(self, base: MetricModel, diffeo: BumpDiffeo):
        self.base = base
        self.diffeo = diffeo
        self.dim = base.dim
        self.chart = base.chart

    def _gderivs2(self, p):
        """(g, dg, d2g) with the diffeo stack and base-metric derivatives
        computed once (the variational flow evaluates this per RK stage)."""
        psi, J, DJ, D2J = self.diffeo.stack(p)
        g = self.base.eval(psi)
        dg = self.base.deriv(psi)
        d2g = self.base.deriv2(psi)
        val = np.einsum("...ki,...kl,...lj->...ij", J, g, J, optimize=True)
        dgc = np.einsum("...mkl,...ma->...akl", dg, J, optimize=True)
        t_left = np.einsum("...kia,...kl,...lj->...aij", DJ, g, J, optimize=True)
        first = t_left + np.swapaxes(t_left, -1, -2) \
            + np.einsum("...ki,...akl,...lj->...aij", J, dgc, J, optimize=True)
        d2gc = (
            np.einsum("...mnkl,...ma,...nb->...abkl", d2g, J, J, optimize=True)
            + np.einsum("...mkl,...mab->...abkl", dg, DJ, optimize=True)
        )
        out = np.einsum("...kiab,...kl,...lj->...abij", D2J, g, J, optimize=True)
        out += np.einsum("...ki,...kl,...ljab->...abij", J, g, D2J, optimize=True)
        tmp = np.einsum("...kia,...kl,...ljb->...abij", DJ, g, DJ, optimize=True)
        out += tmp + np.swapaxes(tmp, -4, -3)
        tmp2 = np.einsum("...kia,...bkl,...lj->...abij", DJ, dgc, J, optimize=True)
        out += tmp2 + np.swapaxes(tmp2, -4, -3)
        tmp3 = np.einsum("...ki,...akl,...ljb->...abij", J, dgc, DJ, optimize=True)
        out += tmp3 + np.swapaxes(tmp3, -4, -3)
        out += np.einsum("...ki,...abkl,...lj->...abij", J, d2gc, J, optimize=True)
        return val, first, out

    def inv_bundle(self, p):
        psi, J, _, _ = self.diffeo.stack(p)
        g = self.base.eval(psi)
        dg = self.base.deriv(psi)
        val = np.einsum("...ki,...kl,...lj->...ij", J, g, J, optimize=True)
        # reuse the generic first-derivative assembly
        dgc = np.einsum("...mkl,...ma->...akl", dg, J, optimize=True)
        DJ = self.diffeo.jacobian_deriv(p)
        t_left = np.einsum("...kia,...kl,...lj->...aij", DJ, g, J, optimize=True)
        first = t_left + np.swapaxes(t_left, -1, -2) \
            + np.einsum("...ki,...akl,...lj->...aij", J, dgc, J, optimize=True)
        gi = _sym_inv(val)
        gi_b = gi[..., None, :, :]
        return gi, -(gi_b @ first @ gi_b)

    def inv_bundle2(self, p):
        g, dg, d2g = self._gderivs2(p)
        gi = _sym_inv(g)
        gi_b = gi[..., None, :, :]
        gi_bb = gi[..., None, None, :, :]
        dgi = -(gi_b @ dg @ gi_b)
        t0 = -(gi_bb @ d2g @ gi_bb)
        t1 = -dgi[..., :, None, :, :] @ dg[..., None, :, :, :] @ gi_bb
        return gi, dgi, t0 + t1 + np.swapaxes(t1, -4, -3)

    def eval(self, p):
        psi = self.diffeo.value(p)
        J = self.diffeo.jacobian(p)
        g = self.base.eval(psi)
        return np.einsum("...ki,...kl,...lj->...ij", J, g, J, optimize=True)

    def deriv(self, p):
        psi = self.diffeo.value(p)
        J = self.diffeo.jacobian(p)      # (...,k,i)
        DJ = self.diffeo.jacobian_deriv(p)  # (...,k,i,a) as (k,i,j) -> use axes
        g = self.base.eval(psi)
        dg = self.base.deriv(psi)        # (...,m,k,l) = d_m g_kl at psi(p)
        # chain rule: d_a [g_kl(psi)] = (d_m g_kl)(psi) J^m_a
        dg_chain = np.einsum("...mkl,...ma->...akl", dg, J, optimize=True)
        t_mid = np.einsum("...ki,...akl,...lj->...aij", J, dg_chain, J, optimize=True)
        t_left = np.einsum("...kia,...kl,...lj->...aij", DJ, g, J, optimize=True)
        t_right = np.einsum("...ki,...kl,...lja->...aij", J, g, DJ, optimize=True)
        return t_left + t_mid + t_right

    def deriv2(self, p):
        psi = self.diffeo.value(p)
        J = self.diffeo.jacobian(p)
        DJ = self.diffeo.jacobian_deriv(p)     # (...,k,i,a)
        D2J = self.diffeo.jacobian_deriv2(p)   # (...,k,i,a,b)
        g = self.base.eval(psi)
        dg = self.base.deriv(psi)
        d2g = self.base.deriv2(psi)
        dgc = np.einsum("...mkl,...ma->...akl", dg, J, optimize=True)
        d2gc = (
            np.einsum("...mnkl,...ma,...nb->...abkl", d2g, J, J, optimize=True)
            + np.einsum("...mkl,...mab->...abkl", dg, DJ, optimize=True)
        )
        out = np.einsum("...kiab,...kl,...lj->...abij", D2J, g, J, optimize=True)
        out += np.einsum("...ki,...kl,...ljab->...abij", J, g, D2J, optimize=True)
        out += np.einsum("...kia,...kl,...ljb->...abij", DJ, g, DJ, optimize=True)
        out += np.einsum("...kib,...kl,...lja->...abij", DJ, g, DJ, optimize=True)
        out += np.einsum("...kia,...bkl,...lj->...abij", DJ, dgc, J, optimize=True)
        out += np.einsum("...kib,...akl,...lj->...abij", DJ, dgc, J, optimize=True)
        out += np.einsum("...ki,...akl,...ljb->...abij", J, dgc, DJ, optimize=True)
        out += np.einsum("...ki,...bkl,...lja->...abij", J, dgc, DJ, optimize=True)
        out += np.einsum("...ki,...abkl,...lj->...abij", J, d2gc, J, optimize=True)
        return out


# ---------------------------------------------------------------------------
# Grid-sampled metrics
# ---------------------------------------------------------------------------

def _fit_nd_spline(axes, values, k=3, periodic_axes=()):
    """Tensor-product B-spline interpolating values on a grid.

    values has shape (n1, ..., nd) + trailing component axes; the spline
    evaluates to the trailing shape.
    """
    c = np.asarray(values, float)
    knots = []
    d = len(axes)
    for ax in range(d):
        bc = "periodic" if ax in periodic_axes else None
        spl = make_interp_spline(axes[ax], np.moveaxis(c, ax, 0), k=k, bc_type=bc)
        knots.append(spl.t)
        c = np.moveaxis(spl.c, 0, ax)
    return NdBSpline(tuple(knots), c, k=k)


class GridSymmetricArray:
    """Spline-backed symmetric (n x n) array field over a grid, with the
    value/deriv/deriv2 contract of MetricModel."""

    def __init__(self, axes, comps, dim, periodic_axes=(), k=3):
        # comps: grid array (..., m) of the packed upper triangle
        self.dim = dim
        self.axes = [np.asarray(a, float) for a in axes]
        self.iu = np.triu_indices(dim)
        self.spline = _fit_nd_spline(self.axes, comps, k=k,
                                     periodic_axes=periodic_axes)
        self._packed_dim = comps.shape[-1]

    @classmethod
    def from_matrices(cls, axes, mats, periodic_axes=(), k=3):
        dim = mats.shape[-1]
        iu = np.triu_indices(dim)
        comps = mats[..., iu[0], iu[1]]
        return cls(axes, comps, dim, periodic_axes=periodic_axes, k=k)

    def _unpack(self, packed):
        out = np.zeros(packed.shape[:-1] + (self.dim, self.dim))
        out[..., self.iu[0], self.iu[1]] = packed
        out[..., self.iu[1], self.iu[0]] = packed
        return out

    def _wrap(self, p):
        return p

    def value(self, p):
        return self._unpack(self.spline(self._wrap(p)))

    def deriv(self, p):
        p = self._wrap(p)
        d = len(self.axes)
        rows = []
        for a in range(d):
            nu = [0] * d
            nu[a] = 1
            rows.append(self.spline(p, nu=nu))
        return self._unpack(np.stack(rows, axis=-2))

    def deriv2(self, p):
        p = self._wrap(p)
        d = len(self.axes)
        out = np.empty(np.asarray(p).shape[:-1] + (d, d, self._packed_dim))
        for a in range(d):
            for b in range(a, d):
                nu = [0] * d
                nu[a] += 1
                nu[b] += 1
                val = self.spline(p, nu=nu)
                out[..., a, b, :] = val
                out[..., b, a, :] = val
        return self._unpack(out)


class GridMetric(MetricModel):
    """Metric sampled on a tensor grid, cubic-spline interpolated.

    Derivatives come from the spline itself, so deriv/deriv2 are exactly the
    derivatives of eval.
    """

    def __init__(self, axes, samples, chart=None, periodic_axes=()):
        samples = np.asarray(samples, float)
        self.dim = samples.shape[-1]
        self.axes = [np.asarray(a, float) for a in axes]
        if chart is None:
            chart = box_chart([a[0] for a in self.axes], [a[-1] for a in self.axes])
        self.chart = chart
        self._field = GridSymmetricArray.from_matrices(axes, samples, periodic_axes=periodic_axes)
        mesh = np.meshgrid(*self.axes, indexing="ij")
        pts = np.stack(mesh, axis=-1)
        self.check_positive(pts.reshape(-1, self.dim))

    @classmethod
    def from_metric(cls, metric: MetricModel, axes, chart=None, periodic_axes=()):
        mesh = np.meshgrid(*[np.asarray(a, float) for a in axes], indexing="ij")
        pts = np.stack(mesh, axis=-1)
        return cls(axes, metric.eval(pts), chart=chart or metric.chart,
                   periodic_axes=periodic_axes)

    def eval(self, p):
        return self._field.value(p)

    def deriv(self, p):
        return self._field.deriv(p)

    def deriv2(self, p):
        return self._field.deriv2(p)


# ---------------------------------------------------------------------------
# Christoffel symbols, Hamiltonian fields, Hessians
# ---------------------------------------------------------------------------

def christoffel(metric: MetricModel, p):
    """Gamma[..., k, i, j] = 1/2 g^{kl} (d_i g_lj + d_j g_li - d_l g_ij).

    The domain is the chart box (metrics are extended across the boundary
    of M by construction).
    """
    p = np.asarray(p, float)
    if np.any(p < metric.chart.lo - 1e-9) or np.any(p > metric.chart.hi + 1e-9):
        raise DomainError("christoffel: point outside chart box")
    gi = metric.inverse(p)
    dg = metric.deriv(p)
    d_i_glj = np.einsum("...ilj->...lij", dg)
    d_j_gli = np.einsum("...jli->...lij", dg)
    d_l_gij = dg
    bracket = d_i_glj + d_j_gli - d_l_gij
    return 0.5 * np.einsum("...kl,...lij->...kij", gi, bracket)


def hamiltonian(metric: MetricModel, x, xi):
    """H = 1/2 g^{ij} xi_i xi_j."""
    gi = metric.inverse(x)
    return 0.5 * np.einsum("...ij,...i,...j->...", gi, xi, xi)


def hamiltonian_field(metric: MetricModel, x, xi):
    """Hamiltonian vector field (dx/dt, dxi/dt) = (g^{-1} xi, -1/2 d_x |xi|_g^2)."""
    gi, dgi = metric.inv_bundle(x)
    dx = (gi @ xi[..., :, None])[..., 0]
    w = (dgi @ xi[..., None, :, None])[..., 0]            # (..., a, i)
    dxi = -0.5 * np.sum(w * xi[..., None, :], axis=-1)
    return dx, dxi


def _field_and_jacobian_from_bundle(gi, dgi, d2gi, xi, n):
    dx = (gi @ xi[..., :, None])[..., 0]
    w = (dgi @ xi[..., None, :, None])[..., 0]            # w[...,a,i] = d_a g^{ij} xi_j
    dxi = -0.5 * np.sum(w * xi[..., None, :], axis=-1)
    v2 = (d2gi @ xi[..., None, None, :, None])[..., 0]    # (..., a, b, i)
    q = np.sum(v2 * xi[..., None, None, :], axis=-1)      # (..., a, b)
    shape = xi.shape[:-1]
    DV = np.zeros(shape + (2 * n, 2 * n))
    DV[..., :n, :n] = np.swapaxes(w, -1, -2)              # d xdot^i / d x^a
    DV[..., :n, n:] = gi                                  # d xdot^i / d xi_a
    DV[..., n:, :n] = -0.5 * np.swapaxes(q, -1, -2)       # d xidot / d x
    DV[..., n:, n:] = -w                                  # d xidot_i / d xi_a
    return dx, dxi, DV


def hamiltonian_field_and_jacobian(metric: MetricModel, x, xi):
    """V and DV together from one derivative-bundle evaluation (the
    variational flow's hot path)."""
    gi, dgi, d2gi = metric.inv_bundle2(x)
    return _field_and_jacobian_from_bundle(gi, dgi, d2gi, xi, metric.dim)


def hamiltonian_field_jacobian(metric: MetricModel, x, xi):
    """DV as a (2n, 2n) block matrix in (x, xi) ordering.

    Used by the variational (Jacobi) flow; requires second metric derivatives.
    """
    _, _, DV = hamiltonian_field_and_jacobian(metric, x, xi)
    return DV


def hessian_form(f: ScalarField, metric: MetricModel, p, w):
    """Riemannian Hessian of f at p on the vector w:
    Hess f(w, w) = w^i w^j (d_i d_j f - Gamma^k_ij d_k f).

    Equals d^2/dt^2 f(gamma(t)) at t=0 along the geodesic with
    gamma(0) = p, gamma'(0) = w.
    """
    p = np.asarray(p, float)
    w = np.asarray(w, float)
    G = christoffel(metric, p)
    H = f.hess(p) - np.einsum("...kij,...k->...ij", G, f.grad(p))
    return np.einsum("...ij,...i,...j->...", H, w, w)


def hessian_matrix(f: ScalarField, metric: MetricModel, p):
    G = christoffel(metric, p)
    return f.hess(p) - np.einsum("...kij,...k->...ij", G, f.grad(p))


# ---------------------------------------------------------------------------
# Hypersurfaces and the second fundamental form
# ---------------------------------------------------------------------------

class Hypersurface:
    """Level set {field = level} inside a chart.

    Orientation: the distinguished unit normal points toward increasing
    field values; strict convexity (positive definite second fundamental
    form) is judged with respect to that normal. With field = |x| this makes
    Euclidean spheres, viewed from outside, strictly convex.

    A parameterization, when available, maps parameter values y (shape
    (..., n-1)) to points on the surface.
    """

    def __init__(self, field: ScalarField, level, param=None, param_domain=None,
                 periodic=None, name=""):
        self.field = field
        self.level = float(level)
        self.param = param
        self.param_domain = param_domain
        self.periodic = periodic if periodic is not None else ()
        self.name = name or f"{field.name}={level:g}"

    def value(self, p):
        return self.field.value(p) - self.level

    def grad_nonvanishing(self, p, tol=1e-12):
        return np.linalg.norm(self.field.grad(p), axis=-1) > tol

    def unit_normal(self, metric: MetricModel, p):
        """g-unit normal pointing toward increasing field values."""
        df = self.field.grad(p)
        gi = metric.inverse(p)
        nvec = np.einsum("...ij,...j->...i", gi, df)
        nrm = np.sqrt(np.einsum("...i,...i->...", nvec, df))
        return nvec / nrm[..., None]

    def tangent_basis(self, metric: MetricModel, p):
        """g-orthonormal basis of ker(d field) at p, shape (..., n-1, n)."""
        p = np.asarray(p, float)
        df = self.field.grad(p)
        n = p.shape[-1]
        # kernel of the covector df: complete df to a Euclidean basis, drop it
        single = p.ndim == 1
        if single:
            p = p[None]
            df = df[None]
        g = metric.eval(p)
        out = np.empty(p.shape[:-1] + (n - 1, n))
        for idx in np.ndindex(p.shape[:-1]):
            d = df[idx]
            # Euclidean orthonormal completion of d
            Q = np.linalg.qr(
                np.concatenate([d[:, None], np.eye(n)], axis=1)
            )[0]
            cand = Q[:, 1:n].T  # rows span ker(d . ) since rows are orth to d
            # Gram-Schmidt in the metric g
            basis = []
            for v in cand:
                for b in basis:
                    v = v - b * np.einsum("i,ij,j->", v, g[idx], b)
                v = v / np.sqrt(np.einsum("i,ij,j->", v, g[idx], v))
                basis.append(v)
            out[idx] = np.stack(basis)
        return out[0] if single else out


def sphere_surface(radius, center=None, dim=2):
    """The sphere |x - center| = radius, parameterized by angles."""
    c = np.zeros(dim) if center is None else np.asarray(center, float)
    field = radial_coordinate_field(center=c, dim=dim)

    if dim == 2:
        def param(y):
            y = np.asarray(y, float)
            th = y[..., 0]
            return c + radius * np.stack([np.cos(th), np.sin(th)], axis=-1)

        domain = [(0.0, 2.0 * np.pi)]
        periodic = (0,)
    elif dim == 3:
        def param(y):
            y = np.asarray(y, float)
            th, ph = y[..., 0], y[..., 1]
            return c + radius * np.stack(
                [np.sin(ph) * np.cos(th), np.sin(ph) * np.sin(th), np.cos(ph)],
                axis=-1,
            )

        domain = [(0.0, 2.0 * np.pi), (0.35, np.pi - 0.35)]
        periodic = (0,)
    else:
        raise ValueError("only dims 2 and 3 are supported")
    return Hypersurface(field, radius, param, domain, periodic, name=f"|x|={radius:g}")


def plane_surface(axis=0, level=0.0, dim=2, extent=1.0):
    e = np.zeros(dim)
    e[axis] = 1.0
    field = linear_field(e, dim)
    others = [i for i in range(dim) if i != axis]

    def param(y):
        y = np.asarray(y, float)
        out = np.zeros(y.shape[:-1] + (dim,))
        out[..., axis] = level
        for k, i in enumerate(others):
            out[..., i] = y[..., k]
        return out

    domain = [(-extent, extent)] * (dim - 1)
    return Hypersurface(field, level, param, domain, (), name=f"x{axis}={level:g}")


def level_surface(field: ScalarField, level, center, dim=2, theta_domain=None):
    """Star-shaped level set {field = level}, parameterized by ray casting
    from an interior center point."""
    from scipy.optimize import brentq

    c = np.asarray(center, float)
    if dim != 2:
        raise ValueError("ray-cast parameterization implemented for dim 2")

    def param(y):
        y = np.asarray(y, float)
        th = np.atleast_1d(y[..., 0])
        pts = np.empty(th.shape + (2,))
        for i, t in np.ndenumerate(th):
            d = np.array([np.cos(t), np.sin(t)])

            def fun(r):
                return field.value(c + r * d) - level

            r0, r1 = 1e-6, 10.0
            # expand until bracketing
            while fun(r1) < 0 and r1 < 1e3:
                r1 *= 2.0
            pts[i] = c + brentq(fun, r0, r1, xtol=1e-14) * d
        return pts.reshape(y.shape[:-1] + (2,))

    domain = theta_domain or [(0.0, 2.0 * np.pi)]
    return Hypersurface(field, level, param, domain, (0,), name=f"{field.name}={level:g}")


class SecondFundamentalForm:
    """II on the tangent space of a level surface, with the induced metric.

    matrix[a, b] = Hess(field)(E_a, E_b) / |grad field|_g with E_a the
    stored g-orthonormal tangent basis; induced[a, b] = delta_ab by
    construction, kept explicitly for clarity.
    """

    def __init__(self, basis, matrix, induced):
        self.basis = basis
        self.matrix = matrix
        self.induced = induced

    def min_eigenvalue(self):
        return float(np.linalg.eigvalsh(self.matrix).min())

    def __call__(self, u, v):
        """Evaluate on tangent vectors given in chart components."""
        # express u, v in the stored basis via the induced (identity) metric:
        # coefficients are Euclidean solves against the basis matrix
        coeff_u = np.linalg.lstsq(self.basis.T, u, rcond=None)[0]
        coeff_v = np.linalg.lstsq(self.basis.T, v, rcond=None)[0]
        return float(coeff_u @ self.matrix @ coeff_v)


def second_fundamental_form(metric: MetricModel, surface: Hypersurface, p):
    """Second fundamental form of the level surface through p.

    Signs: the normal points toward increasing values of the defining
    field, and II(X, X) = Hess(field)(X, X)/|grad field|_g; Euclidean
    spheres (field |x|) are then positive definite, planes give zero.
    """
    p = np.asarray(p, float)
    df = surface.field.grad(p)
    gnorm = np.sqrt(np.einsum("...ij,...i,...j->...", metric.inverse(p), df, df))
    if np.any(gnorm < 1e-12):
        raise DomainError("second_fundamental_form: degenerate gradient")
    basis = surface.tangent_basis(metric, p)
    H = hessian_matrix(surface.field, metric, p)
    mat = np.einsum("...ai,...ij,...bj->...ab", basis, H, basis) / gnorm[..., None, None]
    n1 = basis.shape[-2]
    induced = np.broadcast_to(np.eye(n1), mat.shape).copy()
    return SecondFundamentalForm(basis, mat, induced)


def jacobi_collar_bound(K, mu):
    """Collar half-width (1/sqrt(mu)) * arccot(K) below which the normal
    exponential map off a surface with |II| <= K stays a local
    diffeomorphism under sectional curvature <= mu."""
    if mu <= 0:
        raise ValueError("jacobi_collar_bound requires mu > 0")
    if K < 0:
        raise ValueError("jacobi_collar_bound requires K >= 0")
    arccot = np.pi / 2.0 if K == 0 else np.arctan(1.0 / K)
    return arccot / np.sqrt(mu)


def gauss_curvature(metric: MetricModel, p):
    """Gauss curvature of a 2-d metric via the Brioschi formula."""
    if metric.dim != 2:
        raise ValueError("gauss_curvature implemented for dim 2")
    p = np.asarray(p, float)
    g = metric.eval(p)
    dg = metric.deriv(p)
    d2g = metric.deriv2(p)
    E, F, G = g[..., 0, 0], g[..., 0, 1], g[..., 1, 1]
    Ex, Ey = dg[..., 0, 0, 0], dg[..., 1, 0, 0]
    Fx, Fy = dg[..., 0, 0, 1], dg[..., 1, 0, 1]
    Gx, Gy = dg[..., 0, 1, 1], dg[..., 1, 1, 1]
    Exy = d2g[..., 0, 1, 0, 0]
    Eyy = d2g[..., 1, 1, 0, 0]
    Fxy = d2g[..., 0, 1, 0, 1]
    Gxx = d2g[..., 0, 0, 1, 1]
    Gxy = d2g[..., 0, 1, 1, 1]
    det = E * G - F * F
    M1 = np.stack(
        [
            np.stack([-0.5 * Eyy + Fxy - 0.5 * Gxx, 0.5 * Ex, Fx - 0.5 * Ey], axis=-1),
            np.stack([Fy - 0.5 * Gx, E, F], axis=-1),
            np.stack([0.5 * Gy, F, G], axis=-1),
        ],
        axis=-2,
    )
    M2 = np.stack(
        [
            np.stack([np.zeros_like(E), 0.5 * Ey, 0.5 * Gx], axis=-1),
            np.stack([0.5 * Ey, E, F], axis=-1),
            np.stack([0.5 * Gx, F, G], axis=-1),
        ],
        axis=-2,
    )
    return (np.linalg.det(M1) - np.linalg.det(M2)) / (det * det)


# ---------------------------------------------------------------------------
# Normal gauge collar construction
# ---------------------------------------------------------------------------

class CollarChart:
    """Semigeodesic coordinates (t, y) around a hypersurface.

    forward(t, y) follows the unit normal geodesic from param(y) for signed
    time t; the pulled-back metric is dt^2 + h(t, y, dy) with the
    normal-normal component identically 1 and vanishing normal-tangential
    components, up to solver tolerance. By default t increases inward
    (toward decreasing surface-field values).
    """

    def __init__(self, surface, t_grid, y_axes, positions, metric,
                 periodic_axes=(), gauge_tol=1e-6, spline_k=5):
        self.surface = surface
        self.metric = metric
        self.t_grid = np.asarray(t_grid, float)
        self.y_axes = [np.asarray(a, float) for a in y_axes]
        self.dim = positions.shape[-1]
        axes = [self.t_grid] + self.y_axes
        per = tuple(a + 1 for a in periodic_axes)
        self.periodic_axes = per
        k = min(spline_k, min(a.size for a in axes) - 1)
        self.spline_k = k
        self._pos = _fit_nd_spline(axes, positions, k=k, periodic_axes=per)
        self._axes = axes

        # pulled-back metric samples and gauge check
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack(mesh, axis=-1)
        gcol = self.pullback_eval(pts)
        self.gauge_error = float(
            max(
                np.abs(gcol[..., 0, 0] - 1.0).max(),
                np.abs(gcol[..., 0, 1:]).max(),
            )
        )
        # spline the tangential block for fast collar-side work
        self._h = GridSymmetricArray.from_matrices(
            axes, gcol[..., 1:, 1:], periodic_axes=per, k=k
        ) if self.dim > 1 else None
        self.gauge_tol = gauge_tol

        # fold detection via the signed Jacobian determinant of the forward
        # map: a fold flips orientation relative to the base surface slice
        J = self._frame(pts)
        dets = np.linalg.det(J)
        ref = np.sign(np.median(dets[self.t_grid.size // 2]))
        dets = ref * dets
        self.min_jacobian = float(dets.min())
        if self.min_jacobian < 1e-3:
            raise CollarFoldError(
                f"normal exponential map degenerates: min det D phi = "
                f"{self.min_jacobian:.2e}; narrow the collar"
            )

    # -- maps ---------------------------------------------------------------

    def _wrap(self, q):
        q = np.array(q, float, copy=True)
        for ax in self.periodic_axes:
            lo, hi = self._axes[ax][0], self._axes[ax][-1]
            q[..., ax] = lo + np.mod(q[..., ax] - lo, hi - lo)
        return q

    def forward(self, q):
        """Collar coordinates q = (t, y) -> chart point."""
        return self._pos(self._wrap(q))

    def _frame(self, q):
        """Columns d phi / d q_a, shape (..., n, n)."""
        q = self._wrap(q)
        d = self.dim
        cols = []
        for a in range(d):
            nu = [0] * d
            nu[a] = 1
            cols.append(self._pos(q, nu=nu))
        return np.stack(cols, axis=-1)

    def frame_vectors(self, q):
        """Tangent vectors of the collar coordinate lines at forward(q):
        index a of (..., a, n) is the coordinate direction."""
        return np.swapaxes(self._frame(q), -1, -2)

    def coframe(self, q):
        """Row a of (..., a, n): chart components of the collar coordinate
        differentials dq_a at forward(q); rows of the inverse frame matrix."""
        return np.linalg.inv(self._frame(q))

    def pullback_eval(self, q):
        """Pulled-back metric phi* g at collar coordinates q."""
        J = self._frame(q)
        g = self.metric.eval(self.forward(q))
        return np.einsum("...ia,...ij,...jb->...ab", J, g, J)

    def inverse(self, p, tol=1e-11, maxit=80, strict=True):
        """Chart point -> collar coordinates by Newton iteration.

        strict=False returns the last iterate without raising for points
        outside the collar image (callers validate via the round trip).
        """
        p = np.asarray(p, float)
        single = p.ndim == 1
        P = p[None] if single else p.reshape(-1, p.shape[-1])
        # initial guess: nearest grid node
        mesh = np.meshgrid(*self._axes, indexing="ij")
        nodes_q = np.stack(mesh, axis=-1).reshape(-1, self.dim)
        nodes_p = self.forward(nodes_q)
        d2 = np.sum((P[:, None, :] - nodes_p[None, :, :]) ** 2, axis=-1)
        q = nodes_q[np.argmin(d2, axis=1)].copy()
        for _ in range(maxit):
            r = self.forward(q) - P
            if np.max(np.abs(r)) < tol:
                break
            J = self._frame(q)
            step = np.linalg.solve(J, r[..., None])[..., 0]
            # keep iterates inside the collar box
            q = q - step
            q[:, 0] = np.clip(q[:, 0], self.t_grid[0], self.t_grid[-1])
        else:
            if strict:
                raise DomainError("collar inverse failed to converge")
        return q[0] if single else q.reshape(p.shape)

    def tangential_metric(self, q):
        """h(t, y) block of the pulled-back metric (spline-smoothed)."""
        return self._h.value(self._wrap(q))

    def tangential_metric_dt(self, q):
        return self._h.deriv(self._wrap(q))[..., 0, :, :]

    def as_metric(self):
        """The pulled-back metric dt^2 + h as a MetricModel on (t, y)."""
        return CollarMetric(self)


class CollarMetric(MetricModel):
    """Exact normal-gauge metric dt^2 + h(t, y, dy) built from a collar.

    The normal components are exactly 1 and 0 (not spline-sampled), so the
    normal-gauge Christoffel identities hold to interpolation accuracy of h
    alone.
    """

    def __init__(self, collar: CollarChart):
        self.collar = collar
        self.dim = collar.dim
        lo = [collar._axes[a][0] for a in range(self.dim)]
        hi = [collar._axes[a][-1] for a in range(self.dim)]
        self.chart = box_chart(lo, hi)

    def _embed(self, block, p, extra):
        n = self.dim
        out = np.zeros(np.asarray(p).shape[:-1] + extra + (n, n))
        out[..., 1:, 1:] = block
        return out

    def eval(self, p):
        out = self._embed(self.collar._h.value(self.collar._wrap(p)), p, ())
        out[..., 0, 0] = 1.0
        return out

    def deriv(self, p):
        return self._embed(self.collar._h.deriv(self.collar._wrap(p)), p, (self.dim,))

    def deriv2(self, p):
        return self._embed(
            self.collar._h.deriv2(self.collar._wrap(p)), p, (self.dim, self.dim)
        )


def build_normal_gauge(metric: MetricModel, surface: Hypersurface, half_width,
                       ny=64, nt=33, direction="inward", rk_steps=160):
    """Build semigeodesic collar coordinates around a hypersurface.

    Integrates the unit normal geodesics over t in [-half_width, half_width]
    on a parameter grid and fits coordinate splines. direction="inward"
    makes t increase toward decreasing surface-field values.

    Raises CollarFoldError when the normal exponential map degenerates
    (Jacobian determinant below threshold) inside the requested collar.
    """
    from .flow import batch_geodesic_positions  # local import; flow depends on geometry

    if surface.param is None:
        raise ValueError("surface provides no parameterization")
    dom = surface.param_domain
    axes = []
    for k, (lo, hi) in enumerate(dom):
        if k in surface.periodic:
            axes.append(np.linspace(lo, hi, ny + 1))
        else:
            axes.append(np.linspace(lo, hi, ny))
    mesh = np.meshgrid(*axes, indexing="ij")
    ygrid = np.stack(mesh, axis=-1)
    base = surface.param(ygrid)
    normal = surface.unit_normal(metric, base)
    if direction == "inward":
        normal = -normal
    elif direction != "outward":
        raise ValueError("direction must be 'inward' or 'outward'")

    t_grid = np.linspace(-half_width, half_width, nt)
    flat_base = base.reshape(-1, metric.dim)
    flat_n = normal.reshape(-1, metric.dim)
    pos = batch_geodesic_positions(metric, flat_base, flat_n, t_grid, rk_steps)
    positions = pos.reshape((nt,) + ygrid.shape[:-1] + (metric.dim,))
    per = tuple(surface.periodic)
    collar = CollarChart(surface, t_grid, axes, positions, metric, periodic_axes=per)
    return collar
