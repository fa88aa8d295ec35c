"""Shared oracles and fixtures.

The Abel/turning-point oracle for radial sound speeds is the independent
reference for ray travel times and exit angles; it never touches the
Hamiltonian solver.
"""

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.optimize import brentq

from lenslab import geometry as geo


def abel_travel_time(profile, a, R=1.0):
    """Travel time and angular aperture for a ray entering the radius-R disk
    of the metric c^{-2} dx^2 with aiming angle a from the inward normal.

    Turning-point quadrature with the sqrt substitution r = r* + u^2:
        T = 2 int_{r*}^{R} dr / (c sqrt(1 - p^2 c^2 / r^2)),
        dtheta = 2 int_{r*}^{R} p c dr / (r^2 sqrt(1 - p^2 c^2 / r^2)),
    where p = R sin|a| / c(R) and r*/c(r*) = p.
    """
    c = profile.radial
    p = R * np.sin(abs(a)) / c(R)
    if p < 1e-12:
        T = 2.0 * quad(lambda r: 1.0 / c(r), 0.0, R, limit=200)[0]
        return T, np.pi
    rstar = brentq(lambda r: r / c(r) - p, 1e-9, R, xtol=1e-15)

    def integrand_T(u):
        r = rstar + u * u
        w = 1.0 - (p * c(r) / r) ** 2
        return 2.0 * u / (c(r) * np.sqrt(max(w, 1e-300)))

    def integrand_th(u):
        r = rstar + u * u
        w = 1.0 - (p * c(r) / r) ** 2
        return 2.0 * u * p * c(r) / (r * r * np.sqrt(max(w, 1e-300)))

    umax = np.sqrt(R - rstar)
    T = 2.0 * quad(integrand_T, 0.0, umax, limit=400)[0]
    dth = 2.0 * quad(integrand_th, 0.0, umax, limit=400)[0]
    return T, dth


def boundary_entry(metric, beta, a):
    """Unit-speed phase point on |x| = 1 at boundary angle beta, aimed a
    radians off the inward normal (positive toward +tangent)."""
    from lenslab.flow import unit_phase_point

    p = np.array([np.cos(beta), np.sin(beta)])
    inward = -p
    tang = np.array([-np.sin(beta), np.cos(beta)])
    v = np.cos(a) * inward + np.sin(a) * tang
    return unit_phase_point(metric, p, v=v)


def random_interior_one_form(seed, dim=2, radius=0.85, modes=3):
    """Smooth compactly supported one-form: bump(x) * trigonometric field,
    with closed-form derivatives."""
    from lenslab.tensorcalc import CallableSymField, bump_scalar_field

    r = np.random.default_rng(seed)
    ks = r.uniform(-2.5, 2.5, (modes, dim, dim))   # wave vectors per component
    amps = r.uniform(-1.0, 1.0, (modes, dim))
    phs = r.uniform(0, 2 * np.pi, (modes, dim))
    bump = bump_scalar_field(np.zeros(dim), radius, 1.0, dim)

    def trig(p):
        p = np.asarray(p, float)
        out = np.zeros(p.shape[:-1] + (dim,))
        for m in range(modes):
            phase = np.einsum("...j,ij->...i", p, ks[m]) + phs[m]
            out += amps[m] * np.sin(phase)
        return out

    def trig_deriv(p):
        p = np.asarray(p, float)
        out = np.zeros(p.shape[:-1] + (dim, dim))  # (..., a, i) = d_a v_i
        for m in range(modes):
            phase = np.einsum("...j,ij->...i", p, ks[m]) + phs[m]
            out += amps[m] * np.cos(phase)[..., None, :] * ks[m].T[..., :, :]
        return out

    def value(p):
        return bump.value(p)[..., None] * trig(p)

    def deriv(p):
        b = bump.value(p)
        db = bump.deriv(p)
        return db[..., :, None] * trig(p)[..., None, :] + b[..., None, None] * trig_deriv(p)

    return CallableSymField(1, dim, value, deriv, mask=bump.support_mask)


@pytest.fixture(scope="session")
def euclid2():
    return geo.EuclideanMetric(2)


@pytest.fixture(scope="session")
def herglotz2():
    return geo.ConformalMetric(geo.herglotz_profile(0.2), 2)


@pytest.fixture(scope="session")
def bump_pullback_pair():
    g = geo.ConformalMetric(geo.herglotz_profile(0.2), 2)
    psi = geo.BumpDiffeo(
        2, centers=[[0.0, 0.0]], radii=[0.6], amplitudes=[[0.05, -0.04]]
    )
    return g, geo.PullbackMetric(g, psi), psi
