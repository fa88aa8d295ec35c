import numpy as np
import pytest

from conftest import abel_travel_time, boundary_entry

from lenslab import flow, geometry as geo
from lenslab.errors import TrappedRayError

rng = np.random.default_rng(7)


# ---------------------------------------------------------------------------
# integrate_ray
# ---------------------------------------------------------------------------

def test_diameter_chord(euclid2):
    z = flow.unit_phase_point(euclid2, [-1.0, 0.0], v=[1.0, 0.0])
    path = flow.integrate_ray(euclid2, z)
    assert path.exit_flag == "boundary"
    assert abs(path.length - 2.0) < 1e-10
    assert np.abs(path.states[-1][:2] - [1.0, 0.0]).max() < 1e-9


def test_chord_length_identity(euclid2):
    for _ in range(12):
        beta = rng.uniform(0, 2 * np.pi)
        a = rng.uniform(-1.3, 1.3)
        z = boundary_entry(euclid2, beta, a)
        path = flow.integrate_ray(euclid2, z)
        assert abs(path.length + 2.0 * np.dot(z.x, z.xi)) < 1e-9


def test_herglotz_against_abel_oracle(herglotz2):
    prof = geo.herglotz_profile(0.2)
    for a in (0.15, 0.55, 0.95, 1.25):
        T_or, dth_or = abel_travel_time(prof, a)
        z = boundary_entry(herglotz2, 0.4, a)
        rec = flow.scattering_relation(herglotz2, z)
        assert rec.status == "ok"
        assert abs(rec.length - T_or) < 1e-5
        exit_angle = np.arctan2(rec.exit.x[1], rec.exit.x[0])
        sep = np.mod(exit_angle - 0.4, 2 * np.pi)
        assert abs(sep - dth_or) < 1e-4


def test_energy_drift_invariant(herglotz2):
    for _ in range(10):
        z = boundary_entry(herglotz2, rng.uniform(0, 2 * np.pi), rng.uniform(-1.2, 1.2))
        path = flow.integrate_ray(herglotz2, z)
        assert path.energy_drift < 1e-8


def test_trapped_ray_flagged():
    # c = e^{r^2} violates the Herglotz condition for r > 1/sqrt(2); a
    # tangential ray there ducts inside the slow annulus and never exits
    m = geo.ConformalMetric(geo.exponential_profile(1.0), 2)
    z = flow.unit_phase_point(m, [0.85, 0.0], v=[0.0, 1.0])
    path = flow.integrate_ray(m, z)
    assert path.exit_flag == "trapped"


# ---------------------------------------------------------------------------
# flow_jacobian
# ---------------------------------------------------------------------------

def test_flow_jacobian_euclidean(euclid2):
    z = flow.unit_phase_point(euclid2, [-0.4, 0.2], v=[0.9, 0.1])
    s = 0.85
    W = flow.flow_jacobian(euclid2, z, s)
    expected = np.block([[np.eye(2), s * np.eye(2)], [np.zeros((2, 2)), np.eye(2)]])
    assert np.abs(W - expected).max() < 1e-10


def test_flow_jacobian_time_zero(herglotz2):
    z = boundary_entry(herglotz2, 1.0, 0.3)
    W = flow.flow_jacobian(herglotz2, z, 0.0)
    assert np.abs(W - np.eye(4)).max() < 1e-12


def test_flow_jacobian_matches_finite_differences(herglotz2):
    z = boundary_entry(herglotz2, 2.1, 0.4)
    t = 0.7
    W = flow.flow_jacobian(herglotz2, z, t)
    z0 = z.as_state()
    h = 1e-6
    for a in range(4):
        e = np.zeros(4)
        e[a] = h
        zp = flow.integrate_ray(
            herglotz2, flow.PhasePoint.from_state(z0 + e), stop=("time", t)
        ).states[-1]
        zm = flow.integrate_ray(
            herglotz2, flow.PhasePoint.from_state(z0 - e), stop=("time", t)
        ).states[-1]
        fd = (zp - zm) / (2 * h)
        assert np.abs(W[:, a] - fd).max() < 1e-5


def test_symplecticity(herglotz2):
    J = np.block([[np.zeros((2, 2)), np.eye(2)], [-np.eye(2), np.zeros((2, 2))]])
    worst = 0.0
    for _ in range(100):
        z = boundary_entry(herglotz2, rng.uniform(0, 2 * np.pi), rng.uniform(-1.1, 1.1))
        t = rng.uniform(0.1, 1.2)
        W = flow.flow_jacobian(herglotz2, z, t)
        worst = max(worst, np.abs(W.T @ J @ W - J).max())
    assert worst < 1e-6


# ---------------------------------------------------------------------------
# semigroup / reversal / scattering relation
# ---------------------------------------------------------------------------

def test_flow_semigroup(herglotz2):
    for _ in range(8):
        z = boundary_entry(herglotz2, rng.uniform(0, 2 * np.pi), rng.uniform(-0.9, 0.9))
        s, t = rng.uniform(0.1, 0.5, 2)
        mid = flow.integrate_ray(herglotz2, z, stop=("time", s)).states[-1]
        z2 = flow.PhasePoint.from_state(mid)
        ab = flow.integrate_ray(herglotz2, z2, stop=("time", t)).states[-1]
        direct = flow.integrate_ray(herglotz2, z, stop=("time", s + t)).states[-1]
        assert np.abs(ab - direct).max() < 1e-7


def test_time_reversal(herglotz2):
    z = boundary_entry(herglotz2, 0.9, 0.7)
    rec = flow.scattering_relation(herglotz2, z)
    back = flow.PhasePoint(rec.exit.x, -rec.exit.xi)
    path_back = flow.integrate_ray(herglotz2, back, stop=("time", rec.length))
    zb = path_back.states[-1]
    assert np.abs(zb[:2] - z.x).max() < 1e-6
    assert np.abs(zb[2:] + z.xi).max() < 1e-6


def test_scattering_relation_euclidean(euclid2):
    z = boundary_entry(euclid2, 0.3, -0.5)
    rec = flow.scattering_relation(euclid2, z)
    v = euclid2.inverse(z.x) @ z.xi
    assert np.abs(rec.exit.x - (z.x + rec.length * v)).max() < 1e-9
    assert np.abs(rec.exit.xi - z.xi).max() < 1e-9


def test_lens_invariance_under_boundary_fixing_diffeos(herglotz2):
    # records of g and psi* g agree pointwise for interior diffeomorphisms
    for seed in range(3):
        r = np.random.default_rng(seed)
        psi = geo.BumpDiffeo(
            2,
            centers=[r.uniform(-0.25, 0.25, 2)],
            radii=[0.55],
            amplitudes=[r.uniform(-0.05, 0.05, 2)],
        )
        gh = geo.PullbackMetric(herglotz2, psi)
        for beta, a in [(0.2, 0.1), (1.4, -0.8), (3.3, 0.5)]:
            z = boundary_entry(herglotz2, beta, a)
            rec_g = flow.scattering_relation(herglotz2, z)
            rec_h = flow.scattering_relation(gh, z)
            assert abs(rec_g.length - rec_h.length) < 1e-6
            assert np.abs(rec_g.exit.x - rec_h.exit.x).max() < 1e-6
            assert np.abs(rec_g.exit.xi - rec_h.exit.xi).max() < 1e-6


# ---------------------------------------------------------------------------
# exit_time
# ---------------------------------------------------------------------------

def test_exit_time_radial(euclid2):
    surf = geo.sphere_surface(1.0, dim=2)
    z = flow.unit_phase_point(euclid2, [0.0, 0.0], v=[1.0, 0.0])
    tau, grazing = flow.exit_time(euclid2, z, surf)
    assert abs(tau - 1.0) < 1e-10 and not grazing


def test_exit_time_matches_scattering_length(herglotz2):
    surf = geo.sphere_surface(1.0, dim=2)
    z = boundary_entry(herglotz2, 1.7, 0.6)
    rec = flow.scattering_relation(herglotz2, z)
    tau, _ = flow.exit_time(herglotz2, z, surf)
    assert abs(tau - rec.length) < 1e-9


def test_exit_time_smooth_on_pushed_surface(herglotz2):
    # from the pushed surface H_delta the exit time is finite and smooth in
    # the launch parameter for the near-tangent family
    delta = 0.05
    surf = geo.sphere_surface(1.0 - delta, dim=2)
    taus = []
    aims = np.linspace(1.45, 1.55, 9)
    for a in aims:
        p = (1.0 - delta) * np.array([1.0, 0.0])
        tang = np.array([0.0, 1.0])
        inward = np.array([-1.0, 0.0])
        v = np.cos(a) * inward + np.sin(a) * tang
        z = flow.unit_phase_point(herglotz2, p, v=v)
        tau, _ = flow.exit_time(herglotz2, z, surf)
        taus.append(tau)
    taus = np.array(taus)
    d1 = np.gradient(taus, aims)
    assert np.all(np.isfinite(taus)) and np.abs(d1).max() < 50.0


# ---------------------------------------------------------------------------
# lens datasets
# ---------------------------------------------------------------------------

def test_empty_dataset(euclid2):
    recs = flow.lens_dataset(euclid2, flow.FanSpec(n_points=0, n_dirs=0))
    assert recs == []


def test_euclidean_fan_chord_law(euclid2):
    recs = flow.lens_dataset(euclid2, flow.FanSpec(n_points=10, n_dirs=10))
    assert len(recs) == 100
    for rec in recs:
        assert rec.status == "ok"
        assert abs(rec.length + 2.0 * np.dot(rec.entry.x, rec.entry.xi)) < 1e-8


def test_dataset_pullback_equality(bump_pullback_pair):
    g, gh, _ = bump_pullback_pair
    spec = flow.FanSpec(n_points=6, n_dirs=5)
    recs_g = flow.lens_dataset(g, spec)
    recs_h = flow.lens_dataset(gh, spec)
    for rg, rh in zip(recs_g, recs_h):
        assert abs(rg.length - rh.length) < 1e-6
        assert np.abs(rg.row() - rh.row()).max() < 1e-6


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------

def test_batch_flow_matches_solve_ivp(herglotz2):
    zs = []
    ts = []
    for _ in range(9):
        z = boundary_entry(herglotz2, rng.uniform(0, 2 * np.pi), rng.uniform(-0.9, 0.9))
        zs.append(z.as_state())
        ts.append(rng.uniform(0.2, 1.0))
    Z0 = np.stack(zs)
    Zend = flow.batch_flow(herglotz2, Z0, ts, rk_steps=400)
    for i in range(9):
        ref = flow.integrate_ray(
            herglotz2, flow.PhasePoint.from_state(Z0[i]), stop=("time", ts[i])
        ).states[-1]
        assert np.abs(Zend[i] - ref).max() < 1e-9


def test_batch_jacobian_matches_flow_jacobian(herglotz2):
    z = boundary_entry(herglotz2, 0.8, -0.4)
    t = 0.6
    _, W = flow.batch_flow_with_jacobian(herglotz2, z.as_state()[None], [t], rk_steps=400)
    W_ref = flow.flow_jacobian(herglotz2, z, t)
    assert np.abs(W[0] - W_ref).max() < 1e-8
