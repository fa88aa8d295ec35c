import numpy as np
import pytest

from lenslab import symbols as sym
from lenslab.xray import Localizer

rng = np.random.default_rng(23)


def pt3(xi=0.6, eta=8.0, F=1.0, alpha=0.9, chi=None):
    return sym.SymbolPoint(xi, [eta, 0.0], F, alpha, chi)


# ---------------------------------------------------------------------------
# Gaussian-profile symbol
# ---------------------------------------------------------------------------

def test_symbol_hermitian_psd():
    M = sym.symbol_L0_one_form(pt3())
    assert np.abs(M - M.conj().T).max() < 1e-14
    eig = np.linalg.eigvalsh(0.5 * (M + M.conj().T))
    assert eig.min() > -1e-12


def test_tangential_block_positive_definite():
    for xi in (-3.0, 0.0, 1.5):
        for eta in (2.0, 10.0):
            T = sym.tangential_block_one_form(pt3(xi=xi, eta=eta))
            assert np.linalg.eigvalsh(T).min() > 0


def test_eta_zero_rejected():
    pt = sym.SymbolPoint(0.4, [0.0, 0.0], 1.0, 0.9)
    with pytest.raises(ValueError):
        sym.symbol_L0_one_form(pt)


def test_symbol_monte_carlo_oracle():
    # brute Monte Carlo of the direction integral, 1e6 samples
    pt = pt3(xi=0.8, eta=5.0, F=1.2, alpha=0.7)
    M = sym.symbol_L0_one_form(pt)
    r = np.random.default_rng(1)
    th = r.uniform(0, 2 * np.pi, 4 * 10**6)
    Y = np.stack([np.cos(th), np.sin(th)], axis=-1)
    nu = 0.7 / 1.2
    q = 0.8**2 + 1.2**2
    Ye = Y @ pt.eta
    colN = -nu * (0.8 + 1.2j) / q * Ye
    col = np.concatenate([colN[:, None], Y.astype(complex)], axis=1)
    w = nu ** (-0.5) * np.exp(-(Ye**2) / (2 * nu * q))
    mc = np.einsum("m,mi,mj->ij", w, col, col.conj()) * (2 * np.pi / th.size) / np.sqrt(q)
    assert np.abs(mc - M).max() / np.abs(M).max() < 1e-3


def test_two_tensor_gram_positivity():
    # tensors Yhat (x) Yhat span the tangential-tangential space: the Gram
    # of the block over random tangential directions is positive definite
    T = sym.tangential_block_two_tensor(pt3(xi=0.3, eta=9.0))
    dirs = rng.normal(size=(6, 2))
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    basis = np.stack(
        [np.array([d[0] ** 2, np.sqrt(2) * d[0] * d[1], d[1] ** 2]) for d in dirs]
    )
    G = basis @ T @ basis.T
    G = 0.5 * (G + G.T)
    eig = np.linalg.eigvalsh(G)
    # 6 directions in a 3-dim tensor space: PSD Gram of rank exactly 3
    assert eig.min() > -1e-10 * eig.max()
    assert np.sum(eig > 1e-10 * eig.max()) == 3


# ---------------------------------------------------------------------------
# oscillatory blocks a_{j,F}
# ---------------------------------------------------------------------------

def test_phase_integral_gaussian_closed_form():
    # for a Gaussian localizer the (t, lambda) double integral is an exact
    # two-stage Gaussian: an independent closed-form oracle
    sig = 0.45
    loc = Localizer("gaussian", width=sig)
    pt = sym.SymbolPoint(0.9, [6.0, 0.0], 1.3, 0.8, chi=loc)
    c = np.array([2.0, -1.0, 0.0])
    alpha = np.full(3, 0.8)
    got = sym._phase_integral(pt, c, alpha, 0)

    a = 1j * pt.xi - pt.digamma
    A = 1.0 / (2 * sig**2) + a / (4 * 0.8)
    expo = c**2 / (a * (4 * 0.8 + 2 * sig**2 * a))
    oracle = np.sqrt(np.pi / (-a * 0.8)) * np.sqrt(np.pi / A) * np.exp(expo)
    assert np.abs(got - oracle).max() / np.abs(oracle).max() < 1e-6


def test_parity_blocks_vanish_at_xi_zero():
    pt0 = pt3(xi=0.0)
    a00 = sym.symbol_a(0, 0, pt0)
    a01 = sym.symbol_a(0, 1, pt0)
    a10 = sym.symbol_a(1, 0, pt0)
    assert abs(a01) <= 0.02 * abs(a00)
    assert abs(a10) <= 0.02 * abs(a00)


def test_entry_11_factorization():
    eta = 16.0
    phases = []
    for xi in (-0.7, -0.3, 0.0, 0.3, 0.7):
        b11 = sym.symbol_a(1, 1, pt3(xi=xi, eta=eta))
        phases.append(np.angle(b11 / ((xi + 1j) / eta)))
    assert np.ptp(np.unwrap(phases)) < 0.05


def test_digamma_decay_slope():
    Fs = np.array([32.0, 64.0, 128.0, 256.0, 512.0, 1024.0])
    mags = [np.linalg.norm(sym.symbol_L0_one_form(
        sym.SymbolPoint(0.4, [2.0, 0.0], F, 0.9))) for F in Fs]
    slope = np.polyfit(np.log(Fs), np.log(mags), 1)[0]
    assert abs(slope + 0.5) < 0.1


def test_symbol_quadrature_refinement():
    pt = pt3(xi=0.5, eta=14.0)
    # refine_check raises unless the two quadrature levels agree to 1e-3
    val = sym.symbol_a(1, 1, pt, refine_check=True)
    assert np.isfinite(val.real) and np.isfinite(val.imag)


def test_block_linearity_in_chi():
    pt1 = pt3(chi=Localizer("bump", amplitude=1.0))
    pt2 = pt3(chi=Localizer("bump", amplitude=2.0))
    b1 = sym.symbol_a(0, 0, pt1)
    b2 = sym.symbol_a(0, 0, pt2)
    assert abs(b2 - 2.0 * b1) < 1e-12 * abs(b1) + 1e-15


# ---------------------------------------------------------------------------
# front-face kernel
# ---------------------------------------------------------------------------

def test_kernel_outside_support_vanishes():
    loc = Localizer("bump")
    K = sym.front_face_kernel(1, 1.7, 0.4, [1.0], 0.9, 1.0, loc)
    assert np.abs(K).max() == 0.0


def test_kernel_at_S_zero_structure():
    # at S = 0 the one-form kernel reduces to the Yhat-row against
    # (2 alpha |Y| d_x-slot, Yhat d_y-slot)
    loc = Localizer("bump")
    alpha, absY, F = 0.8, 0.5, 1.1
    K = sym.front_face_kernel(1, 0.0, absY, [1.0], alpha, F, loc)
    damp = np.exp(-F * alpha * absY**2) / absY * loc(np.array([0.0]))[0]
    expected = damp * np.outer([0.0, 1.0], [2 * alpha * absY, 1.0])
    assert np.abs(K - expected).max() < 1e-15


def test_kernel_rank2_is_rank_one_squared():
    loc = Localizer("bump")
    K = sym.front_face_kernel(2, 0.3, 0.6, [1.0], 0.7, 1.0, loc)
    s = np.linalg.svd(K, compute_uv=False)
    assert s[1] < 1e-12 * s[0]


@pytest.mark.slow
def test_kernel_fft_reproduces_symbol():
    err, F_eval, S_eval = sym.kernel_symbol_fft_check()
    assert err < 0.02


# ---------------------------------------------------------------------------
# structure report
# ---------------------------------------------------------------------------

def test_structure_report_zero_tolerance_fails():
    cfg = sym.StructureConfig(
        digammas=(1.0,), xis=(0.0, 0.4), etas=(12.0,),
        ellipticity_floor=np.inf,
    )
    rep = sym.structure_report(cfg)
    assert not rep["all_passed"]


def test_structure_report_default_passes(tmp_path):
    cfg = sym.StructureConfig(digammas=(1.0,), xis=(-0.5, 0.0, 0.5),
                              etas=(12.0, 20.0))
    rep = sym.structure_report(cfg)
    assert rep["all_passed"]
    assert all(r["oneform_margin"] > 0 for r in rep["rows"])
    sym.save_report(rep, tmp_path / "rep.json", tmp_path / "rep.csv")
    assert (tmp_path / "rep.json").exists()
    lines = (tmp_path / "rep.csv").read_text().splitlines()
    assert len(lines) == len(rep["rows"]) + 1


def test_structure_report_single_point():
    cfg = sym.StructureConfig(digammas=(1.0,), xis=(0.0,), etas=(16.0,))
    rep = sym.structure_report(cfg)
    assert len(rep["rows"]) == 1
