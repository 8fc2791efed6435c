import math

import numpy as np
import pytest

from conftest import A0_TRI_EAM, A0_TRI_MORSE, A_TRI
from ldlab.errors import ConfigurationError, SingularityError
from ldlab.lattice import apply_defect, build_homogeneous, build_supercell
from ldlab.model import (Assembly, PhononSymbol, infsup_constant, phonon_check,
                         stability_spectrum)
from ldlab.potential import (EAMPotential, MorsePotential,
                             QuadraticFormPotential)
from ldlab.solver import SolverOptions, relax
from oracles import fd_gradient_error, fd_hessian_error, naive_energy

A0_SQ_MORSE = 0.9369018535469205


def small_field(cell, seed, scale=0.05):
    rng = np.random.default_rng(seed)
    return scale * A0_TRI_MORSE * rng.standard_normal((cell.n_sites, cell.m))


def square_quadratic_cell(N, m=1, weight=1.0, linear=None):
    pot = QuadraticFormPotential(m=m, weight=weight, linear=linear, support=1.0)
    model = build_homogeneous(np.eye(2), 1.0, m=m)
    return build_supercell(model, np.eye(2), N), pot


# --- energies against the position-based oracle -------------------------------


def oracle_cases(morse):
    a0 = A0_TRI_MORSE
    tri = build_homogeneous(a0 * A_TRI, morse.support_radius)
    vac = apply_defect(tri, removed=[(0, 0)])
    inter = apply_defect(tri, added=[(0.45 * a0, 0.12 * a0)])
    eam = EAMPotential()
    tri_e = build_homogeneous(A0_TRI_EAM * A_TRI, eam.support_radius)
    vac_e = apply_defect(tri_e, removed=[(0, 0)])
    cases = [
        ("tri-hom", build_supercell(tri, tri.A, 3), morse),
        ("tri-vacancy", build_supercell(vac, vac.A, 4), morse),
        ("tri-interstitial", build_supercell(inter, inter.A, 4), morse),
        ("tri-vacancy-eam", build_supercell(vac_e, vac_e.A, 4), eam),
    ]
    qpot = QuadraticFormPotential(m=1, weight=1.7, linear=[[0.3, -0.2]],
                                  support=1.0)
    qcell, _ = square_quadratic_cell(4, m=1)
    cases.append(("square-quadratic", qcell, qpot))
    return cases


def test_energy_matches_naive_pair_sum(morse):
    for name, cell, pot in oracle_cases(morse):
        assert cell.n_sites <= 500
        asm = Assembly(cell, pot)
        for seed in (0, 1):
            vals = small_field(cell, seed)
            e1 = asm.energy(vals)
            e2 = naive_energy(cell, pot, vals)
            assert e1 == pytest.approx(e2, rel=1e-12, abs=1e-12), name


def test_energy_translation_invariance(tri_vacancy, morse):
    cell = build_supercell(tri_vacancy, tri_vacancy.A, 4)
    asm = Assembly(cell, morse)
    vals = small_field(cell, 2)
    shifted = vals + np.array([0.37, -1.4])
    assert asm.energy(shifted) == pytest.approx(asm.energy(vals), rel=1e-12)
    # and the forces sum to zero
    g = asm.gradient(vals)
    assert np.linalg.norm(g.sum(axis=0)) < 1e-11


# --- derivatives ---------------------------------------------------------------


@pytest.fixture(scope="module")
def vac_assembly(tri_vacancy, morse):
    cell = build_supercell(tri_vacancy, tri_vacancy.A, 3)
    return Assembly(cell, morse)


def test_gradient_matches_fd(vac_assembly):
    vals = small_field(vac_assembly.cell, 3)
    rng = np.random.default_rng(0)
    for _ in range(5):
        assert fd_gradient_error(vac_assembly, vals, rng) < 1e-8


def test_hessian_apply_matches_fd(vac_assembly):
    vals = small_field(vac_assembly.cell, 4)
    rng = np.random.default_rng(1)
    for _ in range(5):
        assert fd_hessian_error(vac_assembly, vals, rng) < 1e-7


def test_hessian_matrix_consistency(vac_assembly):
    cell = vac_assembly.cell
    vals = small_field(cell, 5)
    H = vac_assembly.hessian_matrix(vals)
    asym = abs(H - H.T).max()
    assert asym < 1e-12
    rng = np.random.default_rng(2)
    for _ in range(3):
        w = rng.standard_normal(vals.shape)
        hw = vac_assembly.hessian_apply(vals, w)
        assert np.allclose(H @ w.ravel(), hw.ravel(), atol=1e-11)
    # translation invariance: constants are in the kernel
    c = np.tile([1.0, -2.0], (cell.n_sites, 1)).ravel()
    assert np.linalg.norm(H @ c) < 1e-10


def test_hessian_matrix_budget(vac_assembly):
    with pytest.raises(ConfigurationError):
        vac_assembly.hessian_matrix(np.zeros((vac_assembly.cell.n_sites, 2)),
                                    budget=10)


def test_eam_hessian_fd(tri_vacancy):
    eam = EAMPotential()
    tri_e = build_homogeneous(A0_TRI_EAM * A_TRI, eam.support_radius)
    cell = build_supercell(apply_defect(tri_e, removed=[(0, 0)]), tri_e.A, 3)
    asm = Assembly(cell, eam)
    vals = small_field(cell, 6)
    rng = np.random.default_rng(3)
    assert fd_gradient_error(asm, vals, rng) < 1e-8
    assert fd_hessian_error(asm, vals, rng) < 1e-7
    H = asm.hessian_matrix(vals)
    assert abs(H - H.T).max() < 1e-12
    w = rng.standard_normal(vals.shape)
    assert np.allclose(H @ w.ravel(), asm.hessian_apply(vals, w).ravel(),
                       atol=1e-11)


def test_assembly_validation(tri_vacancy, morse):
    cell = build_supercell(tri_vacancy, tri_vacancy.A, 4)
    with pytest.raises(ConfigurationError):
        Assembly(cell, QuadraticFormPotential(m=1))    # m mismatch
    narrow = build_homogeneous(A0_TRI_MORSE * A_TRI, 1.1 * A0_TRI_MORSE)
    with pytest.raises(ConfigurationError):
        Assembly(build_supercell(narrow, narrow.A, 4), morse)  # misses bonds
    asm = Assembly(cell, morse)
    with pytest.raises(ConfigurationError):
        asm.energy(np.zeros((3, 2)))
    with pytest.raises(SingularityError):
        vals = np.zeros((cell.n_sites, 2))
        vals[0] = cell.positions[1] - cell.positions[0]
        asm.energy(vals)


# --- phonon symbol -------------------------------------------------------------


def test_symbol_zero_and_symmetry(morse, tri_hom):
    sym = PhononSymbol(morse, tri_hom)
    assert np.allclose(sym.matrix(np.zeros(2)), 0.0, atol=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(5):
        k = rng.uniform(-3, 3, size=2)
        H = sym.matrix(k)
        assert np.allclose(H, H.conj().T, atol=1e-14)
        assert np.allclose(sym.matrix(-k), H.T, atol=1e-13)


def test_symbol_scalar_laplacian():
    cell, pot = square_quadratic_cell(4)
    sym = PhononSymbol(pot, cell.model)
    rng = np.random.default_rng(1)
    for _ in range(5):
        k = rng.uniform(-3, 3, size=2)
        analytic = 2 * (2 - 2 * math.cos(k[0])) + 2 * (2 - 2 * math.cos(k[1]))
        assert sym.matrix(k)[0, 0].real == pytest.approx(analytic, abs=1e-12)
        assert sym.h_scalar(k[None])[0] == pytest.approx(analytic, abs=1e-12)


def test_phonon_check_frozen_constants(morse, tri_hom):
    rep = phonon_check(morse, tri_hom, k_grid_density=64)
    assert rep.stable
    assert rep.c0_estimate == pytest.approx(0.5831569793632162, rel=1e-10)
    d = rep.as_dict()
    assert d["stable"] is True and d["grid_density"] == 64

    eam = EAMPotential()
    tri_e = build_homogeneous(A0_TRI_EAM * A_TRI, eam.support_radius)
    assert phonon_check(eam, tri_e, k_grid_density=64).c0_estimate == pytest.approx(
        0.8588847049115007, rel=1e-10)


def test_phonon_check_compressed_lattice_verdict(morse):
    model = build_homogeneous(0.7 * A0_TRI_MORSE * A_TRI, morse.support_radius)
    rep = phonon_check(morse, model, k_grid_density=32)
    assert rep.stable
    assert rep.c0_estimate == pytest.approx(1.594337778362358, rel=1e-10)


def test_phonon_check_square_morse_unstable(morse):
    model = build_homogeneous(A0_SQ_MORSE * np.eye(2), morse.support_radius)
    rep = phonon_check(morse, model, k_grid_density=32)
    assert not rep.stable
    assert rep.lambda_worst == pytest.approx(-26.610516361820963, rel=1e-10)
    assert rep.c0_estimate < 0


def test_phonon_check_validation(morse, tri_hom):
    with pytest.raises(ConfigurationError):
        phonon_check(morse, tri_hom, k_grid_density=1)


# --- stability spectrum ----------------------------------------------------------


def laplacian_mode_eigenvalues(N, weight=1.0):
    ks = 2.0 * np.pi * np.arange(2 * N) / (2 * N)
    lam = [2 * weight * ((2 - 2 * math.cos(kx)) + (2 - 2 * math.cos(ky)))
           for kx in ks for ky in ks]
    lam.remove(lam[0])          # drop the zero mode
    return np.sort(lam)


def test_stability_spectrum_scalar_laplacian_dense():
    cell, pot = square_quadratic_cell(4, weight=1.3)
    asm = Assembly(cell, pot)
    rep = stability_spectrum(asm, np.zeros((cell.n_sites, 1)), n_eigs=6)
    assert rep.method == "dense"
    assert rep.index == 0
    expected = laplacian_mode_eigenvalues(4, weight=1.3)[:6]
    assert np.allclose(rep.eigenvalues, expected, atol=1e-10)


def test_stability_spectrum_lobpcg_matches_dense():
    cell, pot = square_quadratic_cell(8, weight=1.0)
    asm = Assembly(cell, pot)
    u0 = np.zeros((cell.n_sites, 1))
    dense = stability_spectrum(asm, u0, n_eigs=4)
    assert dense.method == "dense"
    iterative = stability_spectrum(asm, u0, n_eigs=4, dense_limit=10)
    assert iterative.method == "lobpcg"
    assert np.allclose(iterative.eigenvalues, dense.eigenvalues, rtol=1e-6)
    assert iterative.index == 0


# --- relaxed vacancy: frozen regression values -----------------------------------


@pytest.fixture(scope="module")
def relaxed_vacancy_N4(tri_vacancy, morse):
    cell = build_supercell(tri_vacancy, tri_vacancy.A, 4)
    asm = Assembly(cell, morse)
    res = relax(asm, opts=SolverOptions(tol_grad_inf=1e-10))
    return asm, res


def test_relaxed_vacancy_energy_frozen(relaxed_vacancy_N4):
    asm, res = relaxed_vacancy_N4
    assert res.converged
    assert res.energy == pytest.approx(-0.06379395076382618, abs=1e-12)


def test_relaxed_vacancy_spectrum_frozen(relaxed_vacancy_N4):
    asm, res = relaxed_vacancy_N4
    rep = stability_spectrum(asm, res.u, n_eigs=3)
    assert rep.index == 0
    frozen = [7.912913495131078, 7.912913495131111, 9.666689650813028]
    assert np.allclose(rep.eigenvalues, frozen, rtol=1e-8)


def test_infsup_constant_frozen(relaxed_vacancy_N4):
    asm, res = relaxed_vacancy_N4
    mu = infsup_constant(asm, res.u)
    assert mu == pytest.approx(0.4122132199146875, rel=1e-9)


def test_infsup_lobpcg_matches_dense(tri_vacancy, morse):
    cell = build_supercell(tri_vacancy, tri_vacancy.A, 8)
    asm = Assembly(cell, morse)
    res = relax(asm, opts=SolverOptions(tol_grad_inf=1e-10))
    dense = infsup_constant(asm, res.u)
    assert dense == pytest.approx(0.38581769239102026, rel=1e-9)
    iterative = infsup_constant(asm, res.u, dense_limit=10)
    assert iterative == pytest.approx(dense, rel=1e-6)
