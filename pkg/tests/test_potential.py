import itertools

import numpy as np
import pytest
from scipy.optimize import brentq

from conftest import A0_FCC_MORSE, A0_TRI_EAM, A0_TRI_MORSE, A_FCC, A_TRI
from ldlab.errors import ConfigurationError, SingularityError
from ldlab.lattice import homogeneous_offsets
from ldlab.potential import (CutoffSpline, EAMPotential, MorsePotential,
                             MorseRadial, QuadraticFormPotential, SpringRadial,
                             find_lattice_parameter)

# --- smooth cutoff ----------------------------------------------------------


@pytest.mark.parametrize("kind,order", [("cubic", 1), ("quintic", 2)])
def test_cutoff_spline_shape(kind, order):
    c = CutoffSpline(1.5, 2.3, kind=kind)
    assert c.value(1.0) == 1.0 and c.value(1.5) == 1.0
    assert c.value(2.3) == 0.0 and c.value(3.0) == 0.0
    assert c.value(1.9) == pytest.approx(0.5)
    r = np.linspace(1.0, 3.0, 201)
    v = c.value(r)
    assert np.all(np.diff(v) <= 1e-15)
    # smooth up to `order` derivatives across both knots
    for r0 in (1.5, 2.3):
        h = 1e-6
        assert abs(c.value(r0 + h) - c.value(r0 - h)) < 5e-6
        assert abs(c.d1(r0 + h) - c.d1(r0 - h)) < 5e-5 if order >= 2 else True


@pytest.mark.parametrize("kind", ["cubic", "quintic"])
def test_cutoff_spline_derivatives(kind):
    c = CutoffSpline(1.5, 2.3, kind=kind)
    h = 1e-6
    for r in (1.6, 1.9, 2.2):
        assert c.d1(r) == pytest.approx((c.value(r + h) - c.value(r - h)) / (2 * h), abs=1e-7)
        assert c.d2(r) == pytest.approx((c.d1(r + h) - c.d1(r - h)) / (2 * h), abs=1e-6)
    assert c.d1(1.0) == 0.0 and c.d1(2.5) == 0.0


def test_cutoff_spline_validation():
    with pytest.raises(ConfigurationError):
        CutoffSpline(2.3, 1.5)
    with pytest.raises(ConfigurationError):
        CutoffSpline(1.5, 2.3, kind="septic")


# --- radial functions ---------------------------------------------------------


def test_morse_radial_well():
    m = MorseRadial(alpha=4.0)
    assert m.value(1.0) == pytest.approx(-1.0)
    assert m.d1(1.0) == pytest.approx(0.0, abs=1e-14)
    assert m.d2(1.0) == pytest.approx(2.0 * 4.0 ** 2)   # curvature 2 a^2 at the well
    assert m.value(2.3) == 0.0 and m.value(5.0) == 0.0
    assert m.support == 2.3


@pytest.mark.parametrize("make", [
    lambda: MorseRadial(alpha=4.0),
    lambda: MorseRadial(alpha=3.0, taper=CutoffSpline(1.4, 2.0, kind="quintic")),
    lambda: SpringRadial(k=2.0, r0=1.1, support=1.6),
])
def test_radial_derivatives_fd(make):
    rad = make()
    h = 1e-6
    for r in (0.9, 1.05, 1.3, 1.55, 1.9):
        if r >= rad.support:
            continue
        assert rad.d1(r) == pytest.approx(
            (rad.value(r + h) - rad.value(r - h)) / (2 * h), abs=2e-6)
        assert rad.d2(r) == pytest.approx(
            (rad.d1(r + h) - rad.d1(r - h)) / (2 * h), abs=2e-5)


# --- site potentials ----------------------------------------------------------


def tri_stencil(a0, support):
    return homogeneous_offsets(a0 * A_TRI, support)[1]


def test_pair_energy_is_renormalized(morse):
    vecs = tri_stencil(A0_TRI_MORSE, morse.support_radius)
    assert morse.eval(vecs, np.zeros_like(vecs)) == 0.0
    # frozen per-site binding energy of the equilibrium triangular lattice
    assert morse.reference_site_energy(vecs) == pytest.approx(
        -3.344482040768489, abs=1e-12)


def test_pair_energy_single_bond_matches_radial(morse):
    vecs = np.array([[A0_TRI_MORSE, 0.0]])
    g = np.array([[0.1, 0.05]])
    r1 = np.linalg.norm(vecs[0] + g[0])
    expected = 0.5 * (morse.radial.value(r1) - morse.radial.value(A0_TRI_MORSE))
    assert morse.eval(vecs, g) == pytest.approx(expected, rel=1e-14)


def test_batch_matches_single(morse):
    vecs = tri_stencil(A0_TRI_MORSE, morse.support_radius)
    rng = np.random.default_rng(0)
    G = 0.05 * rng.standard_normal((7, *vecs.shape))
    ctx = morse.make_context(vecs)
    e = morse.energy_batch(ctx, G)
    for n in range(7):
        assert e[n] == pytest.approx(morse.eval(vecs, G[n]), rel=1e-14)


def test_collision_raises(morse):
    vecs = tri_stencil(A0_TRI_MORSE, morse.support_radius)
    with pytest.raises(SingularityError):
        morse.eval(vecs, -vecs)


POTENTIALS = {
    "morse": lambda: MorsePotential(alpha=4.0),
    "eam": lambda: EAMPotential(),
    "quadratic": lambda: QuadraticFormPotential(m=2, weight=1.3,
                                                linear=[[0.2, -0.1], [0.0, 0.4]],
                                                support=2.3),
}


@pytest.mark.parametrize("name", list(POTENTIALS))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_matches_fd(name, seed):
    pot = POTENTIALS[name]()
    vecs = tri_stencil(A0_TRI_MORSE, 2.3)
    rng = np.random.default_rng(seed)
    g = 0.05 * A0_TRI_MORSE * rng.standard_normal(vecs.shape)
    grad = pot.grad(vecs, g)
    h = 1e-6
    for k in range(vecs.shape[0]):
        for i in range(2):
            gp, gm = g.copy(), g.copy()
            gp[k, i] += h
            gm[k, i] -= h
            fd = (pot.eval(vecs, gp) - pot.eval(vecs, gm)) / (2 * h)
            assert grad[k, i] == pytest.approx(fd, abs=5e-7)


@pytest.mark.parametrize("name", list(POTENTIALS))
def test_hessian_matches_fd_and_is_symmetric(name):
    pot = POTENTIALS[name]()
    vecs = tri_stencil(A0_TRI_MORSE, 2.3)
    rng = np.random.default_rng(3)
    g = 0.05 * A0_TRI_MORSE * rng.standard_normal(vecs.shape)
    K, m = g.shape
    H = pot.hess(vecs, g)
    assert np.allclose(H, H.transpose(2, 3, 0, 1), atol=1e-12)
    h = 1e-6
    for k in range(K):
        for i in range(m):
            gp, gm = g.copy(), g.copy()
            gp[k, i] += h
            gm[k, i] -= h
            fd = (pot.grad(vecs, gp) - pot.grad(vecs, gm)) / (2 * h)
            assert np.allclose(H[:, :, k, i], fd, atol=2e-6)


@pytest.mark.parametrize("name", list(POTENTIALS))
def test_hess_apply_matches_full_hessian(name):
    pot = POTENTIALS[name]()
    vecs = tri_stencil(A0_TRI_MORSE, 2.3)
    rng = np.random.default_rng(4)
    G = 0.05 * A0_TRI_MORSE * rng.standard_normal((3, *vecs.shape))
    W = rng.standard_normal(G.shape)
    ctx = pot.make_context(vecs)
    out = pot.hess_apply_batch(ctx, G, W)
    for n in range(3):
        H = pot.hess(vecs, G[n])
        assert np.allclose(out[n], np.einsum("kilj,lj->ki", H, W[n]), atol=1e-12)


def test_quadratic_form_values():
    pot = QuadraticFormPotential(m=1, weight=2.0, support=1.5)
    vecs = np.array([[1.0, 0.0], [0.0, 1.0]])
    g = np.array([[0.5], [-1.0]])
    assert pot.eval(vecs, g) == pytest.approx(2.0 / 2 * (0.25 + 1.0))
    lin = QuadraticFormPotential(m=1, weight=2.0, linear=[[1.0, 0.0]], support=1.5)
    # adds (L rho) . g per bond: 1.0 * 0.5 + 0.0 * (-1.0)
    assert lin.eval(vecs, g) == pytest.approx(1.25 + 0.5)
    with pytest.raises(ConfigurationError):
        QuadraticFormPotential(m=1, weight=-1.0)
    with pytest.raises(ConfigurationError):
        pot.check_field_dim(2, 2)
    with pytest.raises(ConfigurationError):
        MorsePotential().check_field_dim(1, 2)


# --- lattice parameter --------------------------------------------------------


def unit_shells(A_unit, r_max, reach=6):
    """Sorted (radius, multiplicity) shells of the unit-scale lattice."""
    d = A_unit.shape[0]
    zs = np.array(list(itertools.product(range(-reach, reach + 1), repeat=d)))
    r = np.linalg.norm(zs @ A_unit.T, axis=1)
    r = np.sort(r[(r > 1e-12) & (r <= r_max)])
    shells = []
    for val in r:
        if shells and abs(val - shells[-1][0]) < 1e-9:
            shells[-1][1] += 1
        else:
            shells.append([float(val), 1])
    return shells


def a0_by_force_balance(potential, A_unit, bracket):
    """Independent equilibrium scale: root of dE/da from the shell sums."""
    shells = unit_shells(A_unit, potential.support_radius / bracket[0] + 0.5)

    def dE(a):
        out = 0.0
        if hasattr(potential, "pair"):           # embedded-atom form
            s = sum(n * potential.density.value(a * c) for c, n in shells)
            _, F1, _ = potential._F(s)
            for c, n in shells:
                out += 0.5 * n * c * potential.pair.d1(a * c)
                out += float(F1) * n * c * potential.density.d1(a * c)
        else:
            for c, n in shells:
                out += 0.5 * n * c * potential.radial.d1(a * c)
        return out

    return brentq(dE, *bracket, xtol=1e-13)


def test_lattice_parameter_triangular_morse(morse):
    a0 = find_lattice_parameter(morse, A_TRI)
    assert a0 == pytest.approx(A0_TRI_MORSE, abs=1e-9)
    assert a0 == pytest.approx(a0_by_force_balance(morse, A_TRI, (0.9, 1.0)), abs=1e-7)


def test_lattice_parameter_triangular_eam():
    pot = EAMPotential()
    a0 = find_lattice_parameter(pot, A_TRI)
    assert a0 == pytest.approx(A0_TRI_EAM, abs=1e-9)
    assert a0 == pytest.approx(a0_by_force_balance(pot, A_TRI, (0.85, 1.0)), abs=1e-7)


def test_lattice_parameter_fcc_morse(morse):
    a0 = find_lattice_parameter(morse, A_FCC)
    assert a0 == pytest.approx(A0_FCC_MORSE, abs=1e-9)
    assert a0 == pytest.approx(
        a0_by_force_balance(morse, A_FCC, (1.2, 1.35)), abs=1e-7)


def test_lattice_parameter_spring_square():
    pot_like = SpringRadial(k=1.0, r0=1.0, support=1.3)
    from ldlab.potential import PairPotential
    pot = PairPotential(pot_like)
    assert find_lattice_parameter(pot, np.eye(2), window=(0.8, 1.25)) == pytest.approx(
        1.0, abs=1e-9)


def test_lattice_parameter_validation(morse):
    with pytest.raises(ConfigurationError):
        find_lattice_parameter(QuadraticFormPotential(m=2), A_TRI)
    with pytest.raises(ConfigurationError):
        find_lattice_parameter(morse, A_TRI, window=(1.5, 1.6))
