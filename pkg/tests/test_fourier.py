import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ldlab.errors import ConfigurationError
from ldlab.fourier import (PeriodicGrid, int_adjugate, int_det,
                           int_inverse_unimodular, smith_normal_form)

ints = st.integers(min_value=-6, max_value=6)


def square_matrices(d):
    return st.lists(st.lists(ints, min_size=d, max_size=d),
                    min_size=d, max_size=d).map(np.array)


@given(square_matrices(2) | square_matrices(3))
def test_int_det_matches_float_det(M):
    assert int_det(M) == round(np.linalg.det(M.astype(float)))


@given(square_matrices(2) | square_matrices(3))
def test_adjugate_identity(M):
    adj = int_adjugate(M)
    det = int_det(M)
    assert np.array_equal(M @ adj, det * np.eye(M.shape[0], dtype=np.int64))


@given(square_matrices(2) | square_matrices(3))
def test_smith_normal_form_reconstructs(M):
    if int_det(M) == 0:
        with pytest.raises(ConfigurationError):
            smith_normal_form(M)
        return
    U, D, V = smith_normal_form(M)
    assert np.array_equal(U @ D @ V, M)
    assert abs(int_det(U)) == 1
    assert abs(int_det(V)) == 1
    assert np.array_equal(D, np.diag(np.diag(D)))
    assert np.all(np.diag(D) > 0)


def test_inverse_unimodular_rejects_non_unit_det():
    with pytest.raises(ConfigurationError):
        int_inverse_unimodular(np.array([[2, 0], [0, 1]]))


# fcc primitive vectors in a cubic box: the standard non-diagonal repeat matrix
FCC_M = np.array([[0, 1, 1], [1, 0, 1], [1, 1, 0]])


@pytest.mark.parametrize("M,twoN", [
    (np.eye(2, dtype=int), 4),
    (np.array([[1, 1], [0, 2]]), 2),
    (FCC_M, 2),
])
def test_grid_size_and_bijection(M, twoN):
    g = PeriodicGrid(M, twoN)
    assert g.size == abs(int_det(twoN * np.asarray(M)))
    reps = g.representatives()
    assert np.array_equal(g.rank_of(reps), np.arange(g.size))
    # translating by any cell period leaves every rank unchanged
    S = twoN * np.asarray(M)
    for col in range(S.shape[1]):
        assert np.array_equal(g.rank_of(reps + S[:, col]), np.arange(g.size))


@pytest.mark.parametrize("M,twoN", [(np.eye(2, dtype=int), 6), (FCC_M, 4)])
def test_stencil_phase_is_shift_multiplier(M, twoN):
    """fft of u(. + zeta) must equal stencil_phase(zeta) * fft(u)."""
    g = PeriodicGrid(M, twoN)
    rng = np.random.default_rng(3)
    reps = g.representatives()
    vals = rng.standard_normal((g.size, 2))
    for zeta in (np.eye(g.d, dtype=np.int64)[0], np.arange(1, g.d + 1)):
        shifted = vals[g.rank_of(reps + zeta)]
        F = g.fft(g.to_grid(vals))
        Fs = g.fft(g.to_grid(shifted))
        phase = g.stencil_phase(zeta)[..., None]
        assert np.max(np.abs(Fs - phase * F)) < 1e-10 * g.size


@pytest.mark.parametrize("M,twoN", [(np.eye(2, dtype=int), 4), (FCC_M, 2)])
def test_mode_fractions_match_phases(M, twoN):
    g = PeriodicGrid(M, twoN)
    f = g.mode_fractions()
    for zeta in (np.eye(g.d, dtype=np.int64)[0], np.arange(1, g.d + 1)):
        expected = np.exp(2j * np.pi * (f @ np.asarray(zeta, dtype=float)))
        got = g.stencil_phase(zeta).reshape(-1)
        assert np.max(np.abs(got - expected)) < 1e-12


def test_mode_fraction_zero_is_first():
    g = PeriodicGrid(FCC_M, 4)
    assert np.all(g.mode_fractions()[0] == 0.0)
