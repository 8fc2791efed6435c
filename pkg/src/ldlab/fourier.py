"""Exact integer bookkeeping for periodic supercells and FFT grids.

A periodic cell repeats on the sublattice S Z^d of the integer coordinate
lattice, S = 2N*M with M = A^{-1} B integer.  The quotient group Z^d / S Z^d
is generally not a plain product grid (M need not be diagonal: the fcc
primitive basis with a cubic cell is the standard offender), so we
diagonalize S over the integers once, S = U D V with U, V unimodular, and
work on the product grid y = U^{-1} z mod diag(D).  All index maps are exact
integer arithmetic; floats only enter when building wavevectors.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError


def _int_matrix(M) -> np.ndarray:
    M = np.asarray(M)
    Mi = np.rint(M).astype(np.int64)
    if not np.all(np.abs(M - Mi) < 1e-9):
        raise ConfigurationError(f"matrix is not integer: {M!r}")
    return Mi


def int_det(M: np.ndarray) -> int:
    """Determinant of a small integer matrix, exactly."""
    M = _int_matrix(M)
    d = M.shape[0]
    if d == 1:
        return int(M[0, 0])
    if d == 2:
        return int(M[0, 0]) * int(M[1, 1]) - int(M[0, 1]) * int(M[1, 0])
    if d == 3:
        a, b, c = (int(x) for x in M[0])
        p, q, r = (int(x) for x in M[1])
        u, v, w = (int(x) for x in M[2])
        return a * (q * w - r * v) - b * (p * w - r * u) + c * (p * v - q * u)
    # cofactor expansion beyond d=3; d stays tiny in practice
    det = 0
    for j in range(d):
        minor = np.delete(np.delete(M, 0, axis=0), j, axis=1)
        det += (-1) ** j * int(M[0, j]) * int_det(minor)
    return det


def int_adjugate(M: np.ndarray) -> np.ndarray:
    """Adjugate adj(M) with M @ adj(M) = det(M) I, exact integers."""
    M = _int_matrix(M)
    d = M.shape[0]
    adj = np.empty((d, d), dtype=np.int64)
    for i in range(d):
        for j in range(d):
            minor = np.delete(np.delete(M, i, axis=0), j, axis=1)
            adj[j, i] = (-1) ** (i + j) * int_det(minor) if d > 1 else 1
    return adj


def int_inverse_unimodular(M: np.ndarray) -> np.ndarray:
    """Inverse of a unimodular integer matrix (det = +-1), exact."""
    det = int_det(M)
    if det not in (1, -1):
        raise ConfigurationError(f"matrix is not unimodular (det={det})")
    return (int_adjugate(M) * det).astype(np.int64)


def smith_normal_form(S) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Diagonalize a nonsingular integer matrix over Z.

    Returns (U, D, V) with S = U @ D @ V, U and V unimodular and D diagonal
    with positive entries.  Divisibility ordering of D is not guaranteed
    (not needed for grid indexing).
    """
    S = _int_matrix(S)
    d = S.shape[0]
    if int_det(S) == 0:
        raise ConfigurationError("supercell repeat matrix is singular")
    A = S.astype(object).copy()  # python ints: no overflow during reduction
    P = np.eye(d, dtype=object)  # row ops accumulate:  A = P @ S @ Q
    Q = np.eye(d, dtype=object)

    def swap_rows(i, j):
        A[[i, j], :] = A[[j, i], :]
        P[[i, j], :] = P[[j, i], :]

    def swap_cols(i, j):
        A[:, [i, j]] = A[:, [j, i]]
        Q[:, [i, j]] = Q[:, [j, i]]

    def addmul_row(dst, src, k):
        A[dst, :] += k * A[src, :]
        P[dst, :] += k * P[src, :]

    def addmul_col(dst, src, k):
        A[:, dst] += k * A[:, src]
        Q[:, dst] += k * Q[:, src]

    for t in range(d):
        while True:
            # move the smallest nonzero entry of the trailing block to (t,t)
            sub = [(abs(A[i, j]), i, j) for i in range(t, d) for j in range(t, d) if A[i, j] != 0]
            _, pi, pj = min(sub)
            if pi != t:
                swap_rows(t, pi)
            if pj != t:
                swap_cols(t, pj)
            if A[t, t] < 0:
                A[t, :] *= -1
                P[t, :] *= -1
            done = True
            for i in range(t + 1, d):
                if A[i, t] != 0:
                    addmul_row(i, t, -(A[i, t] // A[t, t]))
                    if A[i, t] != 0:
                        done = False
            for j in range(t + 1, d):
                if A[t, j] != 0:
                    addmul_col(j, t, -(A[t, j] // A[t, t]))
                    if A[t, j] != 0:
                        done = False
            if done and all(A[i, t] == 0 for i in range(t + 1, d)) \
                    and all(A[t, j] == 0 for j in range(t + 1, d)):
                break

    D = np.zeros((d, d), dtype=np.int64)
    for i in range(d):
        D[i, i] = int(A[i, i])
    P64 = P.astype(np.int64)
    Q64 = Q.astype(np.int64)
    U = int_inverse_unimodular(P64)
    V = int_inverse_unimodular(Q64)
    return U, D, V


class PeriodicGrid:
    """Index engine for the quotient group Z^d / (2N M) Z^d.

    Provides the bijection between integer lattice coordinates and a product
    grid of shape dims = diag(D), plus FFT helpers on that grid.  Site values
    are stored grid-ordered; callers keep their own site ordering and convert
    through `rank_of`.
    """

    def __init__(self, M, twoN: int):
        self.M = _int_matrix(M)
        self.twoN = int(twoN)
        self.d = self.M.shape[0]
        S = self.twoN * self.M
        U, D, V = smith_normal_form(S)
        self.dims = tuple(int(D[i, i]) for i in range(self.d))
        self.size = int(np.prod(self.dims))
        self._Uinv = int_inverse_unimodular(U)
        self._U = U

    def y_of(self, Z) -> np.ndarray:
        """Product-grid coordinates of integer lattice points, shape (..., d)."""
        Z = np.asarray(Z, dtype=np.int64)
        y = Z @ self._Uinv.T
        return np.mod(y, np.array(self.dims, dtype=np.int64))

    def rank_of(self, Z) -> np.ndarray:
        """Flat grid index of integer lattice points."""
        y = self.y_of(Z)
        return np.ravel_multi_index(tuple(y[..., i] for i in range(self.d)), self.dims)

    def representatives(self) -> np.ndarray:
        """One integer-coordinate representative per grid slot (grid order).

        Not canonical cell representatives; wrap separately if positions
        matter.
        """
        grids = np.meshgrid(*[np.arange(n, dtype=np.int64) for n in self.dims], indexing="ij")
        Y = np.stack([g.reshape(-1) for g in grids], axis=-1)
        return Y @ self._U.T

    # --- FFT plumbing -----------------------------------------------------

    def to_grid(self, values: np.ndarray) -> np.ndarray:
        """Reshape flat grid-ordered values (size, m) to (dims..., m)."""
        m = values.shape[-1]
        return values.reshape(*self.dims, m)

    def fft(self, grid_values: np.ndarray) -> np.ndarray:
        return np.fft.fftn(grid_values, axes=tuple(range(self.d)))

    def ifft(self, grid_modes: np.ndarray) -> np.ndarray:
        return np.fft.ifftn(grid_modes, axes=tuple(range(self.d)))

    def stencil_phase(self, zeta) -> np.ndarray:
        """Per-mode phase e^{i k.rho} for one integer stencil offset zeta.

        Array of shape dims; mode kappa carries exp(2*pi*i sum_j kappa_j w_j / D_j)
        with w = U^{-1} zeta, which equals e^{i k(kappa) . A zeta}.
        """
        w = (self._Uinv @ np.asarray(zeta, dtype=np.int64)) % np.array(self.dims)
        phase = np.ones((), dtype=np.complex128)
        for axis, (n, wj) in enumerate(zip(self.dims, w)):
            ax = np.exp(2j * np.pi * wj * np.arange(n) / n)
            shape = [1] * self.d
            shape[axis] = n
            phase = phase * ax.reshape(shape)
        return np.broadcast_to(phase, self.dims).copy()

    def stencil_phases(self, zetas) -> np.ndarray:
        """Stacked phases for many offsets, shape (K, dims...)."""
        zetas = np.asarray(zetas, dtype=np.int64)
        return np.stack([self.stencil_phase(z) for z in zetas], axis=0)

    def mode_fractions(self) -> np.ndarray:
        """Reciprocal fractional coordinates f per mode (flat C order).

        Mode kappa represents the plane wave e^{i k . A z} with
        k = 2 pi A^{-T} f and f = U^{-T} (kappa / D); exact up to division.
        """
        grids = np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij")
        kap = np.stack([g.reshape(-1) for g in grids], axis=-1).astype(float)
        kap /= np.array(self.dims, dtype=float)
        return kap @ self._Uinv.astype(float)
