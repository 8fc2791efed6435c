"""Total energy, its variations, the phonon symbol, and spectral stability.

An Assembly pairs the stencil groups of a supercell with one site potential.
Site energies are renormalized per stencil (V_l(0) = 0), so the total is an
energy difference from the reference configuration.  The homogeneous group
covers every site farther than r_cut + R_def from the defect and is evaluated
in vectorized chunks; defect groups are small.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import (ConfigurationError, NumericalError, SingularityError,
                     StabilityError)
from .lattice import Displacement, LatticeModel, Supercell

_CHUNK = 4096


def _chunk_slices(n: int, chunk: int):
    for lo in range(0, n, chunk):
        yield slice(lo, min(lo + chunk, n))


class Assembly:
    """E_N(u) = sum_l V_l(Du(l)) on a supercell, with derivatives."""

    def __init__(self, cell: Supercell, potential, chunk: int = _CHUNK):
        potential.check_field_dim(cell.m, cell.d)
        if hasattr(potential, "reference_site_energy"):
            if cell.model.r_cut + 1e-9 < potential.support_radius:
                raise ConfigurationError(
                    f"model r_cut = {cell.model.r_cut} misses interactions; potential "
                    f"support radius is {potential.support_radius}")
        self.cell = cell
        self.potential = potential
        self.chunk = int(chunk)
        self.contexts = [potential.make_context(g.offsets) for g in cell.groups]

    # --- helpers ------------------------------------------------------------

    def _values(self, u) -> np.ndarray:
        vals = u.values if isinstance(u, Displacement) else np.asarray(u, dtype=float)
        if vals.shape != (self.cell.n_sites, self.cell.m):
            raise ConfigurationError(
                f"field shape {vals.shape} does not match cell "
                f"({self.cell.n_sites}, {self.cell.m})")
        return vals

    def _raise_collision(self, g, sl, vals):
        sites = g.sites[sl]
        v = g.offsets[None, :, :] + vals[g.neighbors[sl]] - vals[sites][:, None, :]
        r = np.linalg.norm(v, axis=-1)
        i, k = np.unravel_index(int(np.argmin(r)), r.shape)
        raise SingularityError(
            f"atoms nearly coincide at site {int(sites[i])} (bond {int(k)}, "
            f"length {r[i, k]:.3e})")

    # --- energy and variations ----------------------------------------------

    def energy(self, u) -> float:
        vals = self._values(u)
        total = 0.0
        for g, ctx in zip(self.cell.groups, self.contexts):
            for sl in _chunk_slices(len(g.sites), self.chunk):
                G = vals[g.neighbors[sl]] - vals[g.sites[sl]][:, None, :]
                try:
                    e = self.potential.energy_batch(ctx, G)
                except SingularityError:
                    self._raise_collision(g, sl, vals)
                total += float(np.sum(e))
        if math.isnan(total):
            raise NumericalError("energy evaluated to NaN")
        return total

    def gradient(self, u) -> np.ndarray:
        vals = self._values(u)
        out = np.zeros_like(vals)
        m = self.cell.m
        for g, ctx in zip(self.cell.groups, self.contexts):
            for sl in _chunk_slices(len(g.sites), self.chunk):
                sites = g.sites[sl]
                neigh = g.neighbors[sl]
                G = vals[neigh] - vals[sites][:, None, :]
                try:
                    P = self.potential.grad_batch(ctx, G)
                except SingularityError:
                    self._raise_collision(g, sl, vals)
                out[sites] -= P.sum(axis=1)
                if g.homogeneous:
                    # neighbor indices are unique within a column (the offset
                    # translation is a bijection of the periodic cell)
                    for c in range(neigh.shape[1]):
                        out[neigh[:, c]] += P[:, c, :]
                else:
                    np.add.at(out, neigh.ravel(), P.reshape(-1, m))
        return out

    def hessian_apply(self, u, w) -> np.ndarray:
        vals = self._values(u)
        wv = self._values(w)
        out = np.zeros_like(wv)
        m = self.cell.m
        for g, ctx in zip(self.cell.groups, self.contexts):
            for sl in _chunk_slices(len(g.sites), self.chunk):
                sites = g.sites[sl]
                neigh = g.neighbors[sl]
                G = vals[neigh] - vals[sites][:, None, :]
                W = wv[neigh] - wv[sites][:, None, :]
                try:
                    Q = self.potential.hess_apply_batch(ctx, G, W)
                except SingularityError:
                    self._raise_collision(g, sl, vals)
                out[sites] -= Q.sum(axis=1)
                if g.homogeneous:
                    for c in range(neigh.shape[1]):
                        out[neigh[:, c]] += Q[:, c, :]
                else:
                    np.add.at(out, neigh.ravel(), Q.reshape(-1, m))
        return out

    def hessian_matrix(self, u, budget: int = 120_000) -> sp.csr_matrix:
        """Sparse symmetric Hessian; only for n_sites * m within `budget`."""
        vals = self._values(u)
        m = self.cell.m
        nm = self.cell.n_sites * m
        if nm > budget:
            raise ConfigurationError(
                f"hessian_matrix needs n_sites*m = {nm} <= budget = {budget}; "
                f"use hessian_apply instead")
        im = np.arange(m)
        rows, cols, data = [], [], []

        def emit(X, Y, blocks):
            # blocks indexed [..., i, j]; X/Y site indices broadcastable to
            # blocks.shape[:-2]
            shp = blocks.shape
            r = np.broadcast_to((X * m)[..., None, None] + im[:, None], shp)
            c = np.broadcast_to((Y * m)[..., None, None] + im[None, :], shp)
            rows.append(r.ravel())
            cols.append(c.ravel())
            data.append(blocks.ravel())

        for g, ctx in zip(self.cell.groups, self.contexts):
            for sl in _chunk_slices(len(g.sites), self.chunk):
                sites = g.sites[sl]
                neigh = g.neighbors[sl]
                G = vals[neigh] - vals[sites][:, None, :]
                try:
                    D = self.potential.hess_diag_batch(ctx, G)
                except SingularityError:
                    self._raise_collision(g, sl, vals)
                L = np.broadcast_to(sites[:, None], neigh.shape)
                emit(L, L, D)
                emit(neigh, neigh, D)
                emit(L, neigh, -D)
                emit(neigh, L, -D)
                r1 = self.potential.hess_rank1_batch(ctx, G)
                if r1 is not None:
                    coef, b = r1                      # (n,), (n, K, m)
                    O = np.einsum("n,nki,nlj->nklij", coef, b, b)
                    for X, sx in ((neigh[:, :, None], 1.0), (L[:, :, None], -1.0)):
                        for Y, sy in ((neigh[:, None, :], 1.0), (L[:, None, :], -1.0)):
                            emit(np.broadcast_to(X, O.shape[:3]),
                                 np.broadcast_to(Y, O.shape[:3]),
                                 sx * sy * O)
        H = sp.coo_matrix(
            (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
            shape=(nm, nm)).tocsr()
        return H


# ---------------------------------------------------------------------------
# phonon stability


class PhononSymbol:
    """m x m Fourier symbol of the homogeneous Hessian at zero strain.

    H_hat(k) = sum_{rho,sigma} conj(e^{ik.rho}-1) V''(0)[rho,sigma] (e^{ik.sigma}-1);
    Hermitian, H_hat(0) = 0, H_hat(k) = H_hat(-k)^T.
    """

    def __init__(self, potential, model: LatticeModel):
        potential.check_field_dim(model.m, model.d)
        zetas, vecs = model.homogeneous_stencil()
        self.model = model
        self.offsets = vecs
        self.m = model.m
        ctx = potential.make_context(vecs)
        G0 = np.zeros((1, len(zetas), model.m))
        self.diag = potential.hess_diag_batch(ctx, G0)[0]      # (K, m, m)
        r1 = potential.hess_rank1_batch(ctx, G0)
        if r1 is None:
            self.rank1 = None
        else:
            coef, b = r1
            self.rank1 = (float(coef[0]), b[0])                # scalar, (K, m)

    def _phases(self, k_points) -> np.ndarray:
        k_points = np.atleast_2d(np.asarray(k_points, dtype=float))
        return np.exp(1j * (k_points @ self.offsets.T)) - 1.0   # (Nk, K)

    def matrices(self, k_points) -> np.ndarray:
        c = self._phases(k_points)
        H = np.einsum("nk,kij->nij", (c.conj() * c).real, self.diag)
        H = H.astype(complex)
        if self.rank1 is not None:
            coef, b = self.rank1
            w = c @ b                                           # (Nk, m)
            H += coef * np.conj(w)[:, :, None] * w[:, None, :]
        return H

    def matrix(self, k) -> np.ndarray:
        return self.matrices(np.asarray(k, dtype=float)[None])[0]

    def h_scalar(self, k_points) -> np.ndarray:
        """h_hat(k) = sum_rho |e^{ik.rho} - 1|^2 (scalar Laplacian symbol)."""
        c = self._phases(k_points)
        return np.sum((c.conj() * c).real, axis=1)


@dataclass
class PhononReport:
    stable: bool
    c0_estimate: float
    k_worst: np.ndarray
    lambda_worst: float
    grid_density: int

    def as_dict(self) -> dict:
        return {
            "stable": bool(self.stable),
            "c0_estimate": float(self.c0_estimate),
            "k_worst": [float(x) for x in np.atleast_1d(self.k_worst)],
            "lambda_worst": float(self.lambda_worst),
            "grid_density": int(self.grid_density),
        }


def phonon_check(potential, model: LatticeModel, k_grid_density: int = 64,
                 chunk: int = 8192) -> PhononReport:
    """Scan lambda_min(H_hat(k)) / h_hat(k) over a uniform nonzero-k grid.

    c0_estimate is the grid minimum of the ratio; stability requires every
    grid eigenvalue positive.  A finite grid is a witness, not a proof.
    """
    n = int(k_grid_density)
    if n < 2:
        raise ConfigurationError("k_grid_density must be at least 2")
    sym = PhononSymbol(potential, model)
    d = model.d
    recip = 2.0 * np.pi * np.linalg.inv(model.A).T
    frac = np.stack(np.meshgrid(*([np.arange(n) / n] * d), indexing="ij"),
                    axis=-1).reshape(-1, d)
    frac = frac[np.any(frac != 0.0, axis=1)]
    c0 = np.inf
    k_worst = np.zeros(d)
    lam_worst = np.inf
    for sl in _chunk_slices(len(frac), chunk):
        K = frac[sl] @ recip.T
        H = sym.matrices(K)
        lam = np.linalg.eigvalsh(H)[:, 0]
        ratio = lam / sym.h_scalar(K)
        i = int(np.argmin(ratio))
        if ratio[i] < c0:
            c0 = float(ratio[i])
            k_worst = K[i].copy()
            lam_worst = float(lam[i])
    return PhononReport(stable=bool(lam_worst > 0.0 and c0 > 0.0),
                        c0_estimate=c0, k_worst=k_worst,
                        lambda_worst=lam_worst, grid_density=n)


# ---------------------------------------------------------------------------
# spectral stability at a configuration


@dataclass
class StabilityReport:
    eigenvalues: np.ndarray
    index: int
    min_abs: float
    method: str
    residuals: np.ndarray | None = None
    index_is_lower_bound: bool = False
    c0_estimate: float | None = None

    def as_dict(self) -> dict:
        out = {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "index": int(self.index),
            "min_abs": float(self.min_abs),
            "method": self.method,
            "index_is_lower_bound": bool(self.index_is_lower_bound),
        }
        if self.residuals is not None:
            out["residuals"] = [float(x) for x in self.residuals]
        if self.c0_estimate is not None:
            out["c0_estimate"] = float(self.c0_estimate)
        return out


def _zero_mean_basis(n: int) -> np.ndarray:
    """Orthonormal basis of the mean-zero subspace of R^n (Helmert columns)."""
    V = np.zeros((n, n - 1))
    for j in range(1, n):
        V[:j, j - 1] = 1.0
        V[j, j - 1] = -float(j)
        V[:, j - 1] /= math.sqrt(j * (j + 1.0))
    return V


def _hessian_norm_estimate(asm: Assembly, vals, rng, iters: int = 25) -> float:
    ns, m = vals.shape
    v = rng.standard_normal((ns, m))
    v -= v.mean(axis=0)
    v /= np.linalg.norm(v)
    lam = 1.0
    for _ in range(iters):
        w = asm.hessian_apply(vals, v)
        w -= w.mean(axis=0)
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 1.0
        lam = nw
        v = w / nw
    return lam


def stability_spectrum(asm: Assembly, u, n_eigs: int = 6,
                       dense_limit: int = 1600, use_precond: bool = True,
                       maxiter: int = 400, seed: int = 0,
                       neg_tol: float = 1e-8) -> StabilityReport:
    """Extreme low spectrum of the Hessian on the zero-mean subspace.

    Small problems are solved densely in an explicit mean-zero basis; large
    ones by LOBPCG on P H P + sigma (I - P) with a lattice-Laplacian
    preconditioner (constants are shifted above the window of interest).
    """
    vals = asm._values(u)
    ns, m = vals.shape
    nm = ns * m
    n_eigs = int(min(n_eigs, nm - m))
    if n_eigs < 1:
        raise ConfigurationError("cell too small for a stability spectrum")

    if nm <= dense_limit:
        H = asm.hessian_matrix(vals, budget=dense_limit).toarray()
        Q = np.kron(_zero_mean_basis(ns), np.eye(m))
        evals = np.linalg.eigvalsh(Q.T @ H @ Q)
        idx = int(np.sum(evals < -neg_tol))
        return StabilityReport(eigenvalues=evals[:n_eigs].copy(), index=idx,
                               min_abs=float(np.min(np.abs(evals))),
                               method="dense")

    from scipy.sparse.linalg import LinearOperator, lobpcg

    rng = np.random.default_rng(seed)
    sigma = 2.0 * _hessian_norm_estimate(asm, vals, rng) + 1.0

    def project(X):
        Xs = X.reshape(ns, m, -1)
        return (Xs - Xs.mean(axis=0)).reshape(nm, -1)

    def matmat(X):
        X = X.reshape(nm, -1)
        PX = project(X)
        out = np.empty_like(X)
        for c in range(X.shape[1]):
            hv = asm.hessian_apply(vals, PX[:, c].reshape(ns, m))
            hv -= hv.mean(axis=0)
            out[:, c] = hv.ravel()
        return out + sigma * (X - PX)

    A = LinearOperator((nm, nm), matvec=lambda x: matmat(x).ravel(),
                       matmat=matmat, dtype=float)
    M = None
    if use_precond:
        from .solver import LatticePreconditioner
        prec = LatticePreconditioner(asm.cell, potential=asm.potential)

        def pmat(X):
            X = X.reshape(nm, -1)
            PX = project(X)
            out = np.empty_like(X)
            for c in range(X.shape[1]):
                w = prec.apply(PX[:, c].reshape(ns, m))
                w -= w.mean(axis=0)
                out[:, c] = w.ravel()
            return out + (X - PX) / sigma

        M = LinearOperator((nm, nm), matvec=lambda x: pmat(x).ravel(),
                           matmat=pmat, dtype=float)

    X0 = project(rng.standard_normal((nm, n_eigs)))
    X0, _ = np.linalg.qr(X0)
    try:
        # we over-ask on tol and verify residuals below; silence the advisory
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Exited")
            evals, evecs = lobpcg(A, X0, M=M, largest=False, tol=1e-9 * sigma,
                                  maxiter=maxiter)
    except Exception as exc:  # scipy raises plain LinAlgError on breakdown
        raise NumericalError(f"stability eigensolve failed: {exc}") from exc
    order = np.argsort(evals)
    evals = np.asarray(evals)[order]
    evecs = evecs[:, order]
    res = np.linalg.norm(matmat(evecs) - evecs * evals[None, :], axis=0)
    ok = res <= 1e-5 * max(1.0, sigma)
    if not np.all(ok):
        raise NumericalError(
            f"stability eigensolve did not converge; residuals {res.tolist()}")
    idx = int(np.sum(evals < -neg_tol))
    return StabilityReport(eigenvalues=evals, index=idx,
                           min_abs=float(np.min(np.abs(evals))),
                           method="lobpcg", residuals=res,
                           index_is_lower_bound=bool(idx == n_eigs))


def infsup_constant(asm: Assembly, u, dense_limit: int = 2000,
                    maxiter: int = 800, seed: int = 0) -> float:
    """Smallest eigenvalue of the Hessian measured in the strain metric.

    Solves the generalized problem <Hv, v> / |Dv|^2 -> min over zero-mean
    fields.  Raw zero-mean eigenvalues scale like N^{-2} through the
    acoustic modes; the strain Gram normalization removes that, so the
    value is comparable across cell sizes (its large-N limit is the
    operator's inf-sup constant).
    """
    from .potential import QuadraticFormPotential

    vals = asm._values(u)
    ns, m = vals.shape
    nm = ns * m
    gram = Assembly(asm.cell, QuadraticFormPotential(
        m=m, weight=1.0, support=asm.cell.model.r_cut))
    u0 = np.zeros_like(vals)

    if nm <= dense_limit:
        from scipy.linalg import eigh
        H = asm.hessian_matrix(vals, budget=dense_limit).toarray()
        L = gram.hessian_matrix(u0, budget=dense_limit).toarray()
        Q = np.kron(_zero_mean_basis(ns), np.eye(m))
        evals = eigh(Q.T @ H @ Q, Q.T @ L @ Q, eigvals_only=True,
                     subset_by_index=[0, 0])
        return float(evals[0])

    from scipy.sparse.linalg import LinearOperator, lobpcg

    rng = np.random.default_rng(seed)
    sigma = 2.0 * _hessian_norm_estimate(asm, vals, rng) + 1.0

    def project(X):
        Xs = X.reshape(ns, m, -1)
        return (Xs - Xs.mean(axis=0)).reshape(nm, -1)

    def pencil(assembly, field, shift):
        def matmat(X):
            X = X.reshape(nm, -1)
            PX = project(X)
            out = np.empty_like(X)
            for c in range(X.shape[1]):
                hv = assembly.hessian_apply(field, PX[:, c].reshape(ns, m))
                hv -= hv.mean(axis=0)
                out[:, c] = hv.ravel()
            return out + shift * (X - PX)
        return matmat

    amat = pencil(asm, vals, sigma)
    bmat = pencil(gram, u0, 1.0)
    A = LinearOperator((nm, nm), matvec=lambda x: amat(x).ravel(),
                       matmat=amat, dtype=float)
    Bop = LinearOperator((nm, nm), matvec=lambda x: bmat(x).ravel(),
                         matmat=bmat, dtype=float)

    from .solver import LatticePreconditioner
    prec = LatticePreconditioner(asm.cell, potential=asm.potential)

    def pmat(X):
        X = X.reshape(nm, -1)
        PX = project(X)
        out = np.empty_like(X)
        for c in range(X.shape[1]):
            w = prec.apply(PX[:, c].reshape(ns, m))
            w -= w.mean(axis=0)
            out[:, c] = w.ravel()
        return out + (X - PX) / sigma

    M = LinearOperator((nm, nm), matvec=lambda x: pmat(x).ravel(),
                       matmat=pmat, dtype=float)

    X0 = project(rng.standard_normal((nm, 4)))
    X0, _ = np.linalg.qr(X0)
    try:
        with warnings.catch_warnings():
            warnings.filterwarnings("ignore", message="Exited")
            evals, evecs = lobpcg(A, X0, B=Bop, M=M, largest=False,
                                  tol=1e-9 * sigma, maxiter=maxiter)
    except Exception as exc:
        raise NumericalError(f"inf-sup eigensolve failed: {exc}") from exc
    order = np.argsort(evals)
    mu = float(np.asarray(evals)[order][0])
    x = evecs[:, order[0]].reshape(nm, 1)
    r = np.linalg.norm(amat(x) - mu * bmat(x))
    scale = np.linalg.norm(amat(x)) + abs(mu) * np.linalg.norm(bmat(x))
    if r > 2e-4 * max(scale, 1.0):
        raise NumericalError(
            f"inf-sup eigensolve did not converge; relative residual {r / scale:.2e}")
    return mu
