"""Periodic lattice Green's functions by Fourier inversion of the symbol.

G_N solves the mean-corrected point-source equation of the homogeneous
Hessian on the periodic cell; the infinite-lattice function is only ever
used through finite differences, approximated by a much larger cell.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, NumericalError, StabilityError
from .lattice import LatticeModel, Supercell, cell_heights
from .model import Assembly, PhononSymbol, _chunk_slices

_MODE_CHUNK = 65536


@dataclass
class GreensTable:
    """G_N(l) as (n_sites, m, m) matrices in cell site order, zero-mean."""
    cell: Supercell
    values: np.ndarray
    zero_mean: bool = True
    _shift_cache: dict = field(default_factory=dict, repr=False)

    @property
    def N(self) -> int:
        return self.cell.N

    @property
    def m(self) -> int:
        return self.values.shape[-1]

    def matrix(self, ell) -> np.ndarray:
        idx = int(self.cell.site_of_z(np.asarray(ell, dtype=np.int64)[None])[0])
        return self.values[idx]

    def total(self) -> np.ndarray:
        return self.values.sum(axis=0)

    def point_symmetry_error(self) -> float:
        """max_l |G(l) - G(-l)^T|; zero for any real symbol."""
        idxm = self.cell.site_of_z(-self.cell.z_lattice)
        flipped = np.transpose(self.values[idxm], (0, 2, 1))
        return float(np.abs(self.values - flipped).max())

    def shift_index(self, zeta) -> np.ndarray:
        key = tuple(int(c) for c in zeta)
        if key not in self._shift_cache:
            self._shift_cache[key] = self.cell.site_of_z(
                self.cell.z_lattice + np.asarray(key, dtype=np.int64))
        return self._shift_cache[key]


def periodic_greens(potential, model: LatticeModel, B, N: int) -> GreensTable:
    """Invert the phonon symbol per reciprocal mode; zero mode set to 0.

    Raises StabilityError when the symbol is singular at a nonzero mode
    (phonon-unstable reference state).
    """
    if model.is_defective:
        raise ConfigurationError("Green's functions use the homogeneous model")
    cell = Supercell(model, B, N)
    sym = PhononSymbol(potential, model)
    grid = cell.grid
    frac = grid.mode_fractions()
    kvecs = 2.0 * np.pi * frac @ np.linalg.inv(model.A)
    m = model.m
    Ghat = np.empty((grid.size, m, m), dtype=complex)
    for sl in _chunk_slices(grid.size, _MODE_CHUNK):
        H = sym.matrices(kvecs[sl])
        lam = np.linalg.eigvalsh(H)[:, 0]
        nz = np.ones(len(lam), dtype=bool)
        if sl.start == 0:
            nz[0] = False               # kappa = 0 handled by gauge
        if np.any(lam[nz] <= 0.0):
            bad = int(np.argmin(np.where(nz, lam, np.inf)))
            raise StabilityError(
                f"singular phonon symbol at k = {kvecs[sl][bad]} "
                f"(lambda_min = {lam[bad]:.3e})")
        if sl.start == 0:
            Ghat[0] = 0.0
            Ghat[1:sl.stop] = np.linalg.inv(H[1:])
        else:
            Ghat[sl] = np.linalg.inv(H)
    back = grid.ifft(Ghat.reshape(*grid.dims, m, m))
    scale = float(np.abs(back.real).max())
    if float(np.abs(back.imag).max()) > 1e-9 * max(scale, 1.0):
        raise NumericalError("Green's table came out non-real; symbol asymmetry")
    values = back.real.reshape(grid.size, m, m)[grid.rank_of(cell.z_lattice)]
    return GreensTable(cell=cell, values=values)


def greens_differences(table: GreensTable, offsets) -> np.ndarray:
    """Nested finite differences D_rho1 ... D_rhoj G_N, periodic wrap.

    `offsets` is a sequence of integer stencil offsets, each required to be
    in the homogeneous stencil.
    """
    cell = table.cell
    allowed = {tuple(int(c) for c in z) for z in cell.hom_zetas}
    F = table.values
    for zeta in offsets:
        tz = tuple(int(c) for c in zeta)
        if tz not in allowed:
            raise ConfigurationError(f"offset {tz} is not in the homogeneous stencil")
        idx = table.shift_index(tz)
        F = F[idx] - F
    return F


def difference_magnitude(table: GreensTable, j: int) -> np.ndarray:
    """Per-site norm of the full j-th difference tensor.

    |(D)^j G(l)|^2 sums |D_rho1 ... D_rhoj G(l)|_F^2 over all stencil
    j-tuples; j = 0 gives |G(l)|_F.
    """
    if j < 0:
        raise ConfigurationError("difference order must be nonnegative")
    cell = table.cell
    idxs = [table.shift_index(z) for z in cell.hom_zetas]
    acc = np.zeros(cell.n_sites)

    def rec(F, depth):
        if depth == j:
            acc[:] += np.einsum("nij,nij->n", F, F)
            return
        for idx in idxs:
            rec(F[idx] - F, depth + 1)

    rec(table.values, 0)
    return np.sqrt(acc)


@dataclass
class DecayFit:
    j: int
    slope: float
    intercept: float
    residual: float
    rows: list                        # (r, max |(D)^j G| on shell)

    def as_dict(self) -> dict:
        return {"j": self.j, "slope": self.slope, "intercept": self.intercept,
                "residual": self.residual,
                "rows": [[float(r), float(v)] for r, v in self.rows]}


def decay_fit(table: GreensTable, j: int, r_min: float | None = None,
              r_max: float | None = None, n_bins: int = 8,
              underflow: float = 1e-13) -> DecayFit:
    """Log-log slope of shell maxima of |(D)^j G_N| vs radius."""
    from .study import fit_rate
    cell = table.cell
    if r_min is None:
        r_min = 2.0 * cell.model.r_cut
    if r_max is None:
        r_max = 0.5 * cell.N * cell_heights(cell.B).min()
    if not (0 < r_min < r_max):
        raise ConfigurationError(f"bad radius window [{r_min}, {r_max}]")
    mag = difference_magnitude(table, j)
    r = np.linalg.norm(cell.positions, axis=1)
    edges = np.geomspace(r_min, r_max, n_bins + 1)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (r >= lo) & (r < hi)
        if not sel.any():
            continue
        v = float(mag[sel].max())
        if v < underflow:
            continue
        rows.append((math.sqrt(lo * hi), v))
    fit = fit_rate(rows)
    return DecayFit(j=j, slope=fit.slope, intercept=fit.intercept,
                    residual=fit.residual, rows=rows)


def defining_residual(table: GreensTable, potential) -> float:
    """Sup-norm residual of H G e_i = delta_0 e_i - 1/|cell| e_i per column."""
    cell = table.cell
    asm = Assembly(cell, potential)
    n = cell.n_sites
    origin = int(cell.site_of_z(np.zeros((1, cell.d), dtype=np.int64))[0])
    zeros = np.zeros((n, cell.m))
    worst = 0.0
    for i in range(table.m):
        col = np.ascontiguousarray(table.values[:, :, i])
        r = asm.hessian_apply(zeros, col)
        rhs = np.zeros_like(col)
        rhs[:, i] = -1.0 / n
        rhs[origin, i] += 1.0
        worst = max(worst, float(np.abs(r - rhs).max()))
    return worst


@dataclass
class GreensStudy:
    N_big: int
    per_j: dict                      # j -> {"errors": [(N, err)], "fit": RateFit}

    def as_dict(self) -> dict:
        out = {"N_big": self.N_big, "per_j": {}}
        for j, rec in self.per_j.items():
            out["per_j"][str(j)] = {
                "errors": [[int(n), float(e)] for n, e in rec["errors"]],
                "fit": rec["fit"].as_dict(),
            }
        return out


def _difference_sup_error(tab: GreensTable, big: GreensTable,
                          match: np.ndarray, j: int) -> float:
    idx_s = [tab.shift_index(z) for z in tab.cell.hom_zetas]
    idx_b = [big.shift_index(z) for z in big.cell.hom_zetas]
    acc = np.zeros(tab.cell.n_sites)

    def rec(FS, FB, depth):
        if depth == j:
            diff = FS - FB[match]
            acc[:] += np.einsum("nij,nij->n", diff, diff)
            return
        for iS, iB in zip(idx_s, idx_b):
            rec(FS[iS] - FS, FB[iB] - FB, depth + 1)

    rec(tab.values, big.values, 0)
    return float(np.sqrt(acc).max())


def greens_convergence_study(potential, model: LatticeModel, N_list,
                             j_list=(1, 2), N_big: int | None = None,
                             B=None) -> GreensStudy:
    """Errors max_{Lambda_N} |(D)^j G_big - (D)^j G_N| and their slopes.

    The large cell stands in for the infinite lattice, which needs
    N_big >= 4 * max(N_list) to keep the proxy error subdominant.
    """
    from .study import fit_rate
    if B is None:
        B = model.A
    N_list = sorted(int(n) for n in N_list)
    if len(N_list) < 3:
        raise ConfigurationError("rate fits need at least 3 cell sizes")
    if N_big is None:
        N_big = 4 * N_list[-1]
    if N_big < 4 * N_list[-1]:
        raise ConfigurationError(
            f"N_big = {N_big} must be at least 4 * max(N_list) = {4 * N_list[-1]}")
    big = periodic_greens(potential, model, B, N_big)
    per_j = {int(j): {"errors": []} for j in j_list}
    for N in N_list:
        tab = periodic_greens(potential, model, B, N)
        match = big.cell.site_of_z(tab.cell.z_lattice)
        for j in j_list:
            err = _difference_sup_error(tab, big, match, int(j))
            per_j[int(j)]["errors"].append((N, err))
    for j in per_j:
        per_j[j]["fit"] = fit_rate(per_j[j]["errors"])
    return GreensStudy(N_big=N_big, per_j=per_j)


def export_csv(table: GreensTable, path):
    """Integer coordinates and matrix entries, lattice sites only."""
    cell = table.cell
    d, m = cell.d, table.m
    cols = [f"z{i}" for i in range(d)] + [f"G{i}{j}" for i in range(m) for j in range(m)]
    with open(path, "w") as f:
        f.write(",".join(cols) + "\n")
        for z, M in zip(cell.z_lattice, table.values):
            entries = [str(int(c)) for c in z]
            entries += [f"{M[i, j]:.16e}" for i in range(m) for j in range(m)]
            f.write(",".join(entries) + "\n")
