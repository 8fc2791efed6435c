"""Point-defect lattice models, periodic supercells, strains, and regions.

Geometry conventions used throughout:

* The host crystal is a Bravais lattice A Z^d (columns of A are the basis).
  A point defect is a finite edit near the origin: `removed` lattice sites
  (integer coordinates) and `added` off-lattice sites (Cartesian positions),
  all strictly inside the ball of radius R_def.
* A supercell is the half-open cell B(-N, N]^d with B = A M, M integer;
  fields repeat on the sublattice 2N B Z^d.  Site bookkeeping is exact
  integer arithmetic (see fourier.PeriodicGrid); positions are floats.
* Interaction stencils R_l collect neighbor offsets with 0 < |rho| <= r_cut
  under the minimum image.  Strains are difference tuples
  Du(l) = (u(l+rho) - u(l))_{rho in R_l} with |Du(l)|^2 = sum_rho |D_rho u|^2.
* Cube regions Q_R = B(-R, R]^d give lattice truncations Lambda_R; non-integer
  radii are rounded up.  Ball radii (R_def, r_cut) are Cartesian lengths.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .fourier import PeriodicGrid, int_adjugate, int_det
from . import fourier

__all__ = [
    "LatticeModel", "Supercell", "Displacement", "StrainField",
    "build_homogeneous", "apply_defect", "build_supercell",
    "strain", "subset_norm", "truncate", "truncation_min_radius",
    "lambda_mask", "annulus_mask", "homogeneous_offsets",
]

# quantization step for hashing Cartesian bond offsets of added sites;
# distinct offsets differ by a site spacing, float jitter is ~1e-12
_KEY_QUANTUM = 1e-8


def _quantize(vec) -> tuple:
    return tuple(int(round(float(v) / _KEY_QUANTUM)) for v in vec)


def cell_heights(B: np.ndarray) -> np.ndarray:
    """Distances between opposite faces of the cell spanned by columns of B."""
    Binv = np.linalg.inv(B)
    return 1.0 / np.linalg.norm(Binv, axis=1)


def _offset_sort_key(key):
    # lattice offsets ('z', zeta) sort before added-site offsets ('a', j, qvec)
    if key[0] == "z":
        return (0, key[1])
    return (1, key[1], key[2])


def homogeneous_offsets(A: np.ndarray, r_cut: float):
    """Integer stencil offsets zeta with 0 < |A zeta| <= r_cut, and A zeta.

    Sorted lexicographically by zeta for deterministic ordering.
    """
    A = np.asarray(A, dtype=float)
    d = A.shape[0]
    Ainv = np.linalg.inv(A)
    bound = np.linalg.norm(Ainv, axis=1) * r_cut
    ranges = [range(-int(math.floor(b + 1e-9)) - 1, int(math.floor(b + 1e-9)) + 2)
              for b in bound]
    zetas = []
    for zeta in itertools.product(*ranges):
        if all(c == 0 for c in zeta):
            continue
        if np.linalg.norm(A @ np.array(zeta, dtype=float)) <= r_cut + 1e-9:
            zetas.append(zeta)
    zetas.sort()
    Z = np.array(zetas, dtype=np.int64).reshape(len(zetas), d)
    return Z, Z @ A.T


def _generated_lattice_det(zetas: np.ndarray) -> int:
    """|det| of the sublattice of Z^d generated by the offsets (0 if rank-deficient).

    The bond graph of the homogeneous lattice is connected iff the offsets
    generate all of Z^d, i.e. iff this determinant is 1.  Integer row
    echelon via repeated gcd elimination; row ops preserve the row lattice.
    """
    mat = [[int(x) for x in z] for z in zetas]
    d = zetas.shape[1]
    det = 1
    r = 0
    for col in range(d):
        while True:
            nz = [i for i in range(r, len(mat)) if mat[i][col] != 0]
            if len(nz) <= 1:
                break
            nz.sort(key=lambda i: abs(mat[i][col]))
            i, j = nz[0], nz[1]
            q = mat[j][col] // mat[i][col]
            mat[j] = [a - q * b for a, b in zip(mat[j], mat[i])]
        if not nz:
            return 0
        i0 = nz[0]
        mat[r], mat[i0] = mat[i0], mat[r]
        if mat[r][col] < 0:
            mat[r] = [-x for x in mat[r]]
        det *= mat[r][col]
        r += 1
    return det


@dataclass(frozen=True)
class LatticeModel:
    """A homogeneous lattice A Z^d, optionally with a local defect.

    Attributes:
        A: (d, d) basis matrix, columns are lattice vectors.
        m: number of displacement components per site (m = d for mechanics).
        r_cut: Cartesian interaction radius; stencils use 0 < |rho| <= r_cut.
        R_def: radius of the defect ball; all edits lie strictly inside.
        removed: integer coordinates of deleted lattice sites.
        added: Cartesian positions of extra sites.
    """
    A: np.ndarray
    m: int
    r_cut: float
    R_def: float = 0.0
    removed: tuple = ()
    added: tuple = ()

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def is_defective(self) -> bool:
        return bool(self.removed) or bool(self.added)

    def homogeneous_stencil(self):
        return homogeneous_offsets(self.A, self.r_cut)


def build_homogeneous(A, r_cut: float, m: int | None = None) -> LatticeModel:
    """Validate and wrap a homogeneous lattice model."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigurationError(f"basis matrix must be square, got shape {A.shape}")
    d = A.shape[0]
    if abs(np.linalg.det(A)) < 1e-12:
        raise ConfigurationError("basis matrix is singular")
    if r_cut <= 0:
        raise ConfigurationError("r_cut must be positive")
    zetas, vecs = homogeneous_offsets(A, r_cut)
    if len(zetas) == 0:
        raise ConfigurationError(
            f"r_cut={r_cut} is below the nearest-neighbor distance; empty stencil")
    if np.linalg.matrix_rank(vecs) < d:
        # name a direction missing from the span
        _, _, vt = np.linalg.svd(vecs)
        raise ConfigurationError(
            f"stencil offsets do not span R^{d}; deficient direction {vt[-1]}")
    if _generated_lattice_det(zetas) != 1:
        raise ConfigurationError(
            "stencil offsets generate a proper sublattice; bond graph disconnected")
    return LatticeModel(A=A, m=int(m) if m is not None else d, r_cut=float(r_cut))


def apply_defect(model: LatticeModel, removed=(), added=(), R_def: float | None = None,
                 ) -> LatticeModel:
    """Edit a homogeneous model with a local defect near the origin.

    `removed` entries are integer lattice coordinates; `added` entries are
    Cartesian positions.  All edits must lie strictly inside B(0, R_def) and
    the resulting bond graph must stay connected.
    """
    if model.is_defective:
        raise ConfigurationError("model already carries a defect")
    A = model.A
    removed_t = tuple(tuple(int(c) for c in z) for z in removed)
    added_t = tuple(tuple(float(x) for x in p) for p in added)
    if R_def is None:
        pts = [np.asarray(z, float) @ A.T for z in removed_t] + [np.asarray(p) for p in added_t]
        R_def = max((float(np.linalg.norm(p)) for p in pts), default=0.0) + 1e-9
        R_def = max(R_def, 1e-6)
    for z in removed_t:
        if np.linalg.norm(A @ np.array(z, float)) >= R_def:
            raise ConfigurationError(f"removed site {z} not strictly inside B(0, {R_def})")
    for p in added_t:
        if np.linalg.norm(p) >= R_def:
            raise ConfigurationError(f"added site {p} not strictly inside B(0, {R_def})")
    if len(set(removed_t)) != len(removed_t):
        raise ConfigurationError("duplicate removed sites")
    out = LatticeModel(A=A, m=model.m, r_cut=model.r_cut, R_def=float(R_def),
                       removed=removed_t, added=added_t)
    _check_defect_geometry(out)
    return out


def _check_defect_geometry(model: LatticeModel):
    """Connectivity and separation checks on a patch around the defect."""
    A, r_cut = model.A, model.r_cut
    d = model.d
    patch_R = model.R_def + 2.0 * model.r_cut
    Ainv = np.linalg.inv(A)
    bound = np.linalg.norm(Ainv, axis=1) * patch_R
    removed = set(model.removed)
    pts = []
    exterior = []  # connected to the (connected) homogeneous bulk
    for zeta in itertools.product(*[range(-int(b) - 1, int(b) + 2) for b in bound]):
        if zeta in removed:
            continue
        x = A @ np.array(zeta, float)
        r = np.linalg.norm(x)
        if r <= patch_R:
            pts.append(x)
            exterior.append(r > model.R_def + r_cut)
    for p in model.added:
        pts.append(np.array(p, float))
        exterior.append(False)
    pts = np.array(pts)
    n = len(pts)
    dist = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(dist, np.inf)
    if dist.min() < 1e-6:
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        raise ConfigurationError(
            f"defect sites nearly coincide: {pts[i]} and {pts[j]} at distance {dist.min():.2e}")
    adj = dist <= r_cut + 1e-9
    # union-find over the patch graph
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in zip(*np.nonzero(adj)):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[ri] = rj
    roots_ok = {find(i) for i in range(n) if exterior[i]}
    for i in range(n):
        if find(i) not in roots_ok:
            raise ConfigurationError(
                f"defect disconnects the bond graph near site at {pts[i]}")


# ---------------------------------------------------------------------------
# supercells


@dataclass
class StencilGroup:
    """Sites sharing one stencil: common offsets, per-site neighbor indices."""
    sites: np.ndarray        # (g,) int
    neighbors: np.ndarray    # (g, K) int
    offsets: np.ndarray      # (K, d) float, reference bond vectors
    offset_keys: tuple       # hashable per-offset identity, cell independent
    homogeneous: bool = False


class Supercell:
    """Periodic computational cell Lambda_N = Lambda cap B(-N, N]^d.

    Sites are ordered lexicographically by integer lattice coordinate, with
    added defect sites appended last.  The wrap map and all region tests for
    lattice sites are exact integer arithmetic.
    """

    def __init__(self, model: LatticeModel, B, N: int):
        B = np.asarray(B, dtype=float)
        if N < 1 or int(N) != N:
            raise ConfigurationError(f"N must be a positive integer, got {N}")
        N = int(N)
        d = model.d
        A = model.A
        Minv_B = np.linalg.solve(A, B)
        M = np.rint(Minv_B).astype(np.int64)
        if not np.allclose(Minv_B, M, atol=1e-8):
            raise ConfigurationError(
                "cell matrix B must have columns in A Z^d (A^{-1} B integer)")
        if N * cell_heights(B).min() <= model.r_cut:
            raise ConfigurationError(
                f"cell too small: N * min cell height = {N * cell_heights(B).min():.3g} "
                f"<= r_cut = {model.r_cut:.3g}; increase N")
        period = 2 * N * B
        if _shortest_lattice_vector(period) <= 2 * model.r_cut:
            raise ConfigurationError(
                "shortest periodic image distance below 2*r_cut; increase N")

        self.model = model
        self.B = B
        self.N = N
        self.M = M
        self.d = d
        self.m = model.m
        self.period = period
        self.grid = PeriodicGrid(M, 2 * N)
        self._adjM = int_adjugate(M)
        self._detM = int_det(M)
        if self._detM < 0:
            self._adjM = -self._adjM
            self._detM = -self._detM

        # enumerate canonical lattice sites (grid reps wrapped into the cell)
        reps = self.grid.representatives()
        Z = self.wrap_z(reps)
        order = np.lexsort(tuple(Z[:, k] for k in range(d - 1, -1, -1)))
        Z = Z[order]
        removed_idx = []
        if model.removed:
            zmap = {tuple(int(c) for c in z): i for i, z in enumerate(Z)}
            for zr in model.removed:
                zc = tuple(int(c) for c in self.wrap_z(np.array([zr], dtype=np.int64))[0])
                if zc not in zmap:
                    raise ConfigurationError(f"removed site {zr} is not a lattice site of the cell")
                removed_idx.append(zmap[zc])
        keep = np.ones(len(Z), dtype=bool)
        keep[removed_idx] = False
        self.z_lattice = Z[keep]
        self.n_lattice = len(self.z_lattice)

        self.positions = np.empty((self.n_lattice + len(model.added), d))
        self.positions[: self.n_lattice] = self.z_lattice @ A.T
        for j, p in enumerate(model.added):
            self.positions[self.n_lattice + j] = p
        self.n_sites = len(self.positions)

        self.slot_to_site = np.full(self.grid.size, -1, dtype=np.int64)
        self.slot_to_site[self.grid.rank_of(self.z_lattice)] = np.arange(self.n_lattice)

        self._build_stencils()
        self._mask_cache: dict[int, np.ndarray] = {}

    # --- exact coordinate maps --------------------------------------------

    def wrap_z(self, Z) -> np.ndarray:
        """Canonical representatives: M^{-1} z in (-N, N]^d, exact."""
        Z = np.asarray(Z, dtype=np.int64)
        P = Z @ self._adjM.T           # f = P / detM
        q = self._detM
        N = self.N
        num = P - N * q
        alpha = -((-num) // (2 * N * q))   # ceil((f - N) / 2N), componentwise
        return Z - alpha @ (2 * N * self.M).T

    def site_of_z(self, Z) -> np.ndarray:
        """Site indices for integer coordinates; -1 where the site was removed."""
        return self.slot_to_site[self.grid.rank_of(self.wrap_z(Z))]

    def lattice_fractional_num(self, Z) -> tuple[np.ndarray, int]:
        """Exact fractional cell coordinates as (numerators, denominator)."""
        Z = np.asarray(Z, dtype=np.int64)
        return Z @ self._adjM.T, self._detM

    # --- stencil assembly ----------------------------------------------------

    def _build_stencils(self):
        model = self.model
        A, d = model.A, self.d
        zetas, vecs = model.homogeneous_stencil()
        K = len(zetas)
        self.hom_zetas = zetas
        self.hom_offsets = vecs

        neigh = np.empty((self.n_lattice, K), dtype=np.int64)
        for c in range(K):
            neigh[:, c] = self.site_of_z(self.z_lattice + zetas[c])
        missing = neigh < 0

        lat_bonds: dict[int, list] = {}
        added_sten: list[list] = [[] for _ in model.added]
        if model.added:
            self._collect_added_bonds(lat_bonds, added_sten)

        affected = set(np.nonzero(missing.any(axis=1))[0].tolist()) | set(lat_bonds)
        hom_sites = np.array(sorted(set(range(self.n_lattice)) - affected), dtype=np.int64)

        groups: list[StencilGroup] = []
        hom_keys = tuple(("z", tuple(int(c) for c in z)) for z in zetas)
        if len(hom_sites):
            groups.append(StencilGroup(
                sites=hom_sites, neighbors=neigh[hom_sites],
                offsets=vecs.copy(), offset_keys=hom_keys, homogeneous=True))

        # defect-affected sites: assemble per-site offset lists, group by signature
        by_sig: dict[tuple, list] = {}
        for i in sorted(affected):
            entries = [(hom_keys[c], int(neigh[i, c]), vecs[c])
                       for c in range(K) if not missing[i, c]]
            entries += lat_bonds.get(i, [])
            entries.sort(key=lambda e: _offset_sort_key(e[0]))
            sig = tuple(e[0] for e in entries)
            by_sig.setdefault(sig, []).append((i, entries))
        for j, entries in enumerate(added_sten):
            entries = sorted(entries, key=lambda e: _offset_sort_key(e[0]))
            if not entries:
                raise ConfigurationError(f"added site {j} has no neighbors within r_cut")
            sig = ("added", j)  # added sites never share a group
            by_sig[sig] = [(self.n_lattice + j, entries)]
        for sig in sorted(by_sig, key=lambda s: by_sig[s][0][0]):
            members = by_sig[sig]
            sites = np.array([i for i, _ in members], dtype=np.int64)
            K_g = len(members[0][1])
            nb = np.array([[e[1] for e in entries] for _, entries in members], dtype=np.int64)
            offs = np.array([e[2] for e in members[0][1]], dtype=float).reshape(K_g, d)
            keys = tuple(e[0] for e in members[0][1])
            groups.append(StencilGroup(sites=sites, neighbors=nb, offsets=offs,
                                       offset_keys=keys))
        self.groups = groups

    def _collect_added_bonds(self, lat_bonds: dict, added_sten: list):
        """Bonds involving added sites, including periodic images."""
        model = self.model
        A, d, r_cut = model.A, self.d, model.r_cut
        Ainv = np.linalg.inv(A)
        P = self.period
        n_lat = self.n_lattice
        seen = set()
        # core image first: the dedup below must not swallow a bond before its
        # reverse (added-site stencil entry) is recorded at gamma = 0
        img_range = sorted(itertools.product(range(-2, 3), repeat=d),
                           key=lambda g: (sum(abs(x) for x in g), g))
        for j, pa in enumerate(model.added):
            xa = np.array(pa, dtype=float)
            # lattice -> added-image bonds (and their reverses for the core image)
            for gamma in img_range:
                t = xa + P @ np.array(gamma, dtype=float)
                center = Ainv @ t
                bound = np.linalg.norm(Ainv, axis=1) * r_cut
                ranges = [range(int(math.floor(c - b)) - 1, int(math.ceil(c + b)) + 2)
                          for c, b in zip(center, bound)]
                for zeta in itertools.product(*ranges):
                    zarr = np.array(zeta, dtype=np.int64)
                    vec = t - A @ zarr.astype(float)   # bond vector site -> added image
                    rr = np.linalg.norm(vec)
                    if rr > r_cut + 1e-9:
                        continue
                    if rr < 1e-8:
                        raise ConfigurationError(
                            f"added site {j} coincides with a lattice site")
                    s_idx = int(self.site_of_z(zarr[None, :])[0])
                    if s_idx < 0:
                        continue
                    key = (s_idx, _quantize(vec))
                    if key in seen:
                        continue
                    seen.add(key)
                    lat_bonds.setdefault(s_idx, []).append(
                        (("a", j, _quantize(vec)), n_lat + j, vec))
                    # reverse bond from the added site's core image
                    if all(g == 0 for g in gamma):
                        added_sten[j].append(
                            (("z", tuple(int(c) for c in zeta)), s_idx, -vec))
            # added -> added (distinct sites or periodic self-images)
            for j2, pb in enumerate(model.added):
                xb = np.array(pb, dtype=float)
                for gamma in img_range:
                    if j2 == j and all(g == 0 for g in gamma):
                        continue
                    vec = xb + P @ np.array(gamma, dtype=float) - xa
                    rr = np.linalg.norm(vec)
                    if rr > r_cut + 1e-9:
                        continue
                    if rr < 1e-8:
                        raise ConfigurationError("added sites coincide")
                    added_sten[j].append(
                        (("a", j2, _quantize(vec)), n_lat + j2, vec))

    # --- regions -----------------------------------------------------------

    def lambda_mask(self, R: float) -> np.ndarray:
        """Boolean site mask of Lambda_R = Lambda cap B(-R, R]^d, R rounded up."""
        Ri = int(math.ceil(R - 1e-12))
        if Ri in self._mask_cache:
            return self._mask_cache[Ri]
        if Ri <= 0:
            mask = np.zeros(self.n_sites, dtype=bool)
        else:
            P, q = self.lattice_fractional_num(self.z_lattice)
            inside = np.all((P > -Ri * q) & (P <= Ri * q), axis=1)
            mask = np.zeros(self.n_sites, dtype=bool)
            mask[: self.n_lattice] = inside
            if self.n_sites > self.n_lattice:
                f = self.positions[self.n_lattice:] @ np.linalg.inv(self.B).T
                mask[self.n_lattice:] = np.all(np.abs(f) <= Ri + 1e-9, axis=1)
        self._mask_cache[Ri] = mask
        return mask

    def cube_radius(self) -> np.ndarray:
        """max_i |(B^{-1} x)_i| per site (float; used by smooth cutoffs)."""
        f = self.positions @ np.linalg.inv(self.B).T
        return np.abs(f).max(axis=1)

    def site_keys(self):
        """Cell-independent site identities for cross-cell matching."""
        keys = [("z", tuple(int(c) for c in z)) for z in self.z_lattice]
        keys += [("a", j) for j in range(len(self.model.added))]
        return keys

    def __repr__(self):
        return (f"Supercell(N={self.N}, sites={self.n_sites}, "
                f"d={self.d}, m={self.m}, groups={len(self.groups)})")


def _shortest_lattice_vector(P: np.ndarray) -> float:
    d = P.shape[0]
    best = np.inf
    for alpha in itertools.product(range(-2, 3), repeat=d):
        if all(a == 0 for a in alpha):
            continue
        best = min(best, float(np.linalg.norm(P @ np.array(alpha, dtype=float))))
    return best


def build_supercell(model: LatticeModel, B, N: int) -> Supercell:
    return Supercell(model, B, N)


def lambda_mask(cell: Supercell, R: float) -> np.ndarray:
    return cell.lambda_mask(R)


def annulus_mask(cell: Supercell, R1: float, R2: float) -> np.ndarray:
    """Sites in Lambda_{R2} setminus Lambda_{R1}."""
    return cell.lambda_mask(R2) & ~cell.lambda_mask(R1)


# ---------------------------------------------------------------------------
# displacements and strains


@dataclass
class Displacement:
    """Per-site R^m field on a supercell.  gauge records how it was centered."""
    cell: Supercell
    values: np.ndarray
    gauge: str = "free"

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def zero_mean(self) -> "Displacement":
        return Displacement(self.cell, self.values - self.mean(), gauge="zero-mean")

    @staticmethod
    def zeros(cell: Supercell) -> "Displacement":
        return Displacement(cell, np.zeros((cell.n_sites, cell.m)), gauge="zero-mean")


@dataclass
class GroupStrain:
    sites: np.ndarray    # (g,)
    offsets: np.ndarray  # (K, d)
    values: np.ndarray   # (g, K, m)


@dataclass
class StrainField:
    cell: Supercell
    groups: list

    def site_magnitude(self) -> np.ndarray:
        """|Du(l)| per site: sqrt of sum over stencil offsets and components."""
        mag2 = np.zeros(self.cell.n_sites)
        for g in self.groups:
            mag2[g.sites] = np.einsum("gkm,gkm->g", g.values, g.values)
        return np.sqrt(mag2)


def strain(u, cell: Supercell | None = None) -> StrainField:
    """Finite-difference strain Du(l) = (u(l+rho) - u(l))_rho on the cell."""
    if isinstance(u, Displacement):
        cell = u.cell
        vals = u.values
    else:
        if cell is None:
            raise ConfigurationError("strain of a bare array needs the cell")
        vals = np.asarray(u, dtype=float)
    if vals.shape != (cell.n_sites, cell.m):
        raise ConfigurationError(
            f"field shape {vals.shape} does not match cell ({cell.n_sites}, {cell.m})")
    groups = []
    for g in cell.groups:
        dv = vals[g.neighbors] - vals[g.sites][:, None, :]
        groups.append(GroupStrain(sites=g.sites, offsets=g.offsets, values=dv))
    return StrainField(cell=cell, groups=groups)


def subset_norm(s, p, region=None, cell: Supercell | None = None) -> float:
    """l^p norm of the site strain magnitudes over a cube region.

    Args:
        s: StrainField, or a per-site magnitude array (then `cell` is needed
           for region masks).
        p: norm exponent, p >= 1 or inf.
        region: None for the full cell, or (R1, R2) for Lambda_{R2} - Lambda_{R1}
            (R1 = 0 or None gives the full cube Lambda_{R2}).
    """
    if isinstance(s, StrainField):
        mags = s.site_magnitude()
        cell = s.cell
    else:
        mags = np.asarray(s, dtype=float)
    if not (p == np.inf or p >= 1):
        raise ConfigurationError(f"invalid norm exponent p={p}")
    if region is None:
        sel = mags
    else:
        R1, R2 = region
        if cell is None:
            raise ConfigurationError("region norms need the cell")
        mask = cell.lambda_mask(R2)
        if R1:
            mask = mask & ~cell.lambda_mask(R1)
        if not mask.any():
            raise ConfigurationError(f"empty region {region}")
        sel = mags[mask]
    if p == np.inf:
        return float(np.max(sel))
    return float(np.sum(sel ** p) ** (1.0 / p))


# ---------------------------------------------------------------------------
# smooth truncation


def _smoothstep(t: np.ndarray) -> np.ndarray:
    # quintic: C^2, monotone, 1 -> 0 on [0, 1]
    t = np.clip(t, 0.0, 1.0)
    return 1.0 - 10.0 * t ** 3 + 15.0 * t ** 4 - 6.0 * t ** 5


def _annulus_fattening(cell: Supercell) -> float:
    # converts the Cartesian interaction radius into cube-radius units
    return cell.model.r_cut / cell_heights(cell.B).min()


def truncation_min_radius(cell: Supercell) -> float:
    """Smallest admissible truncation radius R_T for this cell geometry."""
    delta = _annulus_fattening(cell)
    h_min = cell_heights(cell.B).min()
    R_P = math.ceil(delta)
    r_P = math.ceil((cell.model.R_def + cell.model.r_cut) / h_min) + 1
    return float(max(2 * r_P, 6 * R_P + 6 * delta))


def poincare_radii(cell: Supercell) -> tuple[float, float]:
    """(r_P, R_P): minimum annulus scale and fattening for Poincare estimates."""
    delta = _annulus_fattening(cell)
    h_min = cell_heights(cell.B).min()
    r_P = math.ceil((cell.model.R_def + cell.model.r_cut) / h_min) + 1
    return float(r_P), float(math.ceil(delta))


def truncate(u, R: float, cell: Supercell | None = None) -> Displacement:
    """Smoothly cut a field off to the cube Q_{5R/6}, recentering first.

    T_R u = eta_R * (u - <u>_{A_R}) with eta_R = 1 on Q_{4R/6}, 0 outside
    Q_{5R/6} (quintic ramp), and A_R the lattice annulus between the two
    cubes fattened by the interaction range.  Requires R >= R_T and R <= N.
    """
    if isinstance(u, Displacement):
        cell = u.cell
        vals = u.values
    else:
        vals = np.asarray(u, dtype=float)
        if cell is None:
            raise ConfigurationError("truncate of a bare array needs the cell")
    R_T = truncation_min_radius(cell)
    if R < R_T:
        raise ConfigurationError(f"truncation radius R={R} below minimum R_T={R_T:.3g}")
    if R > cell.N:
        raise ConfigurationError(f"truncation radius R={R} exceeds the cell (N={cell.N})")
    delta = _annulus_fattening(cell)
    mask = annulus_mask(cell, 4.0 * R / 6.0 - delta, 5.0 * R / 6.0 + delta)
    if not mask.any():
        raise ConfigurationError(f"empty recentering annulus at R={R}")
    mean = vals[mask].mean(axis=0)
    s = cell.cube_radius() / R
    eta = _smoothstep((s - 4.0 / 6.0) * 6.0)
    out = eta[:, None] * (vals - mean)
    return Displacement(cell, out, gauge="annulus-mean")
