"""Convergence studies and theory checks for defect equilibration.

The headline experiment relaxes the same defect on a sequence of cells,
treats a much larger Newton-refined cell as the exact solution, and fits the
strain-error decay against N.  Errors are built from strains only, so they
are invariant under constant shifts of either field.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, SolverError, StabilityError
from .lattice import (Displacement, LatticeModel, Supercell, annulus_mask,
                      cell_heights, poincare_radii, strain, subset_norm,
                      truncate, truncation_min_radius)
from .model import Assembly, PhononReport, phonon_check, stability_spectrum
from .solver import LatticePreconditioner, SolverOptions, prolong, relax


def _p_name(p) -> str:
    return "inf" if p == math.inf else f"{p:g}"


# ---------------------------------------------------------------------------
# rate fitting


@dataclass
class RateFit:
    slope: float
    intercept: float
    residual: float          # max absolute log deviation
    n_points: int
    excluded: list           # x values dropped for non-positive err

    def as_dict(self) -> dict:
        return {"slope": float(self.slope), "intercept": float(self.intercept),
                "residual": float(self.residual), "n_points": int(self.n_points),
                "excluded": [float(x) for x in self.excluded]}


def fit_rate(pairs) -> RateFit:
    """Least squares on (log x, log err); err <= 0 points are dropped."""
    kept, excluded = [], []
    for x, err in pairs:
        if err > 0 and math.isfinite(err):
            kept.append((float(x), float(err)))
        else:
            excluded.append(float(x))
    if len(kept) < 3:
        raise ConfigurationError(
            f"rate fit needs at least 3 positive points, got {len(kept)}")
    X = np.log([x for x, _ in kept])
    Y = np.log([e for _, e in kept])
    Amat = np.stack([X, np.ones_like(X)], axis=1)
    coef, *_ = np.linalg.lstsq(Amat, Y, rcond=None)
    resid = float(np.abs(Y - Amat @ coef).max())
    return RateFit(slope=float(coef[0]), intercept=float(coef[1]),
                   residual=resid, n_points=len(kept), excluded=excluded)


# ---------------------------------------------------------------------------
# study configuration and result


@dataclass
class StudyConfig:
    model: LatticeModel
    B: np.ndarray
    potential: object
    N_list: tuple
    N_ref: int | None = None            # default ceil(2.5 * max N)
    p_norms: tuple = (2.0, 4.0, math.inf)
    solver: SolverOptions = field(default_factory=SolverOptions)
    continuation: bool = False
    k_grid_density: int = 64
    record_stability: bool = True
    n_eigs: int = 6
    fit_skip: int = 2                   # drop this many smallest N in fits

    def validate(self):
        Ns = [int(n) for n in self.N_list]
        if len(Ns) < 1 or any(b <= a for a, b in zip(Ns, Ns[1:])):
            raise ConfigurationError("N_list must be strictly increasing")
        if self.resolve_N_ref() <= Ns[-1]:
            raise ConfigurationError("N_ref must exceed max(N_list)")
        for p in self.p_norms:
            if not (p == math.inf or p >= 1):
                raise ConfigurationError(f"invalid norm exponent p={p}")
        if self.fit_skip < 0:
            raise ConfigurationError("fit_skip must be nonnegative")

    def resolve_N_ref(self) -> int:
        if self.N_ref is not None:
            return int(self.N_ref)
        return int(math.ceil(2.5 * max(int(n) for n in self.N_list)))


@dataclass
class StudyResult:
    records: list                       # per-N dicts, solver + error norms
    slopes: dict                        # p name -> RateFit
    reference: dict
    phonon: PhononReport | None
    solutions: dict                     # N -> Displacement
    reference_solution: Displacement | None
    error_fields: dict                  # N -> per-site |D e_N| magnitudes
    meta: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "records": self.records,
            "slopes": {k: f.as_dict() for k, f in self.slopes.items()},
            "reference": self.reference,
            "phonon": self.phonon.as_dict() if self.phonon is not None else None,
            "meta": self.meta,
        }

    def errors_rows(self):
        for rec in self.records:
            if rec.get("errors"):
                for name, err in rec["errors"].items():
                    yield rec["N"], name, err

    def slopes_rows(self):
        for name, f in self.slopes.items():
            yield name, f.slope, f.intercept, f.residual


# ---------------------------------------------------------------------------
# cross-cell strain errors


def _ref_center(ref_cell: Supercell, cell: Supercell, site: int):
    if site >= cell.n_lattice:
        return ref_cell.n_lattice + (site - cell.n_lattice), None
    z = cell.z_lattice[site]
    return int(ref_cell.site_of_z(z[None])[0]), z


def _ref_neighbor(ref_cell: Supercell, key, z_center, center_is_added: bool) -> int:
    if key[0] == "z":
        zk = np.asarray(key[1], dtype=np.int64)
        # for added centers the stencil stores the neighbor's coordinate,
        # for lattice centers the relative offset
        zq = zk if center_is_added else z_center + zk
        idx = int(ref_cell.site_of_z(zq[None])[0])
        if idx < 0:
            raise ConfigurationError("stencil bond missing in the reference cell")
        return idx
    return ref_cell.n_lattice + int(key[1])


def strain_error_magnitude(cell: Supercell, u: np.ndarray,
                           ref_cell: Supercell, u_ref: np.ndarray) -> np.ndarray:
    """Per-site |Du(l) - Du_ref(l)| with both strains on l's own stencil.

    Sites are matched across cells by integer coordinate (lattice) or by
    insertion index (added); every stencil bond of the small cell is
    resolved in the reference cell through its cell-independent key.
    """
    if ref_cell.N < cell.N:
        raise ConfigurationError("reference cell smaller than the compared cell")
    mag2 = np.zeros(cell.n_sites)
    for g in cell.groups:
        if g.homogeneous:
            zs = cell.z_lattice[g.sites]
            center = ref_cell.site_of_z(zs)
            dN = u[g.neighbors] - u[g.sites][:, None, :]
            dR = np.empty_like(dN)
            for c, key in enumerate(g.offset_keys):
                nb = ref_cell.site_of_z(zs + np.asarray(key[1], dtype=np.int64))
                if nb.min() < 0:
                    raise ConfigurationError("stencil bond missing in the reference cell")
                dR[:, c, :] = u_ref[nb]
            dR -= u_ref[center][:, None, :]
            diff = dN - dR
            mag2[g.sites] = np.einsum("nkm,nkm->n", diff, diff)
        else:
            for row, site in enumerate(g.sites):
                site = int(site)
                is_added = site >= cell.n_lattice
                rc, z = _ref_center(ref_cell, cell, site)
                acc = 0.0
                for c, key in enumerate(g.offset_keys):
                    vN = u[g.neighbors[row, c]] - u[site]
                    rnb = _ref_neighbor(ref_cell, key, z, is_added)
                    vR = u_ref[rnb] - u_ref[rc]
                    acc += float(np.sum((vN - vR) ** 2))
                mag2[site] = acc
    return np.sqrt(mag2)


# ---------------------------------------------------------------------------
# the convergence experiment


def _planted_field(cell: Supercell, C: float, s: float) -> Displacement:
    """Compactly supported bump scaled by C*N^{-s}.

    The bump is identical on every cell that contains its support, so all
    recorded strain-error norms follow the planted power law exactly.
    """
    w = cell.model.r_cut
    r = np.linalg.norm(cell.positions, axis=1)
    prof = np.clip(1.0 - (r / w) ** 2, 0.0, None) ** 3
    vals = np.empty((cell.n_sites, cell.m))
    for c in range(cell.m):
        vals[:, c] = prof * (1.0 + 0.25 * c)
    vals *= C * float(cell.N) ** (-s)
    return Displacement(cell, vals, gauge="free")


def run_convergence(cfg: StudyConfig, planted: tuple | None = None) -> StudyResult:
    """Relax each N, Newton-refine the reference, record norms, fit slopes.

    With `planted` = (C, s) the solver is replaced by synthetic fields whose
    error norms follow C*N^{-s} exactly (a self-test of the fitting path).
    """
    cfg.validate()
    model, B = cfg.model, cfg.B
    N_ref = cfg.resolve_N_ref()

    phonon = None
    if planted is None:
        hom = replace(model, removed=(), added=(), R_def=0.0)
        phonon = phonon_check(cfg.potential, hom, cfg.k_grid_density)
        if not phonon.stable:
            raise StabilityError(
                f"homogeneous state is phonon-unstable: lambda_min = "
                f"{phonon.lambda_worst:.3e} at k = {phonon.k_worst}")

    records: list = []
    solutions: dict = {}
    cells: dict = {}
    u_prev: Displacement | None = None
    for N in (int(n) for n in cfg.N_list):
        cell = Supercell(model, B, N)
        cells[N] = cell
        if planted is not None:
            solutions[N] = _planted_field(cell, *planted)
            records.append({"N": N, "converged": True, "planted": True})
            continue
        asm = Assembly(cell, cfg.potential)
        u0 = prolong(u_prev, cell) if (cfg.continuation and u_prev is not None) else None
        try:
            res = relax(asm, u0, cfg.solver)
        except SolverError as exc:
            records.append({"N": N, "converged": False, "errors": None,
                            "message": str(exc)})
            continue
        solutions[N] = res.u
        u_prev = res.u
        rec = {"N": N, "converged": True, "iterations": res.iterations,
               "newton_iterations": res.newton_iterations,
               "grad_inf": res.grad_inf, "energy": res.energy}
        if cfg.record_stability:
            rec["stability"] = stability_spectrum(asm, res.u,
                                                  n_eigs=cfg.n_eigs).as_dict()
        records.append(rec)

    cell_ref = Supercell(model, B, N_ref)
    if planted is not None:
        u_ref = Displacement.zeros(cell_ref)
        reference = {"N": N_ref, "planted": True}
    else:
        asm_ref = Assembly(cell_ref, cfg.potential)
        opts_ref = replace(cfg.solver, newton_refine=True)
        if opts_ref.newton_switch is None:
            # descent only has to deliver the quadratic basin on the big
            # cell; the Newton endgame is far cheaper than descent creep
            opts_ref = replace(opts_ref, newton_switch=1e-4)
        u0 = prolong(u_prev, cell_ref) if (cfg.continuation and u_prev is not None) else None
        res_ref = relax(asm_ref, u0, opts_ref)   # failure aborts the study
        u_ref = res_ref.u
        reference = {"N": N_ref, "iterations": res_ref.iterations,
                     "newton_iterations": res_ref.newton_iterations,
                     "grad_inf": res_ref.grad_inf, "energy": res_ref.energy}

    error_fields: dict = {}
    for rec in records:
        if not rec["converged"]:
            continue
        N = rec["N"]
        mag = strain_error_magnitude(cells[N], solutions[N].values,
                                     cell_ref, u_ref.values)
        error_fields[N] = mag
        rec["errors"] = {_p_name(p): subset_norm(mag, p) for p in cfg.p_norms}

    slopes = {}
    pts_all = [(rec["N"], rec["errors"]) for rec in records if rec["converged"]]
    skip = min(cfg.fit_skip, max(0, len(pts_all) - 3))
    for p in cfg.p_norms:
        name = _p_name(p)
        pairs = [(N, errs[name]) for N, errs in pts_all][skip:]
        slopes[name] = fit_rate(pairs)

    return StudyResult(records=records, slopes=slopes, reference=reference,
                       phonon=phonon, solutions=solutions,
                       reference_solution=u_ref, error_fields=error_fields,
                       meta={"fit_skip": skip, "N_list": [int(n) for n in cfg.N_list]})


# ---------------------------------------------------------------------------
# theory checks


def difference_magnitude_field(cell: Supercell, u: np.ndarray, j: int) -> np.ndarray:
    """(n_lattice,) norms of the full j-th difference tensor of u.

    NaN where a difference chain crosses a removed site; added sites are not
    centers here (pure lattice-offset differences).
    """
    zetas = cell.hom_zetas
    idxs = []
    for z in zetas:
        idx = cell.site_of_z(cell.z_lattice + z)
        idxs.append((np.where(idx >= 0, idx, 0), idx >= 0))
    n = cell.n_lattice
    acc = np.zeros(n)
    bad = np.zeros(n, dtype=bool)

    def rec(F, valid, depth):
        if depth == j:
            acc[valid] += np.einsum("nm,nm->n", F[valid], F[valid])
            bad[:] |= ~valid
            return
        for idx, ok in idxs:
            rec(F[idx] - F, valid & ok & valid[idx], depth + 1)

    rec(u[:n], np.ones(n, dtype=bool), 0)
    out = np.sqrt(acc)
    out[bad] = np.nan
    return out


def decay_check(u_ref: Displacement, j_list=(1, 2), n_bins: int = 8,
                r_min: float | None = None, r_max: float | None = None,
                underflow: float = 1e-14) -> dict:
    """Shell-max decay slopes of |D^j u| around the defect.

    Shells whose maximum underflows are excluded; if everything underflows
    (homogeneous reference) the check reports itself skipped.
    """
    cell = u_ref.cell
    model = cell.model
    out = {}
    h_min = cell_heights(cell.B).min()
    if r_max is None:
        r_max = 0.5 * cell.N * h_min
    for j in j_list:
        lo = r_min if r_min is not None else model.R_def + (j + 1) * model.r_cut
        if not lo < r_max:
            out[int(j)] = {"skipped": "cell too small for any decay shell",
                           "rows": []}
            continue
        mag = difference_magnitude_field(cell, u_ref.values, int(j))
        r = np.linalg.norm(cell.positions[: cell.n_lattice], axis=1)
        edges = np.geomspace(lo, r_max, n_bins + 1)
        rows = []
        for a, b in zip(edges[:-1], edges[1:]):
            sel = (r >= a) & (r < b) & ~np.isnan(mag)
            if not sel.any():
                continue
            v = float(mag[sel].max())
            if v < underflow:
                continue
            rows.append((math.sqrt(a * b), v))
        if len(rows) < 3:
            out[int(j)] = {"skipped": "strains below underflow on the shells",
                           "rows": rows}
            continue
        fit = fit_rate(rows)
        out[int(j)] = {"slope": fit.slope, "residual": fit.residual,
                       "rows": [[float(a), float(b)] for a, b in rows]}
    return out


def caccioppoli_check(cell: Supercell, e_mag: np.ndarray,
                      r_list=None) -> dict:
    """Interior/annulus l2 ratios of an error strain field.

    ratio(r) = |e|_{l2(Lambda_{r/2})} / |e|_{l2(Lambda_{2r} - Lambda_{r/2})},
    admissible for r_P <= r <= N/4.  Zero denominators report as None.
    """
    r_P, _ = poincare_radii(cell)
    r_hi = cell.N / 4.0
    if r_list is None:
        if r_hi < r_P:
            raise ConfigurationError(
                f"cell N={cell.N} too small: needs N/4 >= r_P = {r_P:g}")
        r_list = list(range(int(math.ceil(r_P)), int(math.floor(r_hi)) + 1))
    rows = []
    for r in r_list:
        if r < r_P - 1e-9 or r > r_hi + 1e-9:
            raise ConfigurationError(
                f"radius {r} outside the admissible range [{r_P:g}, {r_hi:g}]")
        left = subset_norm(e_mag, 2, region=(0.0, r / 2.0), cell=cell)
        right = subset_norm(e_mag, 2, region=(r / 2.0, 2.0 * r), cell=cell)
        ratio = (left / right) if right > 0.0 else None
        rows.append({"r": float(r), "left": left, "right": right, "ratio": ratio})
    ratios = [row["ratio"] for row in rows if row["ratio"] is not None]
    return {"rows": rows, "max_ratio": max(ratios) if ratios else None}


def random_smooth_field(cell: Supercell, rng, passes: int = 2,
                        prec: LatticePreconditioner | None = None) -> np.ndarray:
    """Zero-mean field with rapidly decaying spectrum (inverse-Laplacian
    smoothed white noise)."""
    if prec is None:
        prec = LatticePreconditioner(cell)
    v = rng.standard_normal((cell.n_sites, cell.m))
    for _ in range(passes):
        v = prec.apply(v)
    v -= v.mean(axis=0)
    scale = float(np.abs(v).max())
    return v / scale if scale > 0 else v


def poincare_check(cell: Supercell, R1: float, R2: float, n_fields: int = 32,
                   seed: int = 0) -> dict:
    """max over fields of |u - <u>|_{l2(annulus)} / (R2 |Du|_{l2(fattened)}).

    Samples smoothed random fields plus coordinate ramps; also records the
    sup-norm variant.  Requires R1 >= r_P and R2 - R1 >= r_P.
    """
    r_P, R_P = poincare_radii(cell)
    if R1 < r_P - 1e-9 or (R2 - R1) < r_P - 1e-9:
        raise ConfigurationError(
            f"annulus ({R1}, {R2}) below the minimum scale r_P = {r_P:g}")
    if R2 + R_P > cell.N + 1e-9:
        raise ConfigurationError("fattened annulus does not fit in the cell")
    ann = annulus_mask(cell, R1, R2)
    if not ann.any():
        raise ConfigurationError(f"empty annulus ({R1}, {R2})")
    fat = (max(0.0, R1 - R_P), R2 + R_P)
    rng = np.random.default_rng(seed)
    prec = LatticePreconditioner(cell)

    fields = []
    for i in range(cell.d):
        ramp = np.zeros((cell.n_sites, cell.m))
        ramp[:, i % cell.m] = cell.positions[:, i]
        fields.append(ramp)
    for _ in range(n_fields):
        fields.append(random_smooth_field(cell, rng, prec=prec))

    ratio2 = ratioinf = 0.0
    for v in fields:
        w = v[ann] - v[ann].mean(axis=0)
        site_mag = np.linalg.norm(w, axis=1)
        num2 = float(np.sqrt(np.sum(site_mag ** 2)))
        numinf = float(site_mag.max())
        s = strain(v, cell)
        den2 = subset_norm(s, 2, region=fat)
        deninf = subset_norm(s, math.inf, region=fat)
        if den2 > 0:
            ratio2 = max(ratio2, num2 / (R2 * den2))
        if deninf > 0:
            ratioinf = max(ratioinf, numinf / (R2 * deninf))
    return {"R1": float(R1), "R2": float(R2), "n_fields": len(fields),
            "ratio_2": ratio2, "ratio_inf": ratioinf}


def truncation_check(cell: Supercell, fields, R_list=None) -> dict:
    """Strain-norm amplification of the cutoff-and-recenter operator.

    ratio(R, u) = |D(T_R u)|_2 / |Du|_{l2(Lambda_{R + delta})}, which the
    cutoff construction keeps bounded by a geometry constant.
    """
    from .lattice import _annulus_fattening
    R_T = truncation_min_radius(cell)
    if R_list is None:
        if R_T > cell.N:
            raise ConfigurationError(
                f"cell N={cell.N} below the minimum truncation radius {R_T:g}")
        R_list = sorted({int(round(x)) for x in np.geomspace(R_T, cell.N, 4)})
    delta = _annulus_fattening(cell)
    rows = []
    for R in R_list:
        for i, v in enumerate(fields):
            Tu = truncate(v, R, cell)
            num = subset_norm(strain(Tu.values, cell), 2)
            den = subset_norm(strain(v, cell), 2,
                              region=(0.0, min(float(cell.N), R + delta)))
            ratio = (num / den) if den > 0 else None
            rows.append({"R": float(R), "field": i, "ratio": ratio})
    ratios = [row["ratio"] for row in rows if row["ratio"] is not None]
    return {"rows": rows, "max_ratio": max(ratios) if ratios else None}


def theory_checks(result: StudyResult, n_fields: int = 32, seed: int = 0) -> dict:
    """Run the decay / Caccioppoli / Poincare / truncation suite on a study."""
    out: dict = {}
    u_ref = result.reference_solution
    if u_ref is None:
        raise ConfigurationError("study carries no reference solution")
    cell_ref = u_ref.cell
    out["decay"] = decay_check(u_ref)

    cacc = {}
    converged = [rec["N"] for rec in result.records if rec.get("converged")]
    r_P, R_P = poincare_radii(cell_ref)
    for N in converged[-3:]:
        cell = result.solutions[N].cell
        if cell.N / 4.0 < r_P:
            continue
        cacc[N] = caccioppoli_check(cell, result.error_fields[N])
    out["caccioppoli"] = cacc

    poin = {}
    R2 = float(math.floor(cell_ref.N - R_P))
    while R2 >= 2 * r_P and len(poin) < 3:
        poin[int(R2)] = poincare_check(cell_ref, R2 / 2.0, R2,
                                       n_fields=n_fields, seed=seed)
        R2 = math.floor(R2 / 2.0)
    out["poincare"] = poin

    R_T = truncation_min_radius(cell_ref)
    if R_T <= cell_ref.N:
        rng = np.random.default_rng(seed + 1)
        fields = [u_ref.values]
        for _ in range(3):
            fields.append(random_smooth_field(cell_ref, rng))
        out["truncation"] = truncation_check(cell_ref, fields)
    else:
        out["truncation"] = {"skipped": f"N_ref below R_T = {R_T:g}"}
    return out
