"""Strict JSON configuration schema and object construction.

Config files carry a versioned schema; unknown keys anywhere are rejected so
typos fail loudly instead of silently using defaults.  Matrices are given
row-major (rows = lattice vectors).  Defect coordinates are expressed in the
same units as the basis rows and are scaled together with them, which keeps
configs meaningful when the lattice parameter is found automatically.
"""
from __future__ import annotations

import json
import math

import numpy as np

from .errors import ConfigurationError
from .lattice import LatticeModel, apply_defect, build_homogeneous
from .potential import (CutoffSpline, EAMPotential, ExpRadial, MorsePotential,
                        MorseRadial, QuadraticFormPotential, SpringRadial,
                        find_lattice_parameter)
from .solver import SolverOptions
from .study import StudyConfig

SCHEMA_VERSION = 1

_MISSING = object()


class _Keys:
    """Tracks key consumption in one config section; leftovers are errors."""

    def __init__(self, data: dict, where: str):
        if not isinstance(data, dict):
            raise ConfigurationError(f"section '{where}' must be a JSON object")
        self.data = data
        self.where = where
        self.used: set = set()

    def take(self, key: str, default=_MISSING):
        self.used.add(key)
        if key in self.data:
            return self.data[key]
        if default is _MISSING:
            raise ConfigurationError(f"missing key '{key}' in '{self.where}'")
        return default

    def done(self):
        unknown = sorted(set(self.data) - self.used)
        if unknown:
            raise ConfigurationError(
                f"unknown key(s) {unknown} in '{self.where}'")


def load_config(path) -> dict:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}")
    try:
        cfg = json.loads(raw.decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(
            f"malformed JSON in {path} at line {exc.lineno} column {exc.colno}: {exc.msg}")
    if not isinstance(cfg, dict):
        raise ConfigurationError("top-level config must be a JSON object")
    version = cfg.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigurationError(
            f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    allowed = {"schema_version", "lattice", "defect", "potential", "solver",
               "study", "greens", "relax", "stability", "checks"}
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s) {unknown}")
    return cfg


# ---------------------------------------------------------------------------
# potentials


def _taper_from(spec, where: str) -> CutoffSpline | None:
    if spec is None:
        return None
    k = _Keys(spec, where)
    r_lo = float(k.take("r_lo"))
    r_hi = float(k.take("r_hi"))
    kind = k.take("kind", "cubic")
    k.done()
    return CutoffSpline(r_lo, r_hi, kind=kind)


def build_potential(section: dict):
    k = _Keys(section, "potential")
    kind = k.take("kind")
    if kind == "morse":
        alpha = float(k.take("alpha", 4.0))
        taper = _taper_from(k.take("taper", None), "potential.taper")
        k.done()
        return MorsePotential(alpha=alpha, taper=taper)
    if kind == "eam":
        alpha = float(k.take("alpha", 4.0))
        beta = float(k.take("beta", 4.0))
        A_emb = float(k.take("embed_coeff", 1.0))
        taper = _taper_from(k.take("taper", None), "potential.taper")
        k.done()
        return EAMPotential(pair=MorseRadial(alpha=alpha, taper=taper),
                            density=ExpRadial(beta=beta, taper=taper),
                            A_emb=A_emb)
    if kind == "spring":
        stiff = float(k.take("k", 1.0))
        r0 = float(k.take("r0", 1.0))
        support = float(k.take("support", 1.4))
        k.done()
        from .potential import PairPotential
        return PairPotential(SpringRadial(k=stiff, r0=r0, support=support))
    if kind == "quadratic":
        m = int(k.take("m"))
        weight = float(k.take("weight", 1.0))
        linear = k.take("linear", None)
        support = float(k.take("support", 1.0))
        k.done()
        lin = None if linear is None else np.asarray(linear, dtype=float)
        return QuadraticFormPotential(m=m, weight=weight, linear=lin,
                                      support=support)
    raise ConfigurationError(f"unknown potential kind {kind!r}")


# ---------------------------------------------------------------------------
# lattices and defects

_NAMED_ROWS = {
    "square": [[1.0, 0.0], [0.0, 1.0]],
    "triangular": [[1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]],
    "cubic": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    "fcc": [[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]],
    "bcc": [[-0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0.5, 0.5, -0.5]],
}


def build_lattice(section: dict, potential, defect: dict | None = None):
    """Resolve (model, B, scale) from the lattice (+ optional defect) sections."""
    k = _Keys(section, "lattice")
    kind = k.take("kind")
    if kind == "custom":
        rows = np.asarray(k.take("A"), dtype=float)
        if rows.ndim != 2 or rows.shape[0] != rows.shape[1]:
            raise ConfigurationError("lattice.A must be a square row-major matrix")
    elif kind in _NAMED_ROWS:
        rows = np.asarray(_NAMED_ROWS[kind], dtype=float)
    else:
        raise ConfigurationError(f"unknown lattice kind {kind!r}")
    A_unit = rows.T                     # columns generate the lattice

    # repeat cell: conventional cube for the centered lattices (so small N
    # still clears the interaction range), primitive cell otherwise
    cell_rows = k.take("cell", None)
    if cell_rows is not None:
        B_rows = np.asarray(cell_rows, dtype=float)
        if B_rows.shape != A_unit.shape:
            raise ConfigurationError("lattice.cell must match the basis shape")
        B_unit = B_rows.T
    elif kind in ("fcc", "bcc"):
        B_unit = np.eye(3)
    else:
        B_unit = A_unit

    scale = k.take("scale", "auto")
    if scale == "auto":
        if hasattr(potential, "reference_site_energy"):
            scale = find_lattice_parameter(potential, A_unit)
        else:
            scale = 1.0                 # no preferred spacing (quadratic forms)
    scale = float(scale)
    if scale <= 0:
        raise ConfigurationError(f"lattice scale must be positive, got {scale}")
    A = scale * A_unit

    m = k.take("m", None)
    r_cut = k.take("r_cut", None)
    if r_cut is None:
        r_cut = potential.support_radius
    k.done()
    model = build_homogeneous(A, float(r_cut), m=None if m is None else int(m))

    if defect:
        dk = _Keys(defect, "defect")
        removed_x = dk.take("removed", [])
        added_x = dk.take("added", [])
        R_def = dk.take("R_def", None)
        dk.done()
        removed = [_site_coordinate(A_unit, x) for x in removed_x]
        added = [scale * np.asarray(x, dtype=float) for x in added_x]
        if removed or added:
            model = apply_defect(model, removed=removed, added=added,
                                 R_def=None if R_def is None else float(R_def))
    return model, scale * B_unit, scale


def _site_coordinate(A_unit: np.ndarray, x) -> tuple:
    x = np.asarray(x, dtype=float)
    if x.shape != (A_unit.shape[0],):
        raise ConfigurationError(f"defect coordinate {x.tolist()} has wrong dimension")
    z = np.linalg.solve(A_unit, x)
    zi = np.rint(z)
    if not np.allclose(z, zi, atol=1e-6):
        raise ConfigurationError(
            f"removed coordinate {x.tolist()} is not a lattice site")
    return tuple(int(c) for c in zi)


# ---------------------------------------------------------------------------
# solver / study


def build_solver_options(section: dict | None) -> SolverOptions:
    if section is None:
        return SolverOptions()
    k = _Keys(section, "solver")
    switch = k.take("newton_switch", None)
    opts = SolverOptions(
        tol_grad_inf=float(k.take("tol_grad_inf", 1e-10)),
        max_iter=int(k.take("max_iter", 2000)),
        precond=k.take("precond", "laplacian"),
        newton_refine=bool(k.take("newton_refine", False)),
        newton_switch=None if switch is None else float(switch),
        newton_tol=float(k.take("newton_tol", 1e-12)),
        restart=int(k.take("restart", 50)),
    )
    k.done()
    opts.validate()
    return opts


def _norm_exponent(p):
    if p == "inf":
        return math.inf
    if isinstance(p, (int, float)) and p >= 1:
        return float(p)
    raise ConfigurationError(f"invalid norm exponent {p!r} (use numbers >= 1 or \"inf\")")


def build_study(section: dict, model: LatticeModel, B, potential,
                solver: SolverOptions):
    """-> (StudyConfig, planted) where planted is None or (C, s)."""
    k = _Keys(section, "study")
    N_list = tuple(int(n) for n in k.take("N_list"))
    N_ref = k.take("N_ref", None)
    p_norms = tuple(_norm_exponent(p) for p in k.take("p_norms", [2, 4, "inf"]))
    planted_spec = k.take("planted", None)
    cfg = StudyConfig(
        model=model, B=B, potential=potential, N_list=N_list,
        N_ref=None if N_ref is None else int(N_ref),
        p_norms=p_norms, solver=solver,
        continuation=bool(k.take("continuation", False)),
        k_grid_density=int(k.take("k_grid_density", 64)),
        record_stability=bool(k.take("record_stability", True)),
        n_eigs=int(k.take("n_eigs", 6)),
        fit_skip=int(k.take("fit_skip", 2)),
    )
    k.done()
    planted = None
    if planted_spec is not None:
        pk = _Keys(planted_spec, "study.planted")
        planted = (float(pk.take("C")), float(pk.take("s")))
        pk.done()
    cfg.validate()
    return cfg, planted


# ---------------------------------------------------------------------------
# results schema (round-trip validation)


def _expect(cond: bool, msg: str):
    if not cond:
        raise ConfigurationError(f"results schema violation: {msg}")


def validate_results(obj: dict):
    """Check a results.json payload against the schema this package writes."""
    _expect(isinstance(obj, dict), "top level must be an object")
    _expect(obj.get("schema_version") == SCHEMA_VERSION, "bad schema_version")
    prov = obj.get("provenance")
    _expect(isinstance(prov, dict), "missing provenance")
    for key in ("version", "command", "config_sha256", "timestamp"):
        _expect(isinstance(prov.get(key), str), f"provenance.{key} must be a string")
    study = obj.get("study")
    _expect(isinstance(study, dict), "missing study payload")
    _expect(isinstance(study.get("records"), list), "study.records must be a list")
    for rec in study["records"]:
        _expect(isinstance(rec, dict) and isinstance(rec.get("N"), int),
                "record without integer N")
        _expect(isinstance(rec.get("converged"), bool), "record without converged flag")
        errs = rec.get("errors")
        if rec["converged"] and errs is not None:
            _expect(isinstance(errs, dict), "errors must be an object")
            for name, val in errs.items():
                _expect(isinstance(val, (int, float)) and val >= 0,
                        f"error norm {name} must be nonnegative")
    slopes = study.get("slopes")
    _expect(isinstance(slopes, dict), "study.slopes must be an object")
    for name, fit in slopes.items():
        _expect(isinstance(fit, dict), f"slope entry {name} must be an object")
        for key in ("slope", "intercept", "residual"):
            _expect(isinstance(fit.get(key), (int, float)),
                    f"slopes.{name}.{key} must be a number")
    _expect(isinstance(study.get("reference"), dict), "missing study.reference")
    return obj
