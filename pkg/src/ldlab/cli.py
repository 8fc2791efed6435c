"""Command-line entry point.

Commands bind a JSON config to the library operations and write
machine-readable outputs (JSON + CSV + extended XYZ) plus a provenance
stamp.  Heavy imports happen after argument parsing so that --threads and
--deterministic can pin BLAS pool sizes before numpy loads.

Exit codes: 0 success, 1 configuration/validation error, 2 numerical
failure (with an error.json diagnostic in the output directory).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from datetime import datetime, timezone

COMMANDS = ("a0", "stability", "relax", "greens", "study", "checks")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ldlab",
        description="Point-defect equilibration studies on periodic lattices.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", default=os.environ.get("LDLAB_CONFIG"),
                   help="path to the JSON config (env: LDLAB_CONFIG)")
    p.add_argument("--out", default=os.environ.get("LDLAB_OUT", "."),
                   help="output directory (env: LDLAB_OUT)")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("LDLAB_THREADS", "0")) or None,
                   help="BLAS/OpenMP thread count (env: LDLAB_THREADS)")
    p.add_argument("--deterministic", action="store_true",
                   default=bool(os.environ.get("LDLAB_DETERMINISTIC")),
                   help="single-thread reductions for bitwise-stable output "
                        "(env: LDLAB_DETERMINISTIC)")
    return p


def _set_threads(k: int):
    for var in _THREAD_VARS:
        os.environ[var] = str(k)


def _utc_stamp() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def _write_csv(path, header, rows):
    # '.' decimal, 17 significant digits on floats
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            cells = [f"{x:.16e}" if isinstance(x, float) else str(x) for x in row]
            f.write(",".join(cells) + "\n")


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.config is None:
        print("error: no config given (use --config or LDLAB_CONFIG)", file=sys.stderr)
        return 1
    threads = 1 if args.deterministic else args.threads
    if threads is not None:
        if threads < 1:
            print(f"error: --threads must be >= 1, got {threads}", file=sys.stderr)
            return 1
        _set_threads(threads)

    from . import __version__
    from .errors import ConfigurationError, LdlabError
    from . import config as cfgmod

    os.makedirs(args.out, exist_ok=True)
    try:
        with open(args.config, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 1
    try:
        cfg = cfgmod.load_config(args.config)
        provenance = {
            "version": __version__,
            "command": args.command,
            "config_sha256": hashlib.sha256(raw).hexdigest(),
            "timestamp": _utc_stamp(),
            "deterministic": bool(args.deterministic),
        }
        _run(args.command, cfg, args.out, provenance)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except LdlabError as exc:
        diag = {"error": type(exc).__name__, "message": str(exc),
                "command": args.command, "timestamp": _utc_stamp()}
        _write_json(os.path.join(args.out, "error.json"), diag)
        print(f"numerical failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        print(f"diagnostic written to {os.path.join(args.out, 'error.json')}",
              file=sys.stderr)
        return 2
    return 0


def console_main():
    sys.exit(main())


# ---------------------------------------------------------------------------
# command implementations


def _run(command: str, cfg: dict, out: str, provenance: dict):
    from .errors import ConfigurationError
    from . import config as cfgmod

    potential = cfgmod.build_potential(_need(cfg, "potential"))
    if command == "a0":
        _cmd_a0(cfg, out, provenance, potential)
        return

    model, B, scale = cfgmod.build_lattice(_need(cfg, "lattice"), potential,
                                           defect=cfg.get("defect"))
    solver = cfgmod.build_solver_options(cfg.get("solver"))
    if command == "stability":
        _cmd_stability(cfg, out, provenance, potential, model, B, solver)
    elif command == "relax":
        _cmd_relax(cfg, out, provenance, potential, model, B, solver)
    elif command == "greens":
        _cmd_greens(cfg, out, provenance, potential, model, B)
    elif command in ("study", "checks"):
        _cmd_study(command, cfg, out, provenance, potential, model, B, solver,
                   scale)
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigurationError(f"unknown command {command!r}")


def _need(cfg: dict, section: str) -> dict:
    from .errors import ConfigurationError
    if section not in cfg:
        raise ConfigurationError(f"config section '{section}' is required")
    return cfg[section]


def _cmd_a0(cfg, out, provenance, potential):
    import numpy as np
    from .errors import ConfigurationError
    from . import config as cfgmod
    from .lattice import homogeneous_offsets
    from .potential import find_lattice_parameter

    if not hasattr(potential, "reference_site_energy"):
        raise ConfigurationError("this potential has no preferred lattice spacing")
    k = cfgmod._Keys(_need(cfg, "lattice"), "lattice")
    kind = k.take("kind")
    if kind == "custom":
        rows = np.asarray(k.take("A"), dtype=float)
    elif kind in cfgmod._NAMED_ROWS:
        rows = np.asarray(cfgmod._NAMED_ROWS[kind], dtype=float)
    else:
        raise ConfigurationError(f"unknown lattice kind {kind!r}")
    for ignored in ("scale", "m", "r_cut"):
        k.take(ignored, None)
    k.done()
    A_unit = rows.T
    a0 = find_lattice_parameter(potential, A_unit)
    support = potential.support_radius
    _, vecs = homogeneous_offsets(a0 * A_unit, support)
    e_site = float(potential.reference_site_energy(vecs))
    print(f"a0 = {a0:.16g}")
    print(f"site energy = {e_site:.16g}")
    _write_json(os.path.join(out, "a0.json"),
                {"schema_version": cfgmod.SCHEMA_VERSION, "provenance": provenance,
                 "a0": a0, "site_energy": e_site})


def _cmd_stability(cfg, out, provenance, potential, model, B, solver):
    from dataclasses import replace
    from . import config as cfgmod
    from .lattice import Supercell
    from .model import Assembly, phonon_check, stability_spectrum
    from .solver import relax
    from .xyz import write_xyz

    k = cfgmod._Keys(_need(cfg, "stability"), "stability")
    N = int(k.take("N"))
    n_eigs = int(k.take("n_eigs", 6))
    density = int(k.take("k_grid_density", 64))
    k.done()

    hom = replace(model, removed=(), added=(), R_def=0.0)
    phonon = phonon_check(potential, hom, density)
    cell = Supercell(model, B, N)
    asm = Assembly(cell, potential)
    res = relax(asm, None, solver)
    spectrum = stability_spectrum(asm, res.u, n_eigs=n_eigs)
    print(f"c0 estimate = {phonon.c0_estimate:.6g} (stable: {phonon.stable})")
    print(f"index = {spectrum.index}, lowest eigenvalue = {spectrum.eigenvalues[0]:.6g}")
    _write_json(os.path.join(out, "stability.json"),
                {"schema_version": cfgmod.SCHEMA_VERSION, "provenance": provenance,
                 "phonon": phonon.as_dict(), "spectrum": spectrum.as_dict(),
                 "relax": {"iterations": res.iterations, "grad_inf": res.grad_inf,
                           "energy": res.energy}})
    write_xyz(os.path.join(out, "relaxed.xyz"), cell, res.u)


def _cmd_relax(cfg, out, provenance, potential, model, B, solver):
    from . import config as cfgmod
    from .lattice import Supercell
    from .model import Assembly
    from .solver import relax
    from .xyz import write_xyz

    k = cfgmod._Keys(_need(cfg, "relax"), "relax")
    N = int(k.take("N"))
    k.done()
    cell = Supercell(model, B, N)
    asm = Assembly(cell, potential)
    res = relax(asm, None, solver)
    print(f"N = {N}: converged in {res.iterations} iterations, "
          f"grad_inf = {res.grad_inf:.3e}, energy = {res.energy:.12g}")
    _write_json(os.path.join(out, "relax.json"),
                {"schema_version": cfgmod.SCHEMA_VERSION, "provenance": provenance,
                 "N": N, "converged": res.converged, "iterations": res.iterations,
                 "newton_iterations": res.newton_iterations,
                 "grad_inf": res.grad_inf, "energy": res.energy})
    res.write_log(os.path.join(out, "log.csv"))
    write_xyz(os.path.join(out, "relaxed.xyz"), cell, res.u)


def _cmd_greens(cfg, out, provenance, potential, model, B):
    from . import config as cfgmod
    from .greens import export_csv, greens_convergence_study, periodic_greens

    k = cfgmod._Keys(_need(cfg, "greens"), "greens")
    N_list = [int(n) for n in k.take("N_list")]
    N_big = k.take("N_big", None)
    j_list = tuple(int(j) for j in k.take("j_list", [1, 2]))
    k.done()
    study = greens_convergence_study(potential, model, N_list, j_list=j_list,
                                     N_big=None if N_big is None else int(N_big))
    for j, rec in study.per_j.items():
        print(f"j = {j}: slope {rec['fit'].slope:+.3f} over N = {N_list}")
    _write_json(os.path.join(out, "greens.json"),
                {"schema_version": cfgmod.SCHEMA_VERSION, "provenance": provenance,
                 "study": study.as_dict()})
    table = periodic_greens(potential, model, B, max(N_list))
    export_csv(table, os.path.join(out, "greens_table.csv"))


def _cmd_study(command, cfg, out, provenance, potential, model, B, solver, scale):
    from .errors import NumericalError
    from . import config as cfgmod
    from .study import run_convergence, theory_checks
    from .xyz import write_xyz

    study_cfg, planted = cfgmod.build_study(_need(cfg, "study"), model, B,
                                            potential, solver)
    result = run_convergence(study_cfg, planted=planted)

    payload = {"schema_version": cfgmod.SCHEMA_VERSION, "provenance": provenance,
               "scale": scale, "study": result.as_dict()}
    results_path = os.path.join(out, "results.json")
    _write_json(results_path, payload)
    with open(results_path) as f:
        cfgmod.validate_results(json.load(f))

    _write_csv(os.path.join(out, "errors.csv"), ("N", "p", "err"),
               [(N, p, float(err)) for N, p, err in result.errors_rows()])
    _write_csv(os.path.join(out, "slopes.csv"),
               ("p", "slope", "intercept", "residual"),
               [(name, float(s), float(b), float(r))
                for name, s, b, r in result.slopes_rows()])
    for N, u in sorted(result.solutions.items()):
        write_xyz(os.path.join(out, f"relaxed_N{N}.xyz"), u.cell, u)
    if result.reference_solution is not None:
        ref = result.reference_solution
        write_xyz(os.path.join(out, f"relaxed_ref_N{ref.cell.N}.xyz"), ref.cell, ref)
    for name, fit in result.slopes.items():
        print(f"p = {name}: slope {fit.slope:+.3f} (residual {fit.residual:.2e})")

    if command == "checks":
        if planted is not None:
            raise NumericalError("theory checks need a solved study, not planted fields")
        ck = cfgmod._Keys(cfg.get("checks") or {}, "checks")
        n_fields = int(ck.take("n_fields", 32))
        seed = int(ck.take("seed", 0))
        ck.done()
        checks = theory_checks(result, n_fields=n_fields, seed=seed)
        _write_json(os.path.join(out, "checks.json"),
                    {"schema_version": cfgmod.SCHEMA_VERSION,
                     "provenance": provenance, "checks": checks})
        decay = checks.get("decay", {})
        for j, rec in decay.items():
            label = rec.get("slope", rec.get("skipped"))
            print(f"decay j = {j}: {label}")


if __name__ == "__main__":   # pragma: no cover
    console_main()
