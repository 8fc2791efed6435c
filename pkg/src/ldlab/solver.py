"""Equilibration of periodic cells: preconditioned NCG plus Newton polish.

The default preconditioner is the inverse homogeneous lattice Laplacian
(mu*L + eps) applied spectrally on the supercell grid; it is symmetric
positive definite on the zero-mean subspace and costs one FFT round trip
per application.  The "symbol" variant inverts the full phonon symbol
(H_hat(k) + eps)^{-1} per mode instead, which leaves only the defect as
an unpreconditioned perturbation and keeps the iteration count flat in N.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, NumericalError, SolverError
from .lattice import Displacement, Supercell
from .model import Assembly, PhononSymbol, _chunk_slices


@dataclass
class SolverOptions:
    tol_grad_inf: float = 1e-10
    max_iter: int = 2000
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    restart: int = 50
    precond: str = "laplacian"          # "laplacian" | "symbol" | "off"
    mu: float | None = None             # None: calibrate from the phonon symbol
    eps_factor: float = 1e-4
    newton_refine: bool = False
    newton_switch: float | None = None  # hand off to Newton at this grad_inf
    newton_tol: float = 1e-12
    newton_max: int = 12
    newton_direct_budget: int = 120_000
    linear_tol: float = 1e-10
    linear_maxiter: int = 5000

    def validate(self):
        if self.tol_grad_inf <= 0:
            raise ConfigurationError("tol_grad_inf must be positive")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be >= 1")
        if self.restart < 1:
            raise ConfigurationError("restart interval must be >= 1")
        if not (0.0 < self.backtrack < 1.0):
            raise ConfigurationError("backtrack factor must lie in (0, 1)")
        if not (0.0 < self.armijo_c < 0.5):
            raise ConfigurationError("armijo constant must lie in (0, 0.5)")
        if self.precond not in ("laplacian", "symbol", "off"):
            raise ConfigurationError(f"unknown preconditioner {self.precond!r}")
        if self.newton_switch is not None:
            if self.newton_switch <= 0:
                raise ConfigurationError("newton_switch must be positive")
            if not self.newton_refine:
                raise ConfigurationError("newton_switch requires newton_refine")


@dataclass
class RelaxResult:
    u: Displacement
    converged: bool
    iterations: int
    grad_inf: float
    energy: float
    history: list                      # rows (iter, energy, grad_inf, step)
    newton_iterations: int = 0
    message: str = ""

    def write_log(self, path):
        with open(path, "w") as f:
            f.write("iter,energy,grad_inf,step\n")
            for it, e, gi, st in self.history:
                f.write(f"{it},{e:.17e},{gi:.17e},{st:.17e}\n")


class LatticePreconditioner:
    """Spectral inverse of a homogeneous surrogate for the Hessian.

    kind "laplacian" uses (mu*L + eps)^{-1} with L the stencil Laplacian;
    kind "symbol" inverts the full phonon symbol (H_hat(k) + eps)^{-1}
    mode by mode, so the homogeneous physics is captured exactly and only
    the defect sites remain as a perturbation.  Lattice sites travel
    through the FFT grid (removed slots zero-filled, gather = scatter^T
    keeps symmetry); added defect sites get a diagonal coefficient.  The
    k = 0 mode is zeroed, so constants map to zero.
    """

    def __init__(self, cell: Supercell, potential=None, mu: float | None = None,
                 eps_factor: float = 1e-4, kind: str = "laplacian"):
        grid = cell.grid
        if mu is None:
            mu = _calibrate_mu(potential, cell.model) if potential is not None else 1.0
        eps = eps_factor * mu
        self.cell = cell
        self.mu = float(mu)
        self.kind = kind
        if kind == "symbol":
            if potential is None:
                raise ConfigurationError("symbol preconditioner needs the potential")
            self.w_symbol = _inverse_symbol_table(potential, cell, eps)
            c_add = float(np.trace(self.w_symbol[1:].real.mean(axis=0)) / cell.m)
        else:
            lhat = np.zeros(grid.dims)
            for z in cell.hom_zetas:
                ph = grid.stencil_phase(z)
                lhat += np.abs(ph - 1.0) ** 2
            w = 1.0 / (mu * lhat + eps)
            w.reshape(-1)[0] = 0.0      # kappa = 0: project out constants
            self.weights = w
            c_add = float(w.reshape(-1)[1:].mean())
        self.c_add = c_add
        self._slots = grid.rank_of(cell.z_lattice)

    def apply(self, v: np.ndarray) -> np.ndarray:
        cell = self.cell
        grid = cell.grid
        n_lat = cell.n_lattice
        gridvals = np.zeros((grid.size, cell.m))
        gridvals[self._slots] = v[:n_lat]
        modes = grid.fft(grid.to_grid(gridvals))
        if self.kind == "symbol":
            flat = np.einsum("kij,kj->ki", self.w_symbol,
                             modes.reshape(grid.size, cell.m))
            modes = flat.reshape(*grid.dims, cell.m)
        else:
            modes *= self.weights[..., None]
        back = grid.ifft(modes).real.reshape(grid.size, cell.m)
        out = np.empty_like(v)
        out[:n_lat] = back[self._slots]
        out[n_lat:] = self.c_add * v[n_lat:]
        return out


def _inverse_symbol_table(potential, cell: Supercell, eps: float) -> np.ndarray:
    """(H_hat(k) + eps)^{-1} on the supercell mode grid, zero mode zeroed."""
    model = cell.model
    grid = cell.grid
    sym = PhononSymbol(potential, model)
    kvecs = 2.0 * np.pi * grid.mode_fractions() @ np.linalg.inv(model.A)
    m = model.m
    shift = eps * np.eye(m)
    W = np.empty((grid.size, m, m), dtype=complex)
    for sl in _chunk_slices(grid.size, 1 << 16):
        H = sym.matrices(kvecs[sl]) + shift
        lam = np.linalg.eigvalsh(H)[:, 0]
        if sl.start == 0:
            lam[0] = np.inf             # kappa = 0 handled by gauge
        if np.any(lam <= 0.0):
            raise NumericalError("phonon symbol is not positive definite; "
                                 "cannot precondition with its inverse")
        W[sl] = np.linalg.inv(H)
    W[0] = 0.0
    return W


def _calibrate_mu(potential, model, density: int = 8) -> float:
    """Median of lambda_min(H_hat)/h_hat over a coarse k-grid: the scale at
    which the Laplacian mimics the softest phonon branch."""
    sym = PhononSymbol(potential, model)
    d = model.d
    recip = 2.0 * np.pi * np.linalg.inv(model.A).T
    frac = np.stack(np.meshgrid(*([np.arange(density) / density] * d),
                                indexing="ij"), axis=-1).reshape(-1, d)
    frac = frac[np.any(frac != 0.0, axis=1)]
    K = frac @ recip.T
    lam = np.linalg.eigvalsh(sym.matrices(K))[:, 0]
    ratio = lam / sym.h_scalar(K)
    mu = float(np.median(ratio))
    if mu <= 0:
        raise NumericalError("preconditioner calibration hit an unstable symbol")
    return mu


def _project(x: np.ndarray) -> np.ndarray:
    return x - x.mean(axis=0)


def relax(asm: Assembly, u0=None, opts: SolverOptions | None = None) -> RelaxResult:
    """Polak-Ribiere+ NCG with zero-mean projection and Armijo backtracking.

    Raises SolverError (with the partial result attached) when the iteration
    budget runs out or the linesearch stagnates.
    """
    opts = opts if opts is not None else SolverOptions()
    opts.validate()
    cell = asm.cell
    if u0 is None:
        u = np.zeros((cell.n_sites, cell.m))
    else:
        u = asm._values(u0).copy()
    u = _project(u)

    prec = None
    if opts.precond != "off":
        prec = LatticePreconditioner(cell, potential=asm.potential, mu=opts.mu,
                                     eps_factor=opts.eps_factor, kind=opts.precond)

    def apply_M(g):
        return _project(prec.apply(g)) if prec is not None else g

    E = asm.energy(u)
    g = _project(asm.gradient(u))
    ginf = float(np.abs(g).max())
    history = [(0, E, ginf, 0.0)]

    def finish(converged, iters, msg=""):
        res = RelaxResult(u=Displacement(cell, u.copy(), gauge="zero-mean"),
                          converged=converged, iterations=iters, grad_inf=ginf,
                          energy=E, history=history, message=msg)
        if converged and opts.newton_refine:
            res = _refine(asm, res, opts)
        return res

    # with Newton refinement on, descent may stop at the handoff threshold;
    # _refine still drives the result below min(newton_tol, tol_grad_inf)
    stop = opts.tol_grad_inf
    if opts.newton_refine and opts.newton_switch is not None:
        stop = max(stop, opts.newton_switch)

    if ginf <= stop:
        return finish(True, 0)

    z = apply_M(g)
    p = -z
    gz = float(np.vdot(g, z))
    alpha_init = min(1.0, 0.1 / max(float(np.abs(p).max()), 1e-30))

    for it in range(1, opts.max_iter + 1):
        dphi0 = float(np.vdot(g, p))
        if dphi0 >= 0:
            p = -z
            dphi0 = -gz
        # start at the 1D Newton step; exact for quadratic landscapes, which
        # keeps the search conjugate instead of creeping on Armijo steps
        curv = float(np.vdot(p, asm.hessian_apply(u, p)))
        alpha = -dphi0 / curv if curv > 0 else alpha_init
        # keep trial atom moves bounded; collisions make the energy blow up
        alpha = min(alpha, 0.5 / max(float(np.abs(p).max()), 1e-30))
        # decrease smaller than roundoff on E is not measurable; the slack
        # keeps the linesearch alive in the last iterations before tolerance
        slack = 1e-14 * (1.0 + abs(E))
        E_new = None
        for _ in range(80):
            E_try = None
            try:
                E_try = asm.energy(u + alpha * p)
            except NumericalError:
                pass
            if E_try is not None and math.isfinite(E_try) and \
                    E_try <= E + opts.armijo_c * alpha * dphi0 + slack:
                E_new = E_try
                break
            if E_try is None or not math.isfinite(E_try):
                alpha *= 0.25
                continue
            # quadratic interpolation on phi, clipped into [0.1, 0.5]*alpha
            denom = 2.0 * (E_try - E - dphi0 * alpha)
            a_q = -dphi0 * alpha * alpha / denom if denom > 0 else opts.backtrack * alpha
            alpha = min(max(a_q, 0.1 * alpha), opts.backtrack * alpha)
        if E_new is None:
            raise SolverError("linesearch stagnated",
                              result=finish(False, it, "linesearch stagnated"))
        u = _project(u + alpha * p)
        E = E_new
        g_new = _project(asm.gradient(u))
        ginf = float(np.abs(g_new).max())
        history.append((it, E, ginf, alpha))
        if ginf <= stop:
            return finish(True, it)
        z_new = apply_M(g_new)
        gz_new = float(np.vdot(g_new, z_new))
        beta = max(0.0, (gz_new - float(np.vdot(g, z_new))) / gz)
        if it % opts.restart == 0:
            beta = 0.0
        p = -z_new + beta * p
        g, z, gz = g_new, z_new, gz_new
        alpha_init = alpha

    raise SolverError(f"relax did not converge in {opts.max_iter} iterations",
                      result=finish(False, opts.max_iter, "max_iter exceeded"))


# ---------------------------------------------------------------------------
# Newton refinement


def _mean_constraint(n_sites: int, m: int) -> sp.csr_matrix:
    # columns: indicator of component c across sites
    return sp.csr_matrix(np.tile(np.eye(m), (n_sites, 1)))


def _newton_direct(asm: Assembly, u: np.ndarray, g: np.ndarray,
                   budget: int) -> np.ndarray:
    ns, m = u.shape
    H = asm.hessian_matrix(u, budget=budget)
    C = _mean_constraint(ns, m)
    KKT = sp.bmat([[H, C], [C.T, None]], format="csc")
    rhs = np.concatenate([-g.ravel(), np.zeros(m)])
    sol = spla.spsolve(KKT, rhs)
    if not np.all(np.isfinite(sol)):
        raise NumericalError("singular KKT system in Newton refinement")
    return sol[: ns * m].reshape(ns, m)


def _newton_pcg(asm: Assembly, u: np.ndarray, g: np.ndarray,
                prec: LatticePreconditioner | None,
                opts: SolverOptions) -> np.ndarray:
    ns, m = u.shape
    nm = ns * m

    def a_mat(x):
        v = x.reshape(ns, m)
        pv = _project(v)
        hv = _project(asm.hessian_apply(u, pv))
        return (hv + (v - pv)).ravel()

    def m_mat(x):
        v = x.reshape(ns, m)
        pv = _project(v)
        if prec is None:
            return x
        return (_project(prec.apply(pv)) + (v - pv)).ravel()

    A = spla.LinearOperator((nm, nm), matvec=a_mat, dtype=float)
    M = spla.LinearOperator((nm, nm), matvec=m_mat, dtype=float)
    x, info = spla.cg(A, -g.ravel(), M=M, rtol=opts.linear_tol, atol=0.0,
                      maxiter=opts.linear_maxiter)
    if info != 0:
        raise SolverError(f"Newton linear solve failed to converge (info={info})")
    return _project(x.reshape(ns, m))


def _refine(asm: Assembly, res: RelaxResult, opts: SolverOptions) -> RelaxResult:
    cell = asm.cell
    u = res.u.values.copy()
    nm = cell.n_sites * cell.m
    prec = None
    if nm > opts.newton_direct_budget and opts.precond != "off":
        prec = LatticePreconditioner(cell, potential=asm.potential, mu=opts.mu,
                                     eps_factor=opts.eps_factor, kind=opts.precond)
    newton_its = 0
    tol = min(opts.newton_tol, opts.tol_grad_inf)
    g = _project(asm.gradient(u))
    ginf = float(np.abs(g).max())
    for _ in range(opts.newton_max):
        if ginf <= tol:
            break
        if nm <= opts.newton_direct_budget:
            delta = _newton_direct(asm, u, g, opts.newton_direct_budget)
        else:
            delta = _newton_pcg(asm, u, g, prec, opts)
        step = 1.0
        for _ in range(8):
            u_try = _project(u + step * delta)
            g_try = _project(asm.gradient(u_try))
            ginf_try = float(np.abs(g_try).max())
            if ginf_try < ginf:
                u, g, ginf = u_try, g_try, ginf_try
                break
            step *= 0.5
        else:
            raise SolverError("Newton step failed to reduce the gradient",
                              result=res)
        newton_its += 1
    if ginf > tol:
        raise SolverError(
            f"Newton refinement stalled at grad_inf = {ginf:.3e}", result=res)
    E = asm.energy(u)
    res.history.append((res.iterations + newton_its, E, ginf, 0.0))
    return RelaxResult(u=Displacement(cell, u, gauge="zero-mean"), converged=True,
                       iterations=res.iterations, grad_inf=ginf, energy=E,
                       history=res.history, newton_iterations=newton_its,
                       message=res.message)


# ---------------------------------------------------------------------------
# continuation


def prolong(u: Displacement, target: Supercell) -> Displacement:
    """Copy a field onto a larger cell of the same model, zero outside.

    Realizes the periodic continuation guess: values carry over by lattice
    coordinate, new sites start at zero, and the result is re-centered.
    """
    src = u.cell
    sm, tm = src.model, target.model
    if not (np.array_equal(sm.A, tm.A) and sm.removed == tm.removed
            and sm.added == tm.added and sm.m == tm.m):
        raise ConfigurationError("prolong requires the same lattice model")
    if not np.array_equal(src.M, target.M):
        raise ConfigurationError("prolong requires the same cell shape matrix")
    if target.N < src.N:
        raise ConfigurationError("prolong target must not be smaller")
    out = np.zeros((target.n_sites, target.m))
    idx = target.site_of_z(src.z_lattice)
    if np.any(idx < 0):
        raise NumericalError("prolong index mismatch between cells")
    out[idx] = u.values[: src.n_lattice]
    if src.n_sites > src.n_lattice:
        out[target.n_lattice:] = u.values[src.n_lattice:]
    return Displacement(target, _project(out), gauge="zero-mean")
