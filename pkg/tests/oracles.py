"""Independent reference computations used across the test suite.

These deliberately avoid the package's stencil bookkeeping: energies come
from a quadratic-cost scan over positions and periodic images, derivative
checks from central finite differences.
"""
import itertools

import numpy as np


def naive_energy(cell, potential, vals) -> float:
    """O(n^2) periodic site-energy sum straight from positions.

    Stencil membership is decided by reference distances (closed ball with
    the same 1e-9 slack the package uses); per-site energies go through the
    potential's single-site `eval`, so renormalization semantics match.
    """
    pos, per = cell.positions, cell.period
    d, r_cut = cell.d, cell.model.r_cut
    vals = np.asarray(vals, dtype=float)
    shifts = np.array(list(itertools.product((-1, 0, 1), repeat=d)),
                      dtype=float) @ per.T
    total = 0.0
    for i in range(cell.n_sites):
        base = pos[None, :, :] + shifts[:, None, :] - pos[i]
        dist = np.linalg.norm(base, axis=-1)
        mask = (dist > 1e-12) & (dist <= r_cut + 1e-9)
        _, jj = np.nonzero(mask)
        total += potential.eval(base[mask], vals[jj] - vals[i])
    return total


def fd_gradient_error(asm, vals, rng, eps: float = 1e-6) -> float:
    """Relative mismatch between <grad, v> and a central difference of E."""
    v = rng.standard_normal(vals.shape)
    v /= np.linalg.norm(v)
    de = (asm.energy(vals + eps * v) - asm.energy(vals - eps * v)) / (2 * eps)
    g = float(np.sum(asm.gradient(vals) * v))
    return abs(de - g) / max(1.0, abs(g))


def fd_hessian_error(asm, vals, rng, eps: float = 1e-6) -> float:
    """Relative mismatch between H w and a central difference of the gradient."""
    w = rng.standard_normal(vals.shape)
    w /= np.linalg.norm(w)
    fd = (asm.gradient(vals + eps * w) - asm.gradient(vals - eps * w)) / (2 * eps)
    hw = asm.hessian_apply(vals, w)
    return float(np.linalg.norm(fd - hw) / max(1.0, np.linalg.norm(hw)))
