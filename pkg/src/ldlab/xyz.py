"""Extended-XYZ export of (relaxed) supercell configurations.

Format: atom count, then a Lattice="..." header line, then one
`symbol x y z` row per site.  2D cells are padded with a unit z vector.
Lattice sites are written as species X, added defect sites as Y.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigurationError
from .lattice import Displacement, Supercell


def _pad3(X: np.ndarray) -> np.ndarray:
    n, d = X.shape
    if d == 3:
        return X
    out = np.zeros((n, 3))
    out[:, :d] = X
    return out


def lattice_header(cell: Supercell) -> str:
    d = cell.d
    P = np.zeros((3, 3))
    P[:d, :d] = cell.period.T          # rows = period vectors
    for k in range(d, 3):
        P[k, k] = 1.0
    entries = " ".join(f"{x:.10f}" for x in P.reshape(-1))
    return f'Lattice="{entries}" Properties=species:S:1:pos:R:3'


def write_xyz(path, cell: Supercell, u=None):
    """Write site positions (plus optional displacements) as extended XYZ."""
    if isinstance(u, Displacement):
        u = u.values
    pos = cell.positions.copy()
    if u is not None:
        u = np.asarray(u, dtype=float)
        if u.shape != (cell.n_sites, cell.m):
            raise ConfigurationError(
                f"field shape {u.shape} does not match cell ({cell.n_sites}, {cell.m})")
        if cell.m == cell.d:
            pos += u
        # m != d fields carry no geometric displacement; positions exported as-is
    pos = _pad3(pos)
    with open(path, "w") as f:
        f.write(f"{cell.n_sites}\n")
        f.write(lattice_header(cell) + "\n")
        for i in range(cell.n_sites):
            sym = "X" if i < cell.n_lattice else "Y"
            x, y, z = pos[i]
            f.write(f"{sym} {x:.10f} {y:.10f} {z:.10f}\n")
