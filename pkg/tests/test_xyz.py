"""Extended-XYZ export: header conventions, species, displaced positions."""
import numpy as np
import pytest

from ldlab.errors import ConfigurationError
from ldlab.lattice import (Displacement, Supercell, apply_defect,
                           build_homogeneous)
from ldlab.potential import QuadraticFormPotential
from ldlab.xyz import lattice_header, write_xyz


def square_cell(N=2, m=2):
    pot = QuadraticFormPotential(m=m, weight=1.0, support=1.0)
    model = build_homogeneous(np.eye(2), pot.support_radius, m=m)
    return Supercell(model, np.eye(2), N)


def read_xyz(path):
    lines = path.read_text().splitlines()
    count = int(lines[0])
    header = lines[1]
    rows = [(ln.split()[0], np.array([float(x) for x in ln.split()[1:]]))
            for ln in lines[2:]]
    return count, header, rows


def test_header_pads_2d_cells_to_unit_z():
    cell = square_cell(N=3)
    header = lattice_header(cell)
    assert header.startswith('Lattice="')
    assert 'Properties=species:S:1:pos:R:3' in header
    entries = header.split('"')[1].split()
    P = np.array([float(x) for x in entries]).reshape(3, 3)
    # rows are period vectors; 2N * B = 6 I for this cell
    assert np.allclose(P, np.diag([6.0, 6.0, 1.0]))


def test_write_roundtrip_with_displacements(tmp_path):
    cell = square_cell(N=2)
    rng = np.random.default_rng(0)
    u = 0.01 * rng.standard_normal((cell.n_sites, cell.m))
    path = tmp_path / "out.xyz"
    write_xyz(path, cell, u)
    count, header, rows = read_xyz(path)
    assert count == cell.n_sites == len(rows)
    assert all(sym == "X" for sym, _ in rows)
    got = np.stack([xyz for _, xyz in rows])
    assert np.allclose(got[:, :2], cell.positions + u, atol=1e-9)
    assert np.all(got[:, 2] == 0.0)


def test_write_accepts_displacement_and_none(tmp_path):
    cell = square_cell(N=2)
    u = Displacement.zeros(cell)
    p1, p2 = tmp_path / "a.xyz", tmp_path / "b.xyz"
    write_xyz(p1, cell, u)
    write_xyz(p2, cell, None)
    assert p1.read_text() == p2.read_text()


def test_non_geometric_fields_leave_positions_alone(tmp_path):
    cell = square_cell(N=2, m=1)
    u = np.ones((cell.n_sites, 1))
    path = tmp_path / "out.xyz"
    write_xyz(path, cell, u)
    _, _, rows = read_xyz(path)
    got = np.stack([xyz for _, xyz in rows])
    assert np.allclose(got[:, :2], cell.positions, atol=1e-9)


def test_added_sites_get_their_own_species(tmp_path):
    pot = QuadraticFormPotential(m=2, weight=1.0, support=1.0)
    hom = build_homogeneous(np.eye(2), pot.support_radius, m=2)
    model = apply_defect(hom, added=[(0.5, 0.5)])
    cell = Supercell(model, np.eye(2), 2)
    path = tmp_path / "out.xyz"
    write_xyz(path, cell, None)
    count, _, rows = read_xyz(path)
    assert count == cell.n_lattice + 1
    species = [sym for sym, _ in rows]
    assert species[:-1] == ["X"] * cell.n_lattice
    assert species[-1] == "Y"
    assert np.allclose(rows[-1][1], [0.5, 0.5, 0.0], atol=1e-9)


def test_3d_cell_header_uses_full_period(tmp_path):
    pot = QuadraticFormPotential(m=3, weight=1.0, support=1.0)
    model = build_homogeneous(np.eye(3), pot.support_radius, m=3)
    cell = Supercell(model, np.eye(3), 2)
    path = tmp_path / "out.xyz"
    write_xyz(path, cell, None)
    count, header, rows = read_xyz(path)
    assert count == 64
    entries = header.split('"')[1].split()
    P = np.array([float(x) for x in entries]).reshape(3, 3)
    assert np.allclose(P, 4.0 * np.eye(3))


def test_write_rejects_wrong_shape(tmp_path):
    cell = square_cell(N=2)
    with pytest.raises(ConfigurationError, match="shape"):
        write_xyz(tmp_path / "out.xyz", cell,
                  np.zeros((cell.n_sites + 1, cell.m)))
