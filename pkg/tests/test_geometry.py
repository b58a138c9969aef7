import numpy as np
import pytest

from aneurysm_vt.errors import (DisconnectedDomain, EmptySac, NotWatertight, ParseError,
                                ResolutionTooCoarse)
from aneurysm_vt.geometry import (CellClass, Disk, OstiumSpec, SurfaceMesh, load_surface, tag_sac,
                                  voxelize, write_obj, write_stl)
from aneurysm_vt.shapes import build_grid, cube_mesh, icosphere, side_sac


def test_ascii_stl_cube(tmp_path):
    p = tmp_path / "cube.stl"
    write_stl(cube_mesh(), p, ascii=True)
    m = load_surface(p)
    assert len(m.faces) == 12
    assert m.signed_volume() == pytest.approx(1.0, abs=1e-12)


def test_binary_stl_roundtrip(tmp_path):
    p = tmp_path / "cube.stl"
    write_stl(cube_mesh(2.0), p)
    assert load_surface(p).signed_volume() == pytest.approx(8.0)


def test_obj_icosphere_volume(tmp_path):
    p = tmp_path / "sphere.obj"
    write_obj(icosphere(1.0, 3), p)
    m = load_surface(p)
    assert abs(m.signed_volume() / (4 * np.pi / 3) - 1) < 0.05


def test_missing_facet_is_not_watertight(tmp_path):
    m = cube_mesh()
    broken = SurfaceMesh(m.vertices, m.faces[1:])
    p = tmp_path / "broken.stl"
    write_stl(broken, p, ascii=True)
    with pytest.raises(NotWatertight):
        load_surface(p)


def test_garbage_file_is_parse_error(tmp_path):
    p = tmp_path / "bad.obj"
    p.write_text("v 0 0 0\nf 1 2 3\n")
    with pytest.raises((ParseError, NotWatertight)):
        load_surface(p)


def test_cube_voxelization_counts():
    # disks wide enough to cover the whole end faces
    inlet = Disk([0.0, 0.5, 0.5], [-1, 0, 0], 0.75)
    outlet = Disk([1.0, 0.5, 0.5], [1, 0, 0], 0.75)
    g = voxelize(cube_mesh(), 0.25, inlet, outlet)
    # brute-force point-in-cube test on the cell centres
    c = g.cell_centers()
    inside = np.all((c > 0) & (c < 1), axis=-1)
    assert inside.sum() == 64
    assert np.array_equal(g.interior, inside)
    assert np.count_nonzero(g.cell_class == CellClass.INLET) == 16
    assert np.count_nonzero(g.cell_class == CellClass.OUTLET) == 16


def test_sphere_volume_within_two_percent():
    m = icosphere(0.5, 5)
    g = voxelize(m, 0.02)
    vol = g.n_fluid() * g.cell_volume
    assert abs(vol / (np.pi / 6) - 1) < 0.02


def test_sphere_volume_converges_first_order():
    m = icosphere(1.0, 5)
    exact = m.signed_volume()
    hs = np.array([0.2, 0.1, 0.05, 0.025])
    errs = np.array([abs(voxelize(m, h).n_fluid() * h ** 3 - exact) for h in hs])
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert slope >= 0.9


def test_coarse_resolution_rejected():
    inlet = Disk([0.0, 0.5, 0.5], [-1, 0, 0], 0.5)
    with pytest.raises(ResolutionTooCoarse):
        voxelize(cube_mesh(), 10.0, inlet, None)


def test_disconnected_outlet():
    a = cube_mesh(1.0)
    b = cube_mesh(1.0, (3.0, 0.0, 0.0))
    two = SurfaceMesh(np.vstack([a.vertices, b.vertices]), np.vstack([a.faces, b.faces + 8]))
    with pytest.raises(DisconnectedDomain):
        voxelize(two, 0.1, Disk([0, 0.5, 0.5], [-1, 0, 0], 0.5), Disk([4, 0.5, 0.5], [1, 0, 0], 0.5))


def test_classification_is_deterministic():
    m = icosphere(1.0, 3)
    a = voxelize(m, 0.1)
    b = voxelize(m, 0.1)
    assert a.cell_class.tobytes() == b.cell_class.tobytes()


def test_hemispherical_sac_volume():
    r = 3.0
    g = build_grid(side_sac(2.0, 20.0, r), 0.1)
    vol = np.count_nonzero(g.sac_mask) * g.cell_volume
    assert abs(vol / (2 / 3 * np.pi * r ** 3) - 1) < 0.03
    assert not np.any(g.sac_mask & ~g.interior)
    assert np.all(g.cell_class[g.dome_wall_mask] == CellClass.WALL)


def test_ostium_outside_domain_is_empty_sac():
    g = build_grid(side_sac(), 0.5)
    with pytest.raises(EmptySac):
        tag_sac(g, OstiumSpec([10.0, 50.0, 0.0], [0, 1, 0], 1.0))


def test_flipped_ostium_selects_parent_side():
    v = side_sac()
    g = build_grid(v, 0.5)
    os_ = v.ostium
    flipped = tag_sac(g, OstiumSpec(os_.point, -os_.normal, os_.radius))
    assert np.count_nonzero(flipped.sac_mask & g.sac_mask) == 0
    assert np.count_nonzero(flipped.sac_mask) > np.count_nonzero(g.sac_mask)
