import numpy as np
import pytest

from aneurysm_vt.dsa import (DsaImage, ProjectionSetup, read_pgm, render_dsa, subtract_series)
from aneurysm_vt.errors import DegenerateSetup, DimMismatch
from aneurysm_vt.shapes import box_grid


def _ball(h, r=1.0, box=3.0):
    n = int(round(box / h))
    g = box_grid((n, n, n), h)
    c = g.cell_centers() - box / 2
    return g, (np.linalg.norm(c, axis=-1) < r).astype(float)


def _ray(h, d, box=3.0):
    return ProjectionSetup([box / 2 + d, box / 2, -h], [0, 0, 1], [0, 1, 0], box + 2 * h, (1, 1), 0.1, 0.6)


def test_zero_field_gives_zero_image():
    g, _ = _ball(0.1)
    img = render_dsa(np.zeros(g.dims), g, ProjectionSetup.along_axis(g))
    assert np.all(img.R == 0)


def test_central_chord():
    g, C = _ball(0.05)
    R = render_dsa(C, g, _ray(0.05, 0.0)).R[0, 0]
    assert abs(R / (0.6 * 2.0) - 1) <= 0.02


@pytest.mark.parametrize("d", [0.3, 0.6, 0.8])
def test_offset_chords(d):
    g, C = _ball(0.05)
    R = render_dsa(C, g, _ray(0.05, d)).R[0, 0]
    assert abs(R / (0.6 * 2 * np.sqrt(1 - d * d)) - 1) <= 0.03


def _blob(g, centre, s=0.3):
    c = g.cell_centers() - np.asarray(centre)
    return np.exp(-np.sum(c ** 2, axis=-1) / (2 * s * s))


def test_linearity():
    g = box_grid((20, 20, 20), 0.1)
    C = _blob(g, [1.0, 1.0, 1.0])
    st = ProjectionSetup.along_axis(g)
    a = render_dsa(C, g, st).R
    b = render_dsa(2.5 * C, g, st).R
    assert np.allclose(b, 2.5 * a, rtol=1e-12, atol=0)


def test_translation_by_one_voxel():
    g = box_grid((24, 24, 12), 0.1)
    st = ProjectionSetup.along_axis(g)
    a = render_dsa(_blob(g, [1.2, 1.2, 0.6]), g, st).R
    b = render_dsa(_blob(g, [1.3, 1.2, 0.6]), g, st).R
    # right axis is +x, pitch = h: one pixel shift along W
    assert np.abs(b[1:, :] - a[:-1, :]).max() <= 0.05 * a.max()


def test_step_halving_changes_little():
    g = box_grid((20, 20, 20), 0.1)
    C = _blob(g, [1.0, 1.0, 1.0])
    st = ProjectionSetup.along_axis(g)
    a = render_dsa(C, g, st).R
    b = render_dsa(C, g, st, step=0.025).R
    m = a > 0.05 * a.max()
    assert np.max(np.abs(b[m] / a[m] - 1)) <= 0.01


def test_degenerate_setup():
    with pytest.raises(DegenerateSetup):
        ProjectionSetup([0, 0, 0], [0, 0, 1], [0, 0, 2], 1.0)


def test_subtraction_rules():
    post = DsaImage(np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(subtract_series(DsaImage(np.zeros((2, 2))), post).R, post.R)
    assert np.all(subtract_series(post, post).R == 0)
    pre = DsaImage(np.array([[2.0, 0.0], [0.0, 0.0]]))
    assert subtract_series(pre, post).R[0, 0] == 0.0
    with pytest.raises(DimMismatch):
        subtract_series(DsaImage(np.zeros((3, 2))), post)


def test_image_files_round_trip(tmp_path):
    R = np.arange(12, dtype=float).reshape(4, 3) / 11
    img = DsaImage(R, 0.1, 0.6)
    img.write_raw(tmp_path / "a.raw")
    back = DsaImage.read_raw(tmp_path / "a.raw")
    assert np.array_equal(back.R, R) and back.pitch == 0.1 and back.k == 0.6
    for binary in (True, False):
        p = tmp_path / f"a{binary}.pgm"
        img.write_pgm(p, window=1.0, binary=binary)
        g = read_pgm(p)
        assert g.shape == (3, 4)
        assert np.array_equal(g, img.to_gray(1.0).T[::-1])
    assert img.to_gray(1.0)[0, 0] == 255 and img.to_gray(1.0)[3, 2] == 0
