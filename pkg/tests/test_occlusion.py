import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import wasserstein_distance

from aneurysm_vt.dsa import DsaImage
from aneurysm_vt.errors import DimMismatch, EmptySac, ZeroMass
from aneurysm_vt.geometry import OstiumSpec
from aneurysm_vt.occlusion import (OcclusionReport, dsa_distance, format_table, occlusion_percentages,
                                   report_from_volumes, rrc_classify, wasserstein_1d,
                                   write_report_csv)
from aneurysm_vt.shapes import box_grid


def test_counts_reproduce_first_table():
    # 7105 sac cells of 0.01 mm^3 each
    h = 0.01 ** (1 / 3)
    sac = np.zeros(10000, bool)
    sac[:7105] = True
    clot = np.zeros_like(sac)
    clot[:3657] = True
    dev = np.zeros_like(sac)
    dev[3657:3657 + 436] = True
    r = occlusion_percentages(sac, clot, dev, h)
    assert f"{r.pct_thrombus:.2f}" == "51.47"
    assert f"{r.pct_device:.2f}" == "6.14"
    assert f"{r.pct_total:.2f}" == "57.61"
    assert r.aneurysm_volume == pytest.approx(71.05)


def test_device_wins_overlap():
    sac = np.ones(10, bool)
    clot = np.zeros(10, bool)
    clot[:6] = True
    dev = np.zeros(10, bool)
    dev[4:8] = True
    r = occlusion_percentages(sac, clot, dev, 1.0)
    assert (r.thrombus_volume, r.device_volume) == (4.0, 4.0)
    assert r.pct_total == r.pct_thrombus + r.pct_device == 80.0
    assert r.residual_void_volume == 2.0


def test_empty_masks():
    sac = np.ones(5, bool)
    r = occlusion_percentages(sac, ~sac, ~sac, 0.5)
    assert r.pct_total == 0.0
    with pytest.raises(EmptySac):
        occlusion_percentages(~sac, ~sac, ~sac, 0.5)
    with pytest.raises(EmptySac):
        report_from_volumes(0.0, 1.0)


def _box_sac():
    g = box_grid((20, 20, 20), 0.1)
    ost = OstiumSpec([1.0, 1.0, 0.0], [0, 0, 1], 1.0)
    return g, g.interior.copy(), ost


def test_rrc_full_packing_is_class_one():
    g, sac, ost = _box_sac()
    assert rrc_classify(sac, sac, ost, g) == "I"


def test_rrc_neck_void_is_class_two():
    g, sac, ost = _box_sac()
    occ = sac.copy()
    occ[:, :, 1:3] = False
    assert rrc_classify(sac, occ, ost, g) == "II"


def test_rrc_central_void_is_class_three_a():
    g, sac, ost = _box_sac()
    c = g.cell_centers() - 1.0
    occ = sac & (np.linalg.norm(c, axis=-1) > 0.5)
    assert rrc_classify(sac, occ, ost, g) == "IIIa"


def test_rrc_dome_void_is_class_three_b():
    g, sac, ost = _box_sac()
    occ = sac.copy()
    occ[:, :, 19:21] = False
    assert rrc_classify(sac, occ, ost, g) == "IIIb"


def test_rrc_is_axis_relabel_invariant():
    g, sac, ost = _box_sac()
    c = g.cell_centers() - np.array([0.6, 1.3, 0.9])
    occ = sac & (np.linalg.norm(c, axis=-1) > 0.45)
    ref = rrc_classify(sac, occ, ost, g)
    # swap x and y: the geometry (box and ostium plane) is unchanged
    assert rrc_classify(sac.transpose(1, 0, 2), occ.transpose(1, 0, 2), ost, g) == ref


def test_wasserstein_examples():
    assert wasserstein_1d([1, 2, 3], [1, 2, 3]) == 0.0
    assert wasserstein_1d([1, 0], [0, 1]) == 1.0
    assert wasserstein_1d([1, 0, 0, 0], [0, 0, 0, 1], positions=[0, 1, 2, 7.5]) == 7.5
    with pytest.raises(ZeroMass):
        wasserstein_1d([0, 0], [1, 0])
    with pytest.raises(DimMismatch):
        wasserstein_1d([1, 0], [1, 0, 0])


weights = st.lists(st.floats(0, 10, allow_nan=False), min_size=6, max_size=6).filter(lambda w: sum(w) > 1e-3)


@settings(max_examples=200, deadline=None)
@given(weights, weights, weights)
def test_wasserstein_metric_properties(a, b, c):
    ab = wasserstein_1d(a, b)
    assert ab == pytest.approx(wasserstein_1d(b, a), abs=1e-9)
    assert ab <= wasserstein_1d(a, c) + wasserstein_1d(c, b) + 1e-9
    assert wasserstein_1d(a, a) <= 1e-12
    x = np.arange(6)
    assert ab == pytest.approx(wasserstein_distance(x, x, a, b), abs=1e-9)


def test_dsa_distance():
    R = np.zeros((8, 8))
    R[2:4, 3:6] = np.arange(6).reshape(2, 3) + 1.0
    img = DsaImage(R, pitch=0.2)
    assert dsa_distance(img, img) == 0.0
    diag = np.roll(np.roll(R, 1, 0), 1, 1)
    assert dsa_distance(img, DsaImage(diag, pitch=0.2)) == pytest.approx(0.2)
    # a shift along one axis moves only one marginal
    assert dsa_distance(img, DsaImage(np.roll(R, 1, 0), pitch=0.2)) == pytest.approx(0.1)
    a = np.zeros((8, 8))
    b = np.zeros((8, 8))
    a[0, 0] = 1.0
    b[3, 5] = 2.0
    assert dsa_distance(DsaImage(a, 1.0), DsaImage(b, 1.0)) == pytest.approx((3 + 5) / 2)
    with pytest.raises(ZeroMass):
        dsa_distance(DsaImage(a), DsaImage(np.zeros((8, 8))))
    with pytest.raises(DimMismatch):
        dsa_distance(DsaImage(a), DsaImage(np.ones((8, 7))))


def test_report_outputs(tmp_path):
    reports = {"none": report_from_volumes(71.05, 31.27),
               "coil": report_from_volumes(71.05, 36.57, 4.36, "II")}
    write_report_csv(reports, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("treatment,aneurysm_volume")
    assert len(lines) == 3
    text = format_table(reports)
    assert "44.01 %" in text and "51.47 %" in text and "6.14 %" in text
    assert "Sum coil" in text and "57.61 %" in text
    assert isinstance(reports["coil"], OcclusionReport)
    assert reports["coil"].as_dict()["rrc_class"] == "II"
