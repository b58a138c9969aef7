"""Occlusion metrics, Raymond-Roy grading and Wasserstein comparison of DSA images."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import DimMismatch, EmptySac, ZeroMass

RRC_CLASSES = ("I", "II", "IIIa", "IIIb")


@dataclass(frozen=True)
class RrcThresholds:
    void_fraction: float = 0.05     # below this the packing counts as complete
    neck_voxels: float = 2.0        # band width next to the ostium plane
    core_fraction: float = 0.25     # of the sac inradius


@dataclass
class OcclusionReport:
    aneurysm_volume: float
    thrombus_volume: float
    device_volume: float
    pct_thrombus: float
    pct_device: float
    pct_total: float
    rrc_class: str | None = None
    residual_void_volume: float = 0.0

    def as_dict(self):
        return asdict(self)


def percent(part, whole):
    return 100.0 * part / whole


def report_from_volumes(aneurysm, thrombus, device=0.0, rrc_class=None):
    if aneurysm <= 0:
        raise EmptySac("aneurysm volume must be positive")
    pt, pd = percent(thrombus, aneurysm), percent(device, aneurysm)
    void = max(aneurysm - thrombus - device, 0.0)
    return OcclusionReport(aneurysm, thrombus, device, pt, pd, pt + pd, rrc_class, void)


def occlusion_percentages(sac_mask, clot_mask, device_mask, h) -> OcclusionReport:
    """Volumes from cell counts; a cell both clotted and device-occupied counts as device."""
    sac = np.asarray(sac_mask, bool)
    dev = np.asarray(device_mask, bool) & sac
    clot = np.asarray(clot_mask, bool) & sac & ~dev
    n_sac = int(np.count_nonzero(sac))
    if n_sac == 0:
        raise EmptySac("sac mask is empty")
    n_clot, n_dev = int(np.count_nonzero(clot)), int(np.count_nonzero(dev))
    v = h ** 3
    pct_t = 100.0 * n_clot / n_sac
    pct_d = 100.0 * n_dev / n_sac
    return OcclusionReport(n_sac * v, n_clot * v, n_dev * v, pct_t, pct_d,
                           100.0 * (n_clot + n_dev) / n_sac, None, (n_sac - n_clot - n_dev) * v)


def rrc_classify(sac_mask, occupied_mask, ostium, grid, thresholds: RrcThresholds = RrcThresholds()):
    sac = np.asarray(sac_mask, bool)
    n_sac = int(np.count_nonzero(sac))
    if n_sac == 0:
        raise EmptySac("sac mask is empty")
    void = sac & ~np.asarray(occupied_mask, bool)
    n_void = int(np.count_nonzero(void))
    if n_void < thresholds.void_fraction * n_sac:
        return "I"
    h = grid.h
    centres = grid.cell_centers()
    signed = (centres - ostium.point) @ ostium.normal
    neck = void & (signed <= thresholds.neck_voxels * h)
    if np.count_nonzero(neck) > 0.5 * n_void:
        return "II"
    wall_dist = ndimage.distance_transform_edt(sac) * h
    inradius = float(wall_dist.max())
    centroid = centres[void].mean(axis=0)
    idx = tuple(np.clip(np.floor((centroid - grid.origin) / h).astype(int), 0, np.asarray(sac.shape) - 1))
    if wall_dist[idx] > thresholds.core_fraction * inradius:
        return "IIIa"
    return "IIIb"


def wasserstein_1d(a, b, positions=None):
    """Exact W1 between two histograms on shared bin positions (unit spacing by default)."""
    a = np.asarray(a, float).ravel()
    b = np.asarray(b, float).ravel()
    if a.shape != b.shape:
        raise DimMismatch("histograms differ in length")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("weights must be non-negative")
    sa, sb = a.sum(), b.sum()
    if sa <= 0 or sb <= 0:
        raise ZeroMass("both histograms need positive mass")
    x = np.arange(len(a), dtype=float) if positions is None else np.asarray(positions, float)
    cdf = np.cumsum(a / sa - b / sb)[:-1]
    return float(np.sum(np.abs(cdf) * np.diff(x)))


def dsa_distance(img1, img2):
    """Mean of the row- and column-marginal W1 distances of the normalised images (mm)."""
    R1 = getattr(img1, "R", img1)
    R2 = getattr(img2, "R", img2)
    R1, R2 = np.asarray(R1, float), np.asarray(R2, float)
    if R1.shape != R2.shape:
        raise DimMismatch(f"image sizes differ: {R1.shape} vs {R2.shape}")
    if R1.sum() <= 0 or R2.sum() <= 0:
        raise ZeroMass("both images need positive mass")
    pitch = getattr(img1, "pitch", 1.0)
    d0 = wasserstein_1d(R1.sum(axis=1), R2.sum(axis=1))
    d1 = wasserstein_1d(R1.sum(axis=0), R2.sum(axis=0))
    return 0.5 * (d0 + d1) * pitch


# --------------------------------------------------------------------------
# report output
# --------------------------------------------------------------------------

def write_report_csv(reports: dict, path):
    keys = list(OcclusionReport.__dataclass_fields__)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["treatment"] + keys)
        for name, r in reports.items():
            row = [name]
            for k in keys:
                v = getattr(r, k)
                row.append("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v))
            w.writerow(row)


def format_table(reports: dict, decimals=2):
    """Text table with one thrombus column per treatment, device columns and sum rows."""
    names = list(reports)
    cols = [(n, "thrombus") for n in names]
    cols += [(n, "device") for n in names if reports[n].device_volume > 0]
    head = [""] + [n if kind == "thrombus" else f"{n} device" for n, kind in cols]
    vol = ["Thrombus volume"]
    pct = ["Percentage occlusion"]
    for n, kind in cols:
        r = reports[n]
        v, p = (r.thrombus_volume, r.pct_thrombus) if kind == "thrombus" else (r.device_volume, r.pct_device)
        vol.append(f"{v:.{decimals}f} mm^3")
        pct.append(f"{p:.{decimals}f} %")
    an = {f"{r.aneurysm_volume:.{decimals}f}" for r in reports.values()}
    rows = [head, vol, ["Aneurysm volume"] + [" / ".join(sorted(an)) + " mm^3"] + [""] * (len(cols) - 1), pct]
    for n in names:
        r = reports[n]
        if r.device_volume > 0:
            rows.append([f"Sum {n}"] + [""] * (len(cols) - 1) + [f"{r.pct_total:.{decimals}f} %"])
    width = [max(len(row[i]) for row in rows) for i in range(len(head))]
    out = io.StringIO()
    sep = "+" + "+".join("-" * (w + 2) for w in width) + "+"
    out.write(sep + "\n")
    for k, row in enumerate(rows):
        out.write("| " + " | ".join(c.ljust(w) for c, w in zip(row, width)) + " |\n")
        if k == 0:
            out.write(sep + "\n")
    out.write(sep + "\n")
    return out.getvalue()
