"""Grid-level device effects: coil blockage, porous flow-diverter shells, thrombogenic tags."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CoilOutsideGrid, PreconditionError
from .geometry import SurfaceMesh, VoxelGrid

DEFAULT_SHELL_RESISTANCE = 1e6   # 1/mm^2


@dataclass(frozen=True)
class DeviceField:
    device_mask: np.ndarray
    shell_resistance: np.ndarray
    thrombogenic_mask: np.ndarray

    def __post_init__(self):
        shapes = {np.shape(self.device_mask), np.shape(self.shell_resistance), np.shape(self.thrombogenic_mask)}
        if len(shapes) != 1:
            raise PreconditionError("device arrays must share one grid shape")
        if np.any(np.asarray(self.shell_resistance) < 0):
            raise PreconditionError("shell resistance must be non-negative")

    @classmethod
    def empty(cls, grid: VoxelGrid):
        z = np.zeros(grid.dims, bool)
        return cls(z, np.zeros(grid.dims), z.copy())

    def combine(self, other: "DeviceField") -> "DeviceField":
        return DeviceField(self.device_mask | other.device_mask,
                           self.shell_resistance + other.shell_resistance,
                           self.thrombogenic_mask | other.thrombogenic_mask)

    def flow_resistance(self, solid_inv_alpha=None):
        """Extra inverse permeability per cell (1/mm^2, flat): solid coil cells plus shells."""
        if solid_inv_alpha is None:
            from .coagulation import KineticParams
            solid_inv_alpha = KineticParams().clot_inv_alpha
        out = self.shell_resistance.astype(float).ravel().copy()
        out[self.device_mask.ravel()] += solid_inv_alpha
        return out

    @property
    def device_volume_cells(self):
        return int(np.count_nonzero(self.device_mask))


def _check_inside(grid: VoxelGrid, pts, what, exc):
    lo = grid.origin
    hi = grid.origin + np.asarray(grid.dims) * grid.h
    if np.any(pts < lo - 1e-12) or np.any(pts > hi + 1e-12):
        raise exc(f"{what} leaves the grid bounding box")


def _box(grid, lo, hi):
    """Index slices of the cells whose centres may lie in the box [lo, hi]."""
    a = np.floor((lo - grid.origin) / grid.h - 0.5).astype(int)
    b = np.ceil((hi - grid.origin) / grid.h - 0.5).astype(int) + 1
    a = np.clip(a, 0, grid.dims)
    b = np.clip(b, 0, grid.dims)
    return tuple(slice(i, j) for i, j in zip(a, b))


def _centres(grid, sl):
    ax = [grid.origin[d] + (np.arange(sl[d].start, sl[d].stop) + 0.5) * grid.h for d in range(3)]
    return np.stack(np.meshgrid(*ax, indexing="ij"), axis=-1)


def _segment_distance(p, a, b, open_lo=False, open_hi=False):
    """Distance to segment ab; an open end returns inf beyond it (flat tube cap)."""
    ab = b - a
    L2 = ab @ ab
    t = np.zeros(p.shape[:-1]) if L2 == 0 else (p - a) @ ab / L2
    d = np.linalg.norm(p - (a + np.clip(t, 0.0, 1.0)[..., None] * ab), axis=-1)
    if open_lo:
        d = np.where(t < 0, np.inf, d)
    if open_hi:
        d = np.where(t > 1, np.inf, d)
    return d


def rasterize_coil(grid: VoxelGrid, s) -> DeviceField:
    """Mark interior cells whose centre lies within D2/2 of the released centerline.

    The tube has flat end caps so its volume tends to L*pi*D2^2/4.
    """
    field = DeviceField.empty(grid)
    x = np.asarray(s.x, float)[:s.released_count]
    if len(x) < 2:
        return field
    _check_inside(grid, x, "coil", CoilOutsideGrid)
    r = 0.5 * s.radii[1]
    dist = np.full(grid.dims, np.inf)
    last = len(x) - 2
    for i, (a, b) in enumerate(zip(x[:-1], x[1:])):
        sl = _box(grid, np.minimum(a, b) - r, np.maximum(a, b) + r)
        if any(t.stop <= t.start for t in sl):
            continue
        d = _segment_distance(_centres(grid, sl), a, b, i == 0, i == last)
        dist[sl] = np.minimum(dist[sl], d)
    mask = (dist <= r) & grid.interior
    return replace(field, device_mask=mask)


def _triangle_distance(p, a, b, c):
    """Unsigned distance from points p (..., 3) to triangle abc (region-based closest point)."""
    ab, ac = b - a, c - a
    ap = p - a
    d1, d2 = ap @ ab, ap @ ac
    bp = p - b
    d3, d4 = bp @ ab, bp @ ac
    cp = p - c
    d5, d6 = cp @ ab, cp @ ac
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        q = a + v[..., None] * ab + w[..., None] * ac
    # outside the face region the closest point sits on an edge
    inside = (va >= 0) & (vb >= 0) & (vc >= 0) & (denom != 0)
    out = np.linalg.norm(p - q, axis=-1)
    edge = np.minimum(np.minimum(_segment_distance(p, a, b), _segment_distance(p, a, c)),
                      _segment_distance(p, b, c))
    return np.where(inside, out, edge)


def fd_shell(grid: VoxelGrid, fd_surface: SurfaceMesh, resistance=DEFAULT_SHELL_RESISTANCE,
             thickness=None) -> DeviceField:
    """Porous layer of the given resistance on interior cells near the surface.

    At least one cell layer is always tagged: the capture radius never drops below h/2.
    """
    if resistance < 0:
        raise PreconditionError("shell resistance must be non-negative")
    field = DeviceField.empty(grid)
    if resistance == 0:
        return field
    thickness = max(grid.h, 0.1) if thickness is None else float(thickness)
    reach = max(0.5 * thickness, 0.5 * grid.h) * (1 + 1e-9)
    dist = np.full(grid.dims, np.inf)
    for a, b, c in fd_surface.triangles():
        lo = np.minimum(np.minimum(a, b), c) - reach
        hi = np.maximum(np.maximum(a, b), c) + reach
        sl = _box(grid, lo, hi)
        if any(t.stop <= t.start for t in sl):
            continue
        dist[sl] = np.minimum(dist[sl], _triangle_distance(_centres(grid, sl), a, b, c))
    mask = (dist <= reach) & grid.interior
    return replace(field, shell_resistance=np.where(mask, float(resistance), 0.0))


def coil_surface_cells(grid: VoxelGrid, device_mask):
    """Device cells with at least one face neighbour that is a non-device interior cell."""
    dev = np.asarray(device_mask, bool)
    free = grid.interior & ~dev
    pad = np.pad(free, 1)
    touch = np.zeros_like(dev)
    n = dev.shape
    for d in range(3):
        for s in (-1, 1):
            sl = [slice(1, k + 1) for k in n]
            sl[d] = slice(1 + s, n[d] + 1 + s)
            touch |= pad[tuple(sl)]
    return dev & touch


def tag_thrombogenic(grid: VoxelGrid, devices: DeviceField | None, mode="dome-only") -> DeviceField:
    if devices is None:
        devices = DeviceField.empty(grid)
    base = np.asarray(grid.dome_wall_mask, bool).copy()
    if mode == "dome-only":
        mask = base
    elif mode == "dome-plus-coil":
        mask = base | coil_surface_cells(grid, devices.device_mask)
    else:
        raise PreconditionError(f"unknown thrombogenic mode {mode!r}")
    return replace(devices, thrombogenic_mask=mask)
