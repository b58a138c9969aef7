"""Surface meshes, voxelization onto a uniform staircase grid, and sac tagging.

All lengths are millimetres.  The voxel grid always carries at least one layer
of Exterior cells around the domain so that every stencil has a neighbour.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (DisconnectedDomain, EmptySac, InvertedOrientation,
                     NotWatertight, ParseError, PreconditionError,
                     ResolutionTooCoarse)


class CellClass(enum.IntEnum):
    EXTERIOR = 0
    FLUID = 1
    WALL = 2
    INLET = 3
    OUTLET = 4
    DEVICE = 5


# 6-neighbour offsets as (axis, side)
DIRECTIONS = [(a, s) for a in range(3) for s in (-1, 1)]


def _unit(v):
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0:
        raise PreconditionError("zero-length direction vector")
    return v / n


@dataclass(frozen=True)
class Disk:
    """Oriented disk; ``normal`` points out of the fluid domain."""

    center: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        object.__setattr__(self, "normal", _unit(self.normal))


@dataclass(frozen=True)
class OstiumSpec:
    """Plane separating sac and parent vessel; ``normal`` points into the dome."""

    point: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "point", np.asarray(self.point, dtype=float))
        object.__setattr__(self, "normal", _unit(self.normal))


# --------------------------------------------------------------------------
# surface meshes
# --------------------------------------------------------------------------

@dataclass
class SurfaceMesh:
    vertices: np.ndarray
    faces: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)

    def triangles(self):
        return self.vertices[self.faces]

    def face_areas(self):
        t = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0]), axis=1)

    def area(self):
        return float(self.face_areas().sum())

    def signed_volume(self):
        t = self.triangles()
        return float(np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0)

    def boundary_edges(self):
        """Undirected edges not shared by exactly two faces."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        und = np.sort(e, axis=1)
        uniq, counts = np.unique(und, axis=0, return_counts=True)
        return uniq[counts != 2]

    def is_consistently_oriented(self):
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        _, counts = np.unique(e, axis=0, return_counts=True)
        return bool(np.all(counts == 1))

    def validate(self):
        if len(self.faces) == 0:
            raise NotWatertight("mesh has no faces")
        if np.any(self.face_areas() <= 0):
            raise ParseError("degenerate face with zero area")
        if len(self.boundary_edges()):
            raise NotWatertight(f"{len(self.boundary_edges())} edges are not shared by exactly two faces")
        if not self.is_consistently_oriented():
            raise InvertedOrientation("faces are not consistently oriented")
        if self.signed_volume() <= 0:
            raise InvertedOrientation("signed volume is not positive (inward normals)")
        return self


def _merge_vertices(tri):
    """Weld a (F, 3, 3) triangle soup into an indexed mesh."""
    pts = tri.reshape(-1, 3)
    uniq, inverse = np.unique(pts, axis=0, return_inverse=True)
    return uniq, inverse.reshape(-1, 3)


def _read_stl(data: bytes):
    head = data[:5].lower()
    if head == b"solid" and b"facet" in data[:1024]:
        try:
            return _read_stl_ascii(data.decode("ascii"))
        except UnicodeDecodeError:
            pass
    if len(data) < 84:
        raise ParseError("truncated binary STL header")
    (count,) = struct.unpack("<I", data[80:84])
    if len(data) < 84 + 50 * count:
        raise ParseError(f"binary STL declares {count} facets but file is too short")
    rec = np.dtype([("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    arr = np.frombuffer(data, dtype=rec, count=count, offset=84)
    return arr["v"].astype(float)


def _read_stl_ascii(text: str):
    verts = []
    for line in text.splitlines():
        tok = line.split()
        if tok and tok[0] == "vertex":
            if len(tok) != 4:
                raise ParseError(f"bad vertex line: {line!r}")
            try:
                verts.append([float(x) for x in tok[1:]])
            except ValueError as exc:
                raise ParseError(f"bad vertex line: {line!r}") from exc
    if not verts or len(verts) % 3:
        raise ParseError("ASCII STL vertex count is not a multiple of three")
    return np.array(verts).reshape(-1, 3, 3)


def _read_obj(text: str):
    verts, faces = [], []
    for line in text.splitlines():
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) for t in tok[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
        except (ValueError, IndexError) as exc:
            raise ParseError(f"bad OBJ record: {line!r}") from exc
    if not faces:
        raise ParseError("OBJ file contains no faces")
    faces = np.array(faces)
    if faces.max() >= len(verts) or faces.min() < 0:
        raise ParseError("OBJ face index out of range")
    return np.array(verts, dtype=float), faces


def load_surface(path, format=None) -> SurfaceMesh:
    """Read an STL (binary or ASCII) or OBJ surface and check it is a closed, outward-oriented shell."""
    path = Path(path)
    data = path.read_bytes()
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt in ("stl", "stl-binary", "stl-ascii"):
        verts, faces = _merge_vertices(_read_stl(data))
    elif fmt == "obj":
        verts, faces = _read_obj(data.decode("utf-8", errors="replace"))
    else:
        raise ParseError(f"unsupported surface format {fmt!r}")
    return SurfaceMesh(verts, faces).validate()


def write_stl(mesh: SurfaceMesh, path, ascii=False):
    tri = mesh.triangles()
    normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    nrm = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.divide(normals, nrm, out=np.zeros_like(normals), where=nrm > 0)
    path = Path(path)
    if ascii:
        lines = ["solid mesh"]
        for n, t in zip(normals, tri):
            lines.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
            lines.append("    outer loop")
            for v in t:
                lines.append(f"      vertex {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append("endsolid mesh")
        path.write_text("\n".join(lines) + "\n")
        return path
    rec = np.zeros(len(tri), dtype=[("n", "<f4", 3), ("v", "<f4", (3, 3)), ("attr", "<u2")])
    rec["n"] = normals
    rec["v"] = tri
    with open(path, "wb") as fh:
        fh.write(b"binary STL".ljust(80, b" "))
        fh.write(struct.pack("<I", len(tri)))
        fh.write(rec.tobytes())
    return path


def write_obj(mesh: SurfaceMesh, path):
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_polyline_obj(points, path):
    """Centerline export: OBJ ``v`` records plus one ``l`` record."""
    lines = [f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}" for p in np.asarray(points)]
    lines.append("l " + " ".join(str(i + 1) for i in range(len(points))))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


# --------------------------------------------------------------------------
# voxel grid
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelGrid:
    origin: np.ndarray
    h: float
    cell_class: np.ndarray
    inlet: Disk | None = None
    outlet: Disk | None = None
    sac_mask: np.ndarray | None = None
    dome_wall_mask: np.ndarray | None = None
    ostium: OstiumSpec | None = None
    periodic: tuple = (False, False, False)
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))
        cc = np.asarray(self.cell_class, dtype=np.uint8)
        cc.setflags(write=False)
        object.__setattr__(self, "cell_class", cc)
        if self.sac_mask is None:
            object.__setattr__(self, "sac_mask", np.zeros(cc.shape, bool))
        if self.dome_wall_mask is None:
            object.__setattr__(self, "dome_wall_mask", np.zeros(cc.shape, bool))
        if self.h <= 0:
            raise PreconditionError("grid spacing must be positive")

    @property
    def dims(self):
        return self.cell_class.shape

    @property
    def interior(self):
        return self.cell_class != CellClass.EXTERIOR

    @property
    def cell_volume(self):
        return self.h ** 3

    def n_fluid(self):
        return int(self.interior.sum())

    def centers(self, axis):
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.h

    def cell_centers(self):
        """(nx, ny, nz, 3) array of cell-centre coordinates."""
        x, y, z = np.meshgrid(self.centers(0), self.centers(1), self.centers(2), indexing="ij")
        return np.stack([x, y, z], axis=-1)

    def index_of(self, point):
        return tuple(np.floor((np.asarray(point) - self.origin) / self.h).astype(int))

    def with_devices(self, device_mask):
        cc = self.cell_class.copy()
        cc[np.asarray(device_mask) & self.interior] = CellClass.DEVICE
        return replace(self, cell_class=cc)


def _in_disk(centers, disk: Disk, h):
    rel = centers - disk.center
    axial = rel @ disk.normal
    radial = np.linalg.norm(rel - axial[..., None] * disk.normal, axis=-1)
    return (np.abs(axial) <= h) & (radial <= disk.radius + 1e-12)


def exterior_neighbours(interior, periodic=(False, False, False)):
    """dict (axis, side) -> bool mask of interior cells whose neighbour that way is exterior."""
    out = {}
    for axis, side in DIRECTIONS:
        if periodic[axis]:
            nb = np.roll(interior, -side, axis=axis)
        else:
            pad = [(0, 0)] * 3
            pad[axis] = (1, 1)
            p = np.pad(interior, pad, constant_values=False)
            sl = [slice(None)] * 3
            sl[axis] = slice(1 + side, 1 + side + interior.shape[axis])
            nb = p[tuple(sl)]
        out[(axis, side)] = interior & ~nb
    return out


def classify(inside, origin, h, inlet: Disk | None, outlet: Disk | None,
             periodic=(False, False, False), check_connectivity=True) -> VoxelGrid:
    """Turn an inside/outside cell mask into a classified grid.

    Interior cells touching exterior become Wall, or Inlet/Outlet when they lie in
    the corresponding disk.  Interior components not connected to the inlet are dropped.
    """
    inside = np.asarray(inside, bool).copy()
    origin = np.asarray(origin, float)
    for d in (inlet, outlet):
        if d is not None and 2 * d.radius / h < 3:
            raise ResolutionTooCoarse(
                f"disk of radius {d.radius} mm spans {2 * d.radius / h:.2f} cells (< 3) at h={h}")
    tmp = VoxelGrid(origin, h, inside.astype(np.uint8), periodic=periodic)
    centers = tmp.cell_centers()

    if check_connectivity and inlet is not None:
        labels, _ = ndimage.label(inside)
        seed = labels[_in_disk(centers, inlet, h) & inside]
        seed = np.unique(seed[seed > 0])
        if len(seed) == 0:
            raise DisconnectedDomain("inlet disk does not touch the fluid domain")
        keep = np.isin(labels, seed)
        if outlet is not None:
            out_lab = labels[_in_disk(centers, outlet, h) & inside]
            if not np.any(np.isin(out_lab, seed)):
                raise DisconnectedDomain("no fluid path from inlet to outlet")
        inside &= keep

    if not inside.any():
        raise ResolutionTooCoarse("no cell centre lies inside the domain")

    ext = exterior_neighbours(inside, periodic)
    boundary = np.zeros_like(inside)
    for m in ext.values():
        boundary |= m
    cc = np.where(inside, CellClass.FLUID, CellClass.EXTERIOR).astype(np.uint8)
    cc[boundary] = CellClass.WALL
    for disk, label in ((inlet, CellClass.INLET), (outlet, CellClass.OUTLET)):
        if disk is None:
            continue
        facing = np.zeros_like(inside)
        for (axis, side), m in ext.items():
            if side * disk.normal[axis] >= 0.5:
                facing |= m
        cc[facing & _in_disk(centers, disk, h)] = label
    return VoxelGrid(origin, h, cc, inlet=inlet, outlet=outlet, periodic=periodic)


def _ray_parity(tri, origin, h, dims, axis, jitter):
    """Inside mask from crossings of rays cast along ``axis`` through cell centres."""
    b, c = [a for a in range(3) if a != axis]
    counts = np.zeros(tuple(dims[a] + (1 if a == axis else 0) for a in range(3)), dtype=np.int32)
    P = tri[:, :, [b, c]]
    Z = tri[:, :, axis]
    ob = origin[b] + 0.5 * h + jitter[0]
    oc = origin[c] + 0.5 * h + jitter[1]
    lo = np.ceil((P.min(axis=1) - [ob, oc]) / h).astype(int)
    hi = np.floor((P.max(axis=1) - [ob, oc]) / h).astype(int)
    lo = np.maximum(lo, 0)
    hi = np.minimum(hi, [dims[b] - 1, dims[c] - 1])
    for f in np.nonzero(np.all(hi >= lo, axis=1))[0]:
        ib = np.arange(lo[f, 0], hi[f, 0] + 1)
        ic = np.arange(lo[f, 1], hi[f, 1] + 1)
        gb, gc = np.meshgrid(ob + ib * h, oc + ic * h, indexing="ij")
        (x0, y0), (x1, y1), (x2, y2) = P[f]
        det = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if det == 0:
            continue
        l0 = ((y1 - y2) * (gb - x2) + (x2 - x1) * (gc - y2)) / det
        l1 = ((y2 - y0) * (gb - x2) + (x0 - x2) * (gc - y2)) / det
        l2 = 1.0 - l0 - l1
        hit = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        if not hit.any():
            continue
        zint = l0 * Z[f, 0] + l1 * Z[f, 1] + l2 * Z[f, 2]
        k = np.floor((zint - origin[axis]) / h - 0.5).astype(int) + 1
        k = np.clip(k, 0, dims[axis])
        bi, ci = np.nonzero(hit)
        idx = [None, None, None]
        idx[b] = ib[bi]
        idx[c] = ic[ci]
        idx[axis] = k[bi, ci]
        np.add.at(counts, tuple(idx), 1)
    parity = np.cumsum(counts, axis=axis) % 2
    sl = [slice(None)] * 3
    sl[axis] = slice(0, dims[axis])
    return parity[tuple(sl)].astype(bool)


def inside_mesh(mesh: SurfaceMesh, origin, h, dims):
    """Majority vote of ray parity along the three axes."""
    tri = mesh.triangles()
    # irrational sub-cell jitter keeps rays off shared mesh edges
    jit = h * 1e-6 * np.array([np.sqrt(2.0), np.sqrt(3.0), np.sqrt(5.0)])
    votes = sum(
        _ray_parity(tri, np.asarray(origin, float), h, dims, a,
                    (jit[(a + 1) % 3], jit[(a + 2) % 3])).astype(int)
        for a in range(3))
    return votes >= 2


def voxelize(mesh: SurfaceMesh, h, inlet: Disk | None = None, outlet: Disk | None = None) -> VoxelGrid:
    """Voxelize a closed surface mesh onto a grid of spacing ``h`` with a one-cell exterior margin."""
    if h <= 0:
        raise PreconditionError("h must be positive")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    origin = lo - h
    dims = tuple(int(np.ceil((hi[a] - lo[a]) / h - 1e-9)) + 2 for a in range(3))
    for d in (inlet, outlet):
        if d is not None and 2 * d.radius / h < 3:
            raise ResolutionTooCoarse(
                f"disk of radius {d.radius} mm spans {2 * d.radius / h:.2f} cells (< 3) at h={h}")
    inside = inside_mesh(mesh, origin, h, dims)
    return classify(inside, origin, h, inlet, outlet)


def tag_sac(grid: VoxelGrid, ostium: OstiumSpec) -> VoxelGrid:
    """Mark the cells on the dome side of the ostium plane that connect to the ostium disk.

    A flipped normal selects the parent-vessel side instead; that is the caller's choice.
    """
    centers = grid.cell_centers()
    rel = centers - ostium.point
    signed = rel @ ostium.normal
    radial = np.linalg.norm(rel - signed[..., None] * ostium.normal, axis=-1)
    candidate = grid.interior & (signed > 0)
    seed = candidate & (signed <= grid.h) & (radial <= ostium.radius)
    labels, _ = ndimage.label(candidate)
    keep = np.unique(labels[seed])
    keep = keep[keep > 0]
    sac = np.isin(labels, keep) & candidate
    if not sac.any():
        raise EmptySac("no cell lies on the dome side of the ostium plane")
    dome_wall = sac & (grid.cell_class == CellClass.WALL)
    return replace(grid, sac_mask=sac, dome_wall_mask=dome_wall, ostium=ostium)
