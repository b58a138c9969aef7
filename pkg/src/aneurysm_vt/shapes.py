"""Idealized vessel geometries and small analytic meshes used by tests and demos.

Vessels run along +x; the parent tube axis is the x axis and side sacs sit on +y.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PreconditionError
from .geometry import (CellClass, Disk, OstiumSpec, SurfaceMesh, VoxelGrid, classify,
                       exterior_neighbours, tag_sac)


@dataclass
class Vessel:
    """Implicit description of an idealized vessel."""

    kind: str
    tube_radius: float
    length: float
    sac_radius: float = 0.0
    neck_radius: float = 0.0

    @property
    def inlet(self):
        return Disk([0.0, 0.0, 0.0], [-1.0, 0.0, 0.0], self.tube_radius)

    @property
    def outlet(self):
        return Disk([self.length, 0.0, 0.0], [1.0, 0.0, 0.0], self.tube_radius)

    @property
    def sac_center(self):
        if self.kind == "side-sac":
            return np.array([self.length / 2, self.tube_radius, 0.0])
        if self.kind == "narrow-neck":
            # sphere floats above the tube, joined by a short neck
            return np.array([self.length / 2, self.tube_radius + 0.8 * self.sac_radius, 0.0])
        return None

    @property
    def ostium(self):
        if self.kind == "tube":
            return None
        r = self.sac_radius if self.kind == "side-sac" else self.neck_radius
        return OstiumSpec([self.length / 2, self.tube_radius, 0.0], [0.0, 1.0, 0.0], r)

    def inside(self, p):
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        m = (x > 0) & (x < self.length) & (y ** 2 + z ** 2 < self.tube_radius ** 2)
        c = self.sac_center
        if c is not None:
            m |= np.sum((p - c) ** 2, axis=-1) < self.sac_radius ** 2
        if self.kind == "narrow-neck":
            rx = x - self.length / 2
            m |= (rx ** 2 + z ** 2 < self.neck_radius ** 2) & (y > 0) & (y < c[1])
        return m

    def bounds(self):
        top = self.tube_radius
        if self.sac_center is not None:
            top = self.sac_center[1] + self.sac_radius
        return (np.array([0.0, -self.tube_radius, -max(self.tube_radius, self.sac_radius)]),
                np.array([self.length, top, max(self.tube_radius, self.sac_radius)]))


def build_grid(vessel: Vessel, h) -> VoxelGrid:
    """Sample the vessel on cell centres and classify; the sac is tagged when present."""
    lo, hi = vessel.bounds()
    # the x extent is cut exactly at the inlet/outlet planes
    origin = np.array([lo[0] - h, lo[1] - h, lo[2] - h])
    dims = (int(round(vessel.length / h)) + 2,
            int(np.ceil((hi[1] - lo[1]) / h - 1e-9)) + 2,
            int(np.ceil((hi[2] - lo[2]) / h - 1e-9)) + 2)
    tmp = VoxelGrid(origin, h, np.zeros(dims, np.uint8))
    inside = vessel.inside(tmp.cell_centers())
    grid = classify(inside, origin, h, vessel.inlet, vessel.outlet)
    if vessel.ostium is not None:
        grid = tag_sac(grid, vessel.ostium)
    return grid


def straight_tube(radius=2.0, length=20.0):
    return Vessel("tube", radius, length)


def side_sac(tube_radius=2.0, length=20.0, sac_radius=3.0):
    """Tube with a hemispherical bump centred on the tube wall."""
    return Vessel("side-sac", tube_radius, length, sac_radius=sac_radius)


def narrow_neck_sac(tube_radius=2.0, length=20.0, sac_radius=3.0, neck_radius=1.2):
    return Vessel("narrow-neck", tube_radius, length, sac_radius=sac_radius, neck_radius=neck_radius)


def channel_grid(nx, ny, h, nz=1, inlet=True):
    """Straight rectangular channel along x, ``ny`` cells high and ``nz`` deep.

    With ``nz=1`` and free-slip z walls this behaves as a 2-D channel.
    """
    dims = (nx + 2, ny + 2, nz + 2)
    inside = np.zeros(dims, bool)
    inside[1:-1, 1:-1, 1:-1] = True
    origin = np.array([-h, -h, -h])
    half = max(ny, nz) * h
    ctr = np.array([0.0, ny * h / 2, nz * h / 2])
    inl = Disk(ctr, [-1, 0, 0], half) if inlet else None
    out = Disk(ctr + [nx * h, 0, 0], [1, 0, 0], half) if inlet else None
    if not inlet:
        return classify(inside, origin, h, None, None, check_connectivity=False)
    # thin channels (nz=1) would trip the three-cells-across check on z
    ext = exterior_neighbours(inside)
    cc = np.where(inside, CellClass.FLUID, CellClass.EXTERIOR).astype(np.uint8)
    for m in ext.values():
        cc[m] = CellClass.WALL
    cc[ext[(0, -1)]] = CellClass.INLET
    cc[ext[(0, 1)]] = CellClass.OUTLET
    return VoxelGrid(origin, h, cc, inlet=inl, outlet=out)


def box_grid(n, h, periodic=(False, False, False)):
    """Closed box of n = (nx, ny, nz) interior cells with no inlet or outlet."""
    n = tuple(n)
    dims = tuple(k if p else k + 2 for k, p in zip(n, periodic))
    inside = np.zeros(dims, bool)
    sl = tuple(slice(None) if p else slice(1, -1) for p in periodic)
    inside[sl] = True
    origin = np.array([0.0 if p else -h for p in periodic])
    return classify(inside, origin, h, None, None, periodic=periodic, check_connectivity=False)


# --------------------------------------------------------------------------
# analytic meshes
# --------------------------------------------------------------------------

def cube_mesh(size=1.0, origin=(0.0, 0.0, 0.0)):
    o = np.asarray(origin, float)
    v = np.array([[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)], float) * size + o
    f = np.array([
        [0, 2, 1], [1, 2, 3],  # z=0
        [4, 5, 6], [5, 7, 6],  # z=1
        [0, 1, 4], [1, 5, 4],  # y=0
        [2, 6, 3], [3, 6, 7],  # y=1
        [0, 4, 2], [2, 4, 6],  # x=0
        [1, 3, 5], [3, 7, 5],  # x=1
    ])
    return SurfaceMesh(v, f)


def icosphere(radius=1.0, subdivisions=3, center=(0.0, 0.0, 0.0)):
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, float) / np.linalg.norm(p) for p in v]
    faces = f
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    return SurfaceMesh(np.array(verts) * radius + np.asarray(center, float), np.array(faces))


def capped_tube_mesh(centerline, radius, segments=16):
    """Closed tube of given radius swept along a polyline, with flat end caps.

    Ring frames are propagated by parallel transport so the tube does not twist.
    """
    c = np.asarray(centerline, float)
    if len(c) < 2 or np.any(np.linalg.norm(np.diff(c, axis=0), axis=1) == 0):
        raise PreconditionError("centerline needs at least two distinct consecutive points")
    e = np.diff(c, axis=0)
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    tang = np.empty_like(c)
    tang[0], tang[-1] = e[0], e[-1]
    if len(c) > 2:
        s = e[:-1] + e[1:]
        n = np.linalg.norm(s, axis=1, keepdims=True)
        tang[1:-1] = np.where(n > 1e-12, s / np.maximum(n, 1e-300), e[1:])
    a = np.cross(tang[0], [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(tang[0], [0.0, 1.0, 0.0])
    u = [a / np.linalg.norm(a)]
    for k in range(1, len(c)):
        prev = u[-1]
        v = prev - (prev @ tang[k]) * tang[k]
        u.append(v / np.linalg.norm(v))
    theta = 2 * np.pi * np.arange(segments) / segments
    rings = []
    for k in range(len(c)):
        w = np.cross(tang[k], u[k])
        ring = c[k] + radius * (np.cos(theta)[:, None] * u[k] + np.sin(theta)[:, None] * w)
        rings.append(ring)
    verts = np.concatenate(rings + [c[:1], c[-1:]])
    faces = []
    m = segments
    for k in range(len(c) - 1):
        for j in range(m):
            a, b = k * m + j, k * m + (j + 1) % m
            a2, b2 = a + m, b + m
            faces += [[a, b, b2], [a, b2, a2]]
    s0, s1 = len(c) * m, len(c) * m + 1
    last = (len(c) - 1) * m
    for j in range(m):
        faces.append([s0, (j + 1) % m, j])
        faces.append([s1, last + j, last + (j + 1) % m])
    mesh = SurfaceMesh(verts, np.array(faces))
    if mesh.signed_volume() < 0:
        mesh.faces = mesh.faces[:, ::-1].copy()
    return mesh


def disk_mesh(center, normal, radius, segments=32, rings=4):
    """Flat triangulated disk, e.g. a flow-diverter patch over an ostium."""
    c = np.asarray(center, float)
    n = np.asarray(normal, float)
    n = n / np.linalg.norm(n)
    a = np.cross(n, [1.0, 0.0, 0.0])
    if np.linalg.norm(a) < 1e-6:
        a = np.cross(n, [0.0, 1.0, 0.0])
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    th = 2 * np.pi * np.arange(segments) / segments
    verts = [c]
    for k in range(1, rings + 1):
        r = radius * k / rings
        verts += list(c + r * (np.cos(th)[:, None] * a + np.sin(th)[:, None] * b))
    faces = [[0, 1 + j, 1 + (j + 1) % segments] for j in range(segments)]
    for k in range(1, rings):
        i0, i1 = 1 + (k - 1) * segments, 1 + k * segments
        for j in range(segments):
            j1 = (j + 1) % segments
            faces += [[i0 + j, i1 + j, i1 + j1], [i0 + j, i1 + j1, i0 + j1]]
    return SurfaceMesh(np.array(verts), np.array(faces))
