"""Staggered (MAC) grid topology shared by the flow, species and tracer solvers.

Cells are flattened in C order over the full grid (exterior included); faces of
axis ``d`` live on an array with one extra entry along ``d`` unless that axis is
periodic.  Face ``i`` along ``d`` separates cells ``i-1`` and ``i``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .geometry import CellClass, VoxelGrid

NONE, OPEN, WALL, INFLOW, OUTFLOW = range(5)

_WALL_MODES = {"free-slip": 1.0, "no-slip": -1.0}


def wall_modes(wall_bc):
    """Normalize a wall BC setting to a per-axis tuple (axis = wall normal direction)."""
    if isinstance(wall_bc, str):
        wall_bc = (wall_bc,) * 3
    wall_bc = tuple(wall_bc)
    for m in wall_bc:
        if m not in _WALL_MODES:
            raise ValueError(f"unknown wall condition {m!r}")
    return wall_bc


class Topology:
    def __init__(self, grid: VoxelGrid, wall_bc="free-slip"):
        self.grid = grid
        self.h = grid.h
        self.shape = grid.dims
        self.periodic = tuple(grid.periodic)
        self.wall_bc = wall_modes(wall_bc)
        self.interior = grid.interior
        self.ncell = int(np.prod(self.shape))
        self.cells = np.flatnonzero(self.interior.ravel())
        self.cell_id = np.full(self.ncell, -1, dtype=np.int64)
        self.cell_id[self.cells] = np.arange(len(self.cells))
        cls = grid.cell_class

        self.face_shape = []
        self.lo = []      # flat cell index below each face (-1 outside the array)
        self.hi = []
        self.kind = []
        self.sign = []    # +1 if the interior cell of a boundary face is on the hi side
        for d in range(3):
            n = self.shape[d]
            fshape = list(self.shape)
            if not self.periodic[d]:
                fshape[d] = n + 1
            fshape = tuple(fshape)
            idx = np.indices(fshape)
            lo_idx = idx.copy()
            lo_idx[d] = idx[d] - 1
            hi_idx = idx.copy()
            if self.periodic[d]:
                lo_idx[d] %= n
                valid_lo = np.ones(fshape, bool)
                valid_hi = np.ones(fshape, bool)
            else:
                valid_lo = lo_idx[d] >= 0
                valid_hi = hi_idx[d] < n
                lo_idx[d] = np.clip(lo_idx[d], 0, n - 1)
                hi_idx[d] = np.clip(hi_idx[d], 0, n - 1)
            lo_flat = np.ravel_multi_index(tuple(lo_idx), self.shape)
            hi_flat = np.ravel_multi_index(tuple(hi_idx), self.shape)
            lo_flat = np.where(valid_lo, lo_flat, -1).ravel()
            hi_flat = np.where(valid_hi, hi_flat, -1).ravel()
            intr = self.interior.ravel()
            lo_in = (lo_flat >= 0) & intr[np.maximum(lo_flat, 0)]
            hi_in = (hi_flat >= 0) & intr[np.maximum(hi_flat, 0)]
            kind = np.full(lo_flat.shape, NONE, np.uint8)
            kind[lo_in & hi_in] = OPEN
            bnd = lo_in ^ hi_in
            kind[bnd] = WALL
            inner = np.where(lo_in, lo_flat, hi_flat)
            side = np.where(lo_in, 1.0, -1.0)  # direction from interior cell to exterior
            ccls = cls.ravel()[np.maximum(inner, 0)]
            for disk, label, k in ((grid.inlet, CellClass.INLET, INFLOW),
                                   (grid.outlet, CellClass.OUTLET, OUTFLOW)):
                if disk is None:
                    continue
                m = bnd & (ccls == label) & (side * disk.normal[d] >= 0.5)
                kind[m] = k
            self.face_shape.append(fshape)
            self.lo.append(lo_flat)
            self.hi.append(hi_flat)
            self.kind.append(kind)
            self.sign.append(np.where(hi_in & ~lo_in, 1.0, -1.0))
        self.open = [np.flatnonzero(k == OPEN) for k in self.kind]
        self._cell_faces = self._build_cell_faces()
        self._stencils = None

    # ------------------------------------------------------------------
    def _build_cell_faces(self):
        """Flat face index of the lower/upper face of every cell along each axis."""
        out = []
        idx = np.indices(self.shape)
        for d in range(3):
            lower = np.ravel_multi_index(tuple(idx), self.face_shape[d]).ravel()
            up = idx.copy()
            up[d] = idx[d] + 1
            if self.periodic[d]:
                up[d] %= self.shape[d]
            upper = np.ravel_multi_index(tuple(up), self.face_shape[d]).ravel()
            out.append((lower, upper))
        return out

    def cell_faces(self, d):
        return self._cell_faces[d]

    def nfaces(self, d):
        return int(np.prod(self.face_shape[d]))

    def boundary_faces(self, d, kind):
        return np.flatnonzero(self.kind[d] == kind)

    def interior_cell_of_face(self, d, faces):
        lo, hi = self.lo[d][faces], self.hi[d][faces]
        intr = self.interior.ravel()
        return np.where((lo >= 0) & intr[np.maximum(lo, 0)], lo, hi)

    def face_average(self, cell_field, d):
        """Arithmetic face value of a cell field; boundary faces take the interior value."""
        f = np.asarray(cell_field, float).ravel()
        lo, hi, kind = self.lo[d], self.hi[d], self.kind[d]
        out = np.zeros(len(kind))
        o = kind == OPEN
        out[o] = 0.5 * (f[lo[o]] + f[hi[o]])
        b = (kind != OPEN) & (kind != NONE)
        bi = np.flatnonzero(b)
        out[bi] = f[self.interior_cell_of_face(d, bi)]
        return out

    # ------------------------------------------------------------------
    def _neighbour_face(self, d, e, s, faces):
        """Face of component d shifted by s along axis e; -1 if outside the array."""
        multi = np.array(np.unravel_index(faces, self.face_shape[d]))
        multi[e] += s
        n = self.face_shape[d][e]
        if self.periodic[e]:
            multi[e] %= n
            ok = np.ones(len(faces), bool)
        else:
            ok = (multi[e] >= 0) & (multi[e] < n)
            multi[e] = np.clip(multi[e], 0, n - 1)
        nb = np.ravel_multi_index(tuple(multi), self.face_shape[d])
        return np.where(ok, nb, -1)

    def _cell_face_kind(self, cells, e, s):
        lower, upper = self._cell_faces[e]
        f = upper[cells] if s > 0 else lower[cells]
        return self.kind[e][f]

    def stencils(self):
        """Per component: neighbour indices + ghost weights for every open face."""
        if self._stencils is not None:
            return self._stencils
        out = []
        for d in range(3):
            faces = self.open[d]
            a, b = self.lo[d][faces], self.hi[d][faces]
            nbr = {}
            for e in range(3):
                for s in (-1, 1):
                    nb = self._neighbour_face(d, e, s, faces)
                    if e == d:
                        w = np.ones(len(faces))
                        bad = nb < 0
                        nb = np.where(bad, faces, nb)
                        w[bad] = 1.0
                        nbr[(e, s)] = (nb, w)
                        continue
                    valid = (nb >= 0) & (self.kind[d][np.maximum(nb, 0)] == OPEN)
                    ka = self._cell_face_kind(a, e, s)
                    kb = self._cell_face_kind(b, e, s)
                    is_wall = (ka == WALL) | (kb == WALL)
                    is_in = (ka == INFLOW) | (kb == INFLOW)
                    ghost = np.where(is_wall, _WALL_MODES[self.wall_bc[e]],
                                     np.where(is_in, -1.0, 1.0))
                    w = np.where(valid, 1.0, ghost)
                    nbr[(e, s)] = (np.where(valid, nb, faces), w)
            # the four e-faces around face f, for transverse velocity interpolation
            trans = {}
            for e in range(3):
                if e == d:
                    continue
                la, ua = self._cell_faces[e][0][a], self._cell_faces[e][1][a]
                lb, ub = self._cell_faces[e][0][b], self._cell_faces[e][1][b]
                trans[e] = np.stack([la, ua, lb, ub])
            out.append({"faces": faces, "nbr": nbr, "trans": trans})
        self._stencils = out
        return out

    def laplacian(self, d):
        """Sparse vector Laplacian rows (open faces of component d) over all faces of d."""
        st = self.stencils()[d]
        faces = st["faces"]
        n = len(faces)
        rows, cols, vals = [], [], []
        diag = np.full(n, -6.0)
        r = np.arange(n)
        for (e, s), (nb, w) in st["nbr"].items():
            self_ref = nb == faces
            diag = diag + np.where(self_ref, w, 0.0)
            rows.append(r[~self_ref])
            cols.append(nb[~self_ref])
            vals.append(w[~self_ref])
        rows.append(r)
        cols.append(faces)
        vals.append(diag)
        m = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, self.nfaces(d)))
        return m / self.h ** 2

    def cell_velocity(self, u):
        """Cell-centred velocity (ncell, 3) from face components."""
        out = np.zeros((self.ncell, 3))
        for d in range(3):
            lower, upper = self._cell_faces[d]
            out[:, d] = 0.5 * (u[d][lower] + u[d][upper])
        out[~self.interior.ravel()] = 0.0
        return out

    def divergence(self, u, phi_faces=None):
        """Discrete div(phi u) per cell (1/s); zero in exterior cells."""
        div = np.zeros(self.ncell)
        for d in range(3):
            flux = u[d] if phi_faces is None else u[d] * phi_faces[d]
            lower, upper = self._cell_faces[d]
            div += flux[upper] - flux[lower]
        div[~self.interior.ravel()] = 0.0
        return div / self.h

    def neighbour_cells(self, d, s):
        """Flat index of the neighbour cell along d (s=+-1); -1 if outside the array."""
        idx = np.indices(self.shape)
        idx[d] += s
        n = self.shape[d]
        if self.periodic[d]:
            idx[d] %= n
            ok = np.ones(self.shape, bool)
        else:
            ok = (idx[d] >= 0) & (idx[d] < n)
            idx[d] = np.clip(idx[d], 0, n - 1)
        return np.where(ok, np.ravel_multi_index(tuple(idx), self.shape), -1).ravel()
