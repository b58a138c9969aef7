"""Virtual angiography: parallel-ray line integrals of the contrast field."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateSetup, DimMismatch, PreconditionError
from .geometry import VoxelGrid

log = logging.getLogger(__name__)

K_PRESET = 0.6   # 1/mm


@dataclass(frozen=True)
class ProjectionSetup:
    """Emitter plane through ``origin`` (image centre), rays along ``view`` for ``L`` mm."""

    origin: tuple
    view: tuple
    up: tuple
    L: float
    dims: tuple = (64, 64)     # (W, H)
    pitch: float = 0.1         # mm
    k: float = K_PRESET

    def __post_init__(self):
        v = np.asarray(self.view, float)
        u = np.asarray(self.up, float)
        nv, nu = np.linalg.norm(v), np.linalg.norm(u)
        if nv == 0 or nu == 0:
            raise DegenerateSetup("view and up must be non-zero")
        v, u = v / nv, u / nu
        if abs(v @ u) > 1 - 1e-9:
            raise DegenerateSetup("view and up are parallel")
        # keep up exactly perpendicular to view
        u = u - (u @ v) * v
        u /= np.linalg.norm(u)
        object.__setattr__(self, "origin", np.asarray(self.origin, float))
        object.__setattr__(self, "view", v)
        object.__setattr__(self, "up", u)
        W, H = (int(x) for x in self.dims)
        if W < 1 or H < 1 or self.L <= 0 or self.pitch <= 0 or self.k <= 0:
            raise PreconditionError("projection needs W, H >= 1 and positive L, pitch, k")
        object.__setattr__(self, "dims", (W, H))

    @property
    def right(self):
        return np.cross(self.up, self.view)

    def pixel_origins(self):
        """(W, H, 3) ray start points on the emitter plane."""
        W, H = self.dims
        i = (np.arange(W) - (W - 1) / 2) * self.pitch
        j = (np.arange(H) - (H - 1) / 2) * self.pitch
        return (self.origin + i[:, None, None] * self.right + j[None, :, None] * self.up)

    @classmethod
    def along_axis(cls, grid: VoxelGrid, axis=2, pitch=None, k=K_PRESET, margin=0.0):
        """Setup looking along +axis that covers the whole grid."""
        axis = int(axis)
        lo = grid.origin
        hi = grid.origin + np.asarray(grid.dims) * grid.h
        ctr = 0.5 * (lo + hi)
        view = np.eye(3)[axis]
        up = np.eye(3)[(axis + 2) % 3]
        right = np.cross(up, view)
        pitch = grid.h if pitch is None else pitch
        W = int(np.ceil((np.abs(right) @ (hi - lo) + 2 * margin) / pitch))
        H = int(np.ceil((np.abs(up) @ (hi - lo) + 2 * margin) / pitch))
        origin = ctr.copy()
        origin[axis] = lo[axis] - margin
        return cls(origin, view, up, float(hi[axis] - lo[axis] + 2 * margin), (W, H), pitch, k)


@dataclass
class DsaImage:
    R: np.ndarray                 # (W, H)
    pitch: float = 1.0
    k: float = K_PRESET

    def __post_init__(self):
        self.R = np.asarray(self.R, float)
        if not np.all(np.isfinite(self.R)) or np.any(self.R < 0):
            raise PreconditionError("DSA image must be finite and non-negative")

    @property
    def dims(self):
        return self.R.shape

    def to_gray(self, window=1.0):
        """8-bit mapping on the fixed window [0, window]; contrast renders dark."""
        g = np.clip(self.R / window, 0.0, 1.0)
        return np.round(255 * (1 - g)).astype(np.uint8)

    def write_pgm(self, path, window=1.0, binary=True):
        g = self.to_gray(window).T   # rows are image lines (up axis)
        g = g[::-1]
        H, W = g.shape
        with open(path, "wb") as fh:
            if binary:
                fh.write(f"P5\n{W} {H}\n255\n".encode())
                fh.write(g.tobytes())
            else:
                fh.write(f"P2\n{W} {H}\n255\n".encode())
                for row in g:
                    fh.write((" ".join(str(int(v)) for v in row) + "\n").encode())

    def write_raw(self, path):
        """Text header line followed by little-endian float64 data in (W, H) C order."""
        W, H = self.R.shape
        with open(path, "wb") as fh:
            fh.write(f"DSA W={W} H={H} pitch_mm={self.pitch!r} k_per_mm={self.k!r}\n".encode())
            fh.write(self.R.astype("<f8").tobytes())

    @classmethod
    def read_raw(cls, path):
        with open(path, "rb") as fh:
            head = fh.readline().decode().split()
            meta = dict(kv.split("=") for kv in head[1:])
            W, H = int(meta["W"]), int(meta["H"])
            R = np.frombuffer(fh.read(), "<f8").reshape(W, H)
        return cls(R.copy(), float(meta["pitch_mm"]), float(meta["k_per_mm"]))


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    magic = data[:2]
    tokens, pos = [], 2
    while len(tokens) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos)
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(int(data[pos:end]))
        pos = end
    W, H, _ = tokens
    if magic == b"P5":
        return np.frombuffer(data[pos + 1:pos + 1 + W * H], np.uint8).reshape(H, W)
    return np.array(data[pos:].split(), int).astype(np.uint8).reshape(H, W)


def render_dsa(C, grid: VoxelGrid, setup: ProjectionSetup, step=None) -> DsaImage:
    """R = k * sum C(sample) ds with trilinear samples every ``step`` (default h/2).

    ``C`` is a TracerState or a cell array; exterior cells read as zero.
    """
    C = getattr(C, "C", C)
    C = np.asarray(C, float).reshape(grid.dims)
    C = np.where(grid.interior, C, 0.0)
    ds = 0.5 * grid.h if step is None else float(step)
    n = max(1, int(np.ceil(setup.L / ds - 1e-9)))
    ds = setup.L / n
    s = (np.arange(n) + 0.5) * ds   # midpoint samples along each ray
    starts = setup.pixel_origins()
    W, H = setup.dims
    R = np.zeros((W, H))
    # chunk over sample depth to bound memory
    chunk = max(1, int(4e6 // max(W * H, 1)))
    for i in range(0, n, chunk):
        sc = s[i:i + chunk]
        pts = starts[:, :, None, :] + sc[None, None, :, None] * setup.view
        idx = (pts - grid.origin) / grid.h - 0.5   # fractional cell-centre index
        vals = ndimage.map_coordinates(C, idx.reshape(-1, 3).T, order=1, mode="constant", cval=0.0)
        R += vals.reshape(W, H, len(sc)).sum(axis=2)
    R *= setup.k * ds
    return DsaImage(np.maximum(R, 0.0), setup.pitch, setup.k)


def subtract_series(pre: DsaImage, post: DsaImage) -> DsaImage:
    if pre.dims != post.dims:
        raise DimMismatch(f"image sizes differ: {pre.dims} vs {post.dims}")
    diff = post.R - pre.R
    neg = diff < 0
    if neg.any():
        log.info("subtraction clamped %d pixels at zero", int(neg.sum()))
    return DsaImage(np.where(neg, 0.0, diff), post.pitch, post.k)
