"""Coil deployment as damped dynamics of a discrete elastic rod.

Energy (stretch penalty, bending in the material frame, twist) is written with
jax.numpy and differentiated automatically.  Material frames are built from a
space-parallel (Bishop) frame transported along the rod from a reference
director on edge 0; that director is itself carried along in time by parallel
transport after each step, so twist is just the difference of consecutive
edge angles.

Units: mm, s; forces in nN with mass_per_len chosen coherently
(nN s^2 / mm^2), so the dynamics are a relaxation device rather than a
calibrated inertial model.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np
from scipy.optimize import brentq

from .errors import DegenerateEdge, Instability, PreconditionError, StallDetected

jax.config.update("jax_enable_x64", True)

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# state and material
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class RodMaterial:
    alpha_stretch: float = 2000.0     # nN
    B: tuple = ((1.0, 0.0), (0.0, 1.0))   # nN mm^2
    beta_twist: float = 0.8           # nN mm^2
    damping: float = 1.0              # 1/s
    mass_per_len: float = 1.0
    mu_friction: float = 0.3
    contact_stiffness: float | None = None   # nN/mm; default 10x the largest elastic stiffness
    stick_speed: float = 1e-3         # mm/s

    def __post_init__(self):
        B = np.asarray(self.B, float)
        if B.shape != (2, 2) or not np.allclose(B, B.T) or np.linalg.eigvalsh(B).min() <= 0:
            raise PreconditionError("B must be a symmetric positive-definite 2x2 matrix")
        if min(self.alpha_stretch, self.beta_twist, self.damping, self.mass_per_len) <= 0:
            raise PreconditionError("stretch, twist, damping and mass must be positive")
        if self.mu_friction < 0:
            raise PreconditionError("friction coefficient must be non-negative")
        object.__setattr__(self, "B", tuple(map(tuple, B.tolist())))

    @property
    def B_array(self):
        return np.asarray(self.B, float)

    def elastic_stiffness(self, lmin):
        lam = float(np.linalg.eigvalsh(self.B_array).max())
        return max(self.alpha_stretch / lmin, lam / lmin ** 3, self.beta_twist / lmin ** 3)

    def contact_k(self, lmin):
        if self.contact_stiffness is not None:
            return float(self.contact_stiffness)
        return 10.0 * self.elastic_stiffness(lmin)

    def stable_dt(self, lmin):
        lam = float(np.linalg.eigvalsh(self.B_array).max())
        stiff = max(self.alpha_stretch, lam / lmin ** 2, self.beta_twist / lmin ** 2)
        bound = 0.5 * math.sqrt(self.mass_per_len * lmin ** 2 / stiff)
        kc = self.contact_k(lmin)
        return min(bound, 0.5 * math.sqrt(self.mass_per_len * lmin / kc))


@dataclass
class CoilState:
    x: np.ndarray              # (N, 3)
    phi: np.ndarray            # (N-1,)
    rest_len: np.ndarray       # (N-1,)
    rest_kappa: np.ndarray     # (N-2, 2)
    rest_twist: np.ndarray     # (N-2,) twist between consecutive edges
    radii: tuple = (0.05, 0.25, 4.0)
    v: np.ndarray | None = None
    w: np.ndarray | None = None
    director: np.ndarray | None = None   # reference director of edge 0
    released_count: int = 0
    t: float = 0.0

    def __post_init__(self):
        self.x = np.asarray(self.x, float)
        n = len(self.x)
        if n < 2:
            raise PreconditionError("a rod needs at least two vertices")
        D1, D2, D3 = self.radii
        if not 0 < D1 < D2 < D3:
            raise PreconditionError("radii must satisfy 0 < D1 < D2 < D3")
        self.phi = np.zeros(n - 1) if self.phi is None else np.asarray(self.phi, float)
        self.rest_len = np.asarray(self.rest_len, float)
        if np.any(self.rest_len <= 0):
            raise PreconditionError("rest edge lengths must be positive")
        self.rest_kappa = np.asarray(self.rest_kappa, float).reshape(max(n - 2, 0), 2)
        self.rest_twist = np.asarray(self.rest_twist, float).reshape(max(n - 2, 0))
        if self.v is None:
            self.v = np.zeros_like(self.x)
        if self.w is None:
            self.w = np.zeros(n - 1)
        if self.director is None:
            self.director = perpendicular(self.x[1] - self.x[0])
        self.released_count = int(self.released_count) if self.released_count else 0
        if self.released_count > n:
            raise PreconditionError("released_count exceeds vertex count")

    @property
    def n(self):
        return len(self.x)

    @property
    def D2(self):
        return self.radii[1]

    def copy(self):
        return replace(self, x=self.x.copy(), phi=self.phi.copy(), v=self.v.copy(), w=self.w.copy(),
                       director=self.director.copy())


def perpendicular(t):
    t = np.asarray(t, float)
    nt = np.linalg.norm(t)
    if nt == 0:
        raise DegenerateEdge("zero-length edge")
    t = t / nt
    a = np.array([1.0, 0.0, 0.0]) if abs(t[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    d = a - (a @ t) * t
    return d / np.linalg.norm(d)


# --------------------------------------------------------------------------
# energy
# --------------------------------------------------------------------------

def _transport(a, b, v):
    """Rotate v by the minimal rotation taking unit a to unit b."""
    c = jnp.dot(a, b)
    k = jnp.cross(a, b)
    return c * v + jnp.cross(k, v) + jnp.dot(k, v) / (1.0 + c) * k


def _frames(x, u0):
    e = x[1:] - x[:-1]
    t = e / jnp.linalg.norm(e, axis=1, keepdims=True)
    d0 = u0 - jnp.dot(u0, t[0]) * t[0]
    d0 = d0 / jnp.linalg.norm(d0)

    def body(d, tt):
        a, b = tt
        dn = _transport(a, b, d)
        return dn, dn

    _, rest = jax.lax.scan(body, d0, (t[:-1], t[1:]))
    d = jnp.concatenate([d0[None], rest], axis=0)
    return e, t, d


def _curvature(x, phi, u0, rest_len):
    e, t, d = _frames(x, u0)
    b = jnp.cross(t, d)
    c, s = jnp.cos(phi)[:, None], jnp.sin(phi)[:, None]
    m1 = c * d + s * b
    m2 = -s * d + c * b
    ea, eb = e[:-1], e[1:]
    denom = rest_len[:-1] * rest_len[1:] + jnp.sum(ea * eb, axis=1)
    kb = 2.0 * jnp.cross(ea, eb) / denom[:, None]
    k1 = jnp.sum(kb * 0.5 * (m2[:-1] + m2[1:]), axis=1)
    k2 = -jnp.sum(kb * 0.5 * (m1[:-1] + m1[1:]), axis=1)
    # integrated curvature divided by the vertex's Voronoi length gives 1/mm
    vor = 0.5 * (rest_len[:-1] + rest_len[1:])
    return jnp.stack([k1, k2], axis=1) / vor[:, None], e


def _energy_terms(x, phi, u0, rest_len, rest_kappa, rest_twist, alpha, B, beta):
    kappa, e = _curvature(x, phi, u0, rest_len)
    length = jnp.linalg.norm(e, axis=1)
    stretch = jnp.sum(0.5 * alpha * (length / rest_len - 1.0) ** 2 * rest_len)
    w = rest_len[:-1] + rest_len[1:]
    dk = (kappa - rest_kappa) * (0.5 * w)[:, None]
    bend = jnp.sum(jnp.einsum("ni,ij,nj->n", dk, B, dk) / w)
    tau = phi[1:] - phi[:-1]
    twist = jnp.sum(beta * (tau - rest_twist) ** 2 / w)
    return stretch, bend, twist


def _energy(x, phi, u0, rest_len, rest_kappa, rest_twist, alpha, B, beta):
    s, b, t = _energy_terms(x, phi, u0, rest_len, rest_kappa, rest_twist, alpha, B, beta)
    return s + b + t


_energy_jit = jax.jit(_energy)
_terms_jit = jax.jit(_energy_terms)
_grad_jit = jax.jit(jax.value_and_grad(_energy, argnums=(0, 1)))
_curv_jit = jax.jit(_curvature)


def _check_edges(x):
    if np.any(np.linalg.norm(np.diff(np.asarray(x, float), axis=0), axis=1) == 0):
        raise DegenerateEdge("zero-length edge")


def _args(s: CoilState, m: RodMaterial):
    return (jnp.asarray(s.x), jnp.asarray(s.phi), jnp.asarray(s.director), jnp.asarray(s.rest_len),
            jnp.asarray(s.rest_kappa), jnp.asarray(s.rest_twist), m.alpha_stretch,
            jnp.asarray(m.B_array), m.beta_twist)


def rod_energy(s: CoilState, m: RodMaterial, terms=False):
    _check_edges(s.x)
    if s.n < 3:
        e = np.linalg.norm(s.x[1] - s.x[0])
        val = 0.5 * m.alpha_stretch * (e / s.rest_len[0] - 1) ** 2 * s.rest_len[0]
        return (val, 0.0, 0.0) if terms else float(val)
    if terms:
        return tuple(float(v) for v in _terms_jit(*_args(s, m)))
    return float(_energy_jit(*_args(s, m)))


def rod_forces(s: CoilState, m: RodMaterial):
    """(-dE/dx, -dE/dphi)."""
    _check_edges(s.x)
    if s.n < 3:
        e = s.x[1] - s.x[0]
        le = np.linalg.norm(e)
        f = m.alpha_stretch * (le / s.rest_len[0] - 1) * e / le
        return np.stack([f, -f]), np.zeros(1)
    _, (gx, gp) = _grad_jit(*_args(s, m))
    return -np.asarray(gx), -np.asarray(gp)


def material_curvature(x, phi=None, director=None, rest_len=None):
    """Discrete material curvature of a polyline (N-2, 2)."""
    x = np.asarray(x, float)
    _check_edges(x)
    if phi is None:
        phi = np.zeros(len(x) - 1)
    if director is None:
        director = perpendicular(x[1] - x[0])
    if rest_len is None:
        rest_len = np.linalg.norm(np.diff(x, axis=0), axis=1)
    k, _ = _curv_jit(jnp.asarray(x), jnp.asarray(phi), jnp.asarray(director), jnp.asarray(rest_len))
    return np.asarray(k)


# --------------------------------------------------------------------------
# rest shapes
# --------------------------------------------------------------------------

def _resample(curve, n_edges):
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    target = np.linspace(0.0, s[-1], n_edges + 1)
    return np.stack([np.interp(target, s, curve[:, k]) for k in range(3)], axis=1)


def rest_polyline(shape, length, n_edges, D3=4.0, radius=None):
    """Rest centreline: ``straight``, ``arc`` (radius, default D3/2) or ``helix`` on a sphere of diameter D3."""
    if shape == "straight":
        return np.stack([np.linspace(0, length, n_edges + 1), np.zeros(n_edges + 1), np.zeros(n_edges + 1)], 1)
    if shape == "arc":
        R = radius if radius is not None else D3 / 2
        th = np.linspace(0, length / R, n_edges + 1)
        return np.stack([R * np.sin(th), R * (1 - np.cos(th)), np.zeros_like(th)], 1)
    if shape == "helix":
        R = D3 / 2
        th0 = 0.35
        th = np.linspace(th0, np.pi - th0, 4000)

        def curve(nt):
            return np.stack([R * np.sin(th) * np.cos(nt * th), R * np.sin(th) * np.sin(nt * th),
                             R * np.cos(th)], 1)

        def arclen(nt):
            return np.linalg.norm(np.diff(curve(nt), axis=0), axis=1).sum()

        if arclen(0.0) >= length:
            raise PreconditionError("coil too short for a spherical helix; use arc")
        hi = 1.0
        while arclen(hi) < length:
            hi *= 2
        nt = brentq(lambda q: arclen(q) - length, 0.0, hi, xtol=1e-12)
        return _resample(curve(nt), n_edges)
    raise PreconditionError(f"unknown rest shape {shape!r}")


def make_coil(length, radii=(0.05, 0.25, 4.0), shape="helix", edge_len=None, radius=None,
              x=None, director=None):
    """Coil whose rest quantities come from the named rest shape; ``x`` defaults to that shape."""
    D1, D2, D3 = radii
    edge_len = D2 if edge_len is None else edge_len
    n_edges = max(1, int(round(length / edge_len)))
    rest = rest_polyline(shape, length, n_edges, D3, radius)
    rest_len = np.linalg.norm(np.diff(rest, axis=0), axis=1)
    u_rest = perpendicular(rest[1] - rest[0])
    kappa = material_curvature(rest, None, u_rest, rest_len) if n_edges > 1 else np.zeros((0, 2))
    if x is None:
        x, director = rest, u_rest
    return CoilState(np.asarray(x, float), None, rest_len, kappa, np.zeros(max(n_edges - 1, 0)),
                     radii=tuple(radii), director=director, released_count=len(x))


# --------------------------------------------------------------------------
# obstacles and contact
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SphereCavity:
    center: tuple
    radius: float

    def sdf(self, p):
        return self.radius - jnp.linalg.norm(p - jnp.asarray(self.center), axis=-1)


@dataclass(frozen=True)
class CylinderObstacle:
    """Generalized cylinder the coil must stay outside of (parent-vessel containment)."""

    centerline: tuple
    radius: tuple   # one radius per centreline vertex

    def sdf(self, p):
        c = jnp.asarray(self.centerline)
        r = jnp.asarray(self.radius)
        a, b = c[:-1], c[1:]
        ab = b - a
        tt = jnp.clip(jnp.einsum("sk,nsk->ns", ab, p[:, None, :] - a) / jnp.sum(ab * ab, 1), 0.0, 1.0)
        q = a + tt[..., None] * ab
        dist = jnp.linalg.norm(p[:, None, :] - q, axis=-1)
        rad = r[:-1] + tt * (r[1:] - r[:-1])
        return jnp.min(dist - rad, axis=1)


@dataclass(frozen=True)
class GridSDF:
    """Signed distance sampled on cell centres (positive inside the fluid), trilinear lookup."""

    origin: tuple
    h: float
    values: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_grid(cls, grid, mask=None):
        """SDF of the grid interior, or of ``mask`` (e.g. the sac) when given."""
        from scipy.ndimage import distance_transform_edt
        inside = grid.interior if mask is None else np.asarray(mask, bool)
        d = (distance_transform_edt(inside) - distance_transform_edt(~inside)) * grid.h
        # the staircase boundary sits half a cell beyond the centre of the outermost fluid cell
        d = np.where(inside, d - 0.5 * grid.h, d + 0.5 * grid.h)
        return cls(tuple(np.asarray(grid.origin, float)), float(grid.h), d)

    def sdf(self, p):
        idx = (p - jnp.asarray(self.origin)) / self.h - 0.5
        vals = jnp.asarray(self.values)
        return jax.scipy.ndimage.map_coordinates(vals, [idx[:, 0], idx[:, 1], idx[:, 2]], order=1,
                                                 mode="nearest")


@dataclass
class ObstacleSet:
    walls: list = field(default_factory=list)      # objects with a jax sdf(p) (positive = free)
    other_coils: list = field(default_factory=list)  # frozen CoilState

    def frozen_segments(self):
        segs = [np.stack([c.x[:-1], c.x[1:]], axis=1) for c in self.other_coils]
        return np.concatenate(segs) if segs else np.zeros((0, 2, 3))

    def signed_distance(self, p):
        p = jnp.atleast_2d(jnp.asarray(p, float))
        if not self.walls:
            return np.full(len(p), np.inf)
        return np.asarray(_sdf_min(self.walls, p))


def _sdf_min(walls, p):
    vals = [w.sdf(p) for w in walls]
    return vals[0] if len(vals) == 1 else jnp.min(jnp.stack(vals), axis=0)


def exclusion_window(rest_len, D2):
    """Neighbouring segments closer than this index gap are never contact pairs."""
    return int(math.ceil(D2 / float(np.min(rest_len)))) + 1


def segment_pairs(n_edges, window):
    i, j = np.triu_indices(n_edges, k=window + 1)
    return i.astype(np.int64), j.astype(np.int64)


def _closest_params(p1, d1, p2, d2):
    """Closest points between segments p1 + s d1 and p2 + t d2 (s, t in [0, 1])."""
    r = p1 - p2
    a = jnp.sum(d1 * d1, -1)
    e = jnp.sum(d2 * d2, -1)
    f = jnp.sum(d2 * r, -1)
    c = jnp.sum(d1 * r, -1)
    b = jnp.sum(d1 * d2, -1)
    den = a * e - b * b
    s = jnp.where(den > 1e-14 * a * e, jnp.clip((b * f - c * e) / jnp.where(den > 0, den, 1.0), 0, 1), 0.0)
    t = (b * s + f) / e
    s = jnp.where(t < 0, jnp.clip(-c / a, 0, 1), jnp.where(t > 1, jnp.clip((b - c) / a, 0, 1), s))
    t = jnp.clip(t, 0, 1)
    return s, t


def _friction(vt, fn_mag, mu, v_stick):
    speed = jnp.linalg.norm(vt, axis=-1, keepdims=True)
    slip = -mu * fn_mag[..., None] * vt / jnp.maximum(speed, 1e-300)
    stick = -mu * fn_mag[..., None] * vt / v_stick
    return jnp.where(speed > v_stick, slip, stick)


def _contact(x, v, pairs_i, pairs_j, frozen, wall_fn, D2, kc, mu, v_stick):
    """Penalty + Coulomb contact forces on the rod vertices."""
    n = x.shape[0]
    f = jnp.zeros_like(x)
    if pairs_i.shape[0]:
        p1, d1 = x[pairs_i], x[pairs_i + 1] - x[pairs_i]
        p2, d2 = x[pairs_j], x[pairs_j + 1] - x[pairs_j]
        s, t = _closest_params(p1, d1, p2, d2)
        q1 = p1 + s[:, None] * d1
        q2 = p2 + t[:, None] * d2
        sep = q1 - q2
        dist = jnp.linalg.norm(sep, axis=1)
        nrm = sep / jnp.maximum(dist, 1e-12)[:, None]
        pen = jnp.maximum(D2 - dist, 0.0)
        fn = kc * pen
        va = (1 - s)[:, None] * v[pairs_i] + s[:, None] * v[pairs_i + 1]
        vb = (1 - t)[:, None] * v[pairs_j] + t[:, None] * v[pairs_j + 1]
        vr = va - vb
        vt = vr - jnp.sum(vr * nrm, 1, keepdims=True) * nrm
        ft = jnp.where((pen > 0)[:, None], _friction(vt, fn, mu, v_stick), 0.0)
        F = fn[:, None] * nrm + ft
        f = f.at[pairs_i].add((1 - s)[:, None] * F)
        f = f.at[pairs_i + 1].add(s[:, None] * F)
        f = f.at[pairs_j].add(-(1 - t)[:, None] * F)
        f = f.at[pairs_j + 1].add(-t[:, None] * F)
    if frozen.shape[0]:
        # vertex against frozen segments of earlier coils
        a, b = frozen[:, 0], frozen[:, 1]
        ab = b - a
        tt = jnp.clip(jnp.einsum("sk,nsk->ns", ab, x[:, None, :] - a) / jnp.sum(ab * ab, 1), 0, 1)
        q = a + tt[..., None] * ab
        sep = x[:, None, :] - q
        dist = jnp.linalg.norm(sep, axis=-1)
        nrm = sep / jnp.maximum(dist, 1e-12)[..., None]
        fn = kc * jnp.maximum(D2 - dist, 0.0)
        vt = v[:, None, :] - jnp.sum(v[:, None, :] * nrm, -1, keepdims=True) * nrm
        ft = jnp.where((fn > 0)[..., None], _friction(vt, fn, mu, v_stick), 0.0)
        f = f + jnp.sum(fn[..., None] * nrm + ft, axis=1)
    if wall_fn is not None:
        dist, grad = jax.vmap(jax.value_and_grad(lambda p: wall_fn(p[None])[0]))(x)
        gn = jnp.linalg.norm(grad, axis=1, keepdims=True)
        nrm = grad / jnp.maximum(gn, 1e-12)
        fn = kc * jnp.maximum(0.5 * D2 - dist, 0.0)
        vt = v - jnp.sum(v * nrm, 1, keepdims=True) * nrm
        ft = jnp.where((fn > 0)[:, None], _friction(vt, fn, mu, v_stick), 0.0)
        f = f + fn[:, None] * nrm + ft
    return f


def contact_forces(s: CoilState, obs: ObstacleSet | None, m: RodMaterial = RodMaterial()):
    obs = obs or ObstacleSet()
    window = exclusion_window(s.rest_len, s.D2)
    pi, pj = segment_pairs(s.n - 1, window)
    wall_fn = (lambda p: _sdf_min(obs.walls, p)) if obs.walls else None
    f = _contact(jnp.asarray(s.x), jnp.asarray(s.v), jnp.asarray(pi), jnp.asarray(pj),
                 jnp.asarray(obs.frozen_segments()), wall_fn, s.D2,
                 m.contact_k(float(s.rest_len.min())), m.mu_friction, m.stick_speed)
    return np.asarray(f)


def min_segment_distance(x, window):
    """Smallest distance between rod segments more than ``window`` indices apart."""
    x = np.asarray(x, float)
    pi, pj = segment_pairs(len(x) - 1, window)
    if len(pi) == 0:
        return np.inf
    p1, d1 = x[pi], x[pi + 1] - x[pi]
    p2, d2 = x[pj], x[pj + 1] - x[pj]
    s, t = (np.asarray(a) for a in _closest_params(jnp.asarray(p1), jnp.asarray(d1),
                                                    jnp.asarray(p2), jnp.asarray(d2)))
    q1 = p1 + s[:, None] * d1
    q2 = p2 + t[:, None] * d2
    return float(np.linalg.norm(q1 - q2, axis=1).min())


# --------------------------------------------------------------------------
# time stepping
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Insertion:
    tip: tuple = (0.0, 0.0, 0.0)
    direction: tuple = (1.0, 0.0, 0.0)
    feed_rate: float = 5.0    # mm/s

    def __post_init__(self):
        d = np.asarray(self.direction, float)
        if np.linalg.norm(d) == 0 or self.feed_rate <= 0:
            raise PreconditionError("insertion needs a direction and a positive feed rate")
        object.__setattr__(self, "direction", tuple(d / np.linalg.norm(d)))


class _Stepper:
    """Jitted multi-step symplectic Euler for one coil/material/obstacle combination."""

    def __init__(self, s: CoilState, m: RodMaterial, obs: ObstacleSet, dt, insertion=None, h_guard=None):
        self.m = m
        lmin = float(s.rest_len.min())
        bound = m.stable_dt(lmin)
        if dt > bound * (1 + 1e-12):
            raise PreconditionError(f"dt={dt:.3g}s exceeds the stability bound {bound:.3g}s")
        self.dt = dt
        n = s.n
        vl = np.zeros(n)
        vl[:-1] += 0.5 * s.rest_len
        vl[1:] += 0.5 * s.rest_len
        self.mass = jnp.asarray(m.mass_per_len * vl)[:, None]
        self.inertia = jnp.asarray(m.mass_per_len * s.rest_len ** 3)
        window = exclusion_window(s.rest_len, s.D2)
        pi, pj = segment_pairs(n - 1, window)
        kc = m.contact_k(lmin)
        frozen = jnp.asarray(obs.frozen_segments())
        wall_fn = (lambda p: _sdf_min(obs.walls, p)) if obs.walls else None
        rest = (jnp.asarray(s.rest_len), jnp.asarray(s.rest_kappa), jnp.asarray(s.rest_twist))
        Bm = jnp.asarray(m.B_array)
        grad = jax.value_and_grad(_energy, argnums=(0, 1))
        arc = np.concatenate([[0.0], np.cumsum(s.rest_len)])
        if insertion is not None:
            tip = jnp.asarray(insertion.tip, float)
            tdir = jnp.asarray(insertion.direction, float)
            feed = float(insertion.feed_rate)
        else:
            tip = tdir = jnp.zeros(3)
            feed = 0.0
        arc_j = jnp.asarray(arc)
        feeding = insertion is not None
        vmax = np.inf if h_guard is None else h_guard / dt
        damp = m.damping

        def released(t):
            if not feeding:
                return jnp.ones(n, bool)
            return arc_j <= feed * t + 1e-12

        def one(carry, _):
            x, v, phi, w, u0, t = carry
            _, (gx, gp) = grad(x, phi, u0, *rest, m.alpha_stretch, Bm, m.beta_twist)
            fc = _contact(x, v, jnp.asarray(pi), jnp.asarray(pj), frozen, wall_fn, s.D2, kc,
                          m.mu_friction, m.stick_speed)
            F = -gx + fc
            rel = released(t + dt)
            v_new = (v + dt * F / self.mass) / (1.0 + dt * damp)
            x_new = x + dt * v_new
            if feeding:
                kin = tip + (feed * (t + dt) - arc_j)[:, None] * tdir
                x_new = jnp.where(rel[:, None], x_new, kin)
                v_new = jnp.where(rel[:, None], v_new, feed * tdir)
            erel = rel[1:]
            w_new = jnp.where(erel, (w - dt * gp / self.inertia) / (1.0 + dt * damp), 0.0)
            phi_new = phi + dt * w_new
            e_old = x[1] - x[0]
            e_new = x_new[1] - x_new[0]
            u_new = _transport(e_old / jnp.linalg.norm(e_old), e_new / jnp.linalg.norm(e_new), u0)
            return (x_new, v_new, phi_new, w_new, u_new, t + dt), jnp.max(jnp.abs(v_new))

        @partial(jax.jit, static_argnums=1)
        def run(carry, k):
            return jax.lax.scan(one, carry, None, length=k)

        self._run = run
        self.vmax = vmax

    def advance(self, s: CoilState, k):
        carry = (jnp.asarray(s.x), jnp.asarray(s.v), jnp.asarray(s.phi), jnp.asarray(s.w),
                 jnp.asarray(s.director), jnp.asarray(s.t))
        carry, vm = self._run(carry, int(k))
        x, v, phi, w, u0, t = (np.asarray(a) for a in carry)
        if not np.all(np.isfinite(x)) or float(np.max(vm)) > self.vmax:
            raise Instability("coil velocity blow-up")
        out = s.copy()
        out.x, out.v, out.phi, out.w, out.director, out.t = x, v, phi, w, u0, float(t)
        return out


def kinetic_energy(s: CoilState, m: RodMaterial):
    vl = np.zeros(s.n)
    vl[:-1] += 0.5 * s.rest_len
    vl[1:] += 0.5 * s.rest_len
    ke = 0.5 * m.mass_per_len * np.sum(vl * np.sum(s.v ** 2, axis=1))
    return float(ke + 0.5 * m.mass_per_len * np.sum(s.rest_len ** 3 * s.w ** 2))


def step_symplectic(s: CoilState, m: RodMaterial, obs: ObstacleSet | None, dt, n_steps=1, stepper=None):
    """Advance ``n_steps`` symplectic Euler steps (velocities first, then positions)."""
    obs = obs or ObstacleSet()
    stepper = stepper or _Stepper(s, m, obs, dt)
    return stepper.advance(s, n_steps)


def relax(s: CoilState, m: RodMaterial, obs=None, dt=None, t_max=200.0, ke_tol=1e-10, chunk=2000):
    """Damped relaxation until the kinetic energy falls below ``ke_tol``."""
    dt = dt or 0.9 * m.stable_dt(float(s.rest_len.min()))
    st = _Stepper(s, m, obs or ObstacleSet(), dt)
    t_end = s.t + t_max
    while s.t < t_end:
        s = st.advance(s, chunk)
        if kinetic_energy(s, m) < ke_tol:
            break
    return s


@dataclass
class DeployResult:
    state: CoilState
    events: list      # (release index, time, energy)

    def write_log(self, path):
        with open(path, "w") as fh:
            fh.write("# release_index time_s energy\n")
            for i, t, e in self.events:
                fh.write(f"{i} {t:.6f} {e:.9e}\n")


def deploy(coil: CoilState, m: RodMaterial, obs: ObstacleSet | None, insertion: Insertion,
           dt=None, ke_tol=1e-6, settle_time=60.0, chunk=500, stall_window=20):
    """Feed the rod out of a straight catheter at the tip and let it settle.

    The rod starts collinear behind the tip; vertex 0 leads.
    """
    obs = obs or ObstacleSet()
    if obs.walls:
        d = obs.signed_distance(np.asarray(insertion.tip, float)[None])[0]
        if d <= 0:
            raise PreconditionError("catheter tip lies outside the free domain")
    arc = np.concatenate([[0.0], np.cumsum(coil.rest_len)])
    tip = np.asarray(insertion.tip, float)
    tdir = np.asarray(insertion.direction, float)
    s = coil.copy()
    s.x = tip - arc[:, None] * tdir
    s.v = np.zeros_like(s.x)
    s.v[:] = insertion.feed_rate * tdir
    s.phi = np.zeros(s.n - 1)
    s.w = np.zeros(s.n - 1)
    s.director = perpendicular(tdir)
    s.t = 0.0
    s.released_count = 1
    dt = dt or 0.9 * m.stable_dt(float(coil.rest_len.min()))
    stepper = _Stepper(s, m, obs, dt, insertion, h_guard=coil.D2)
    feed_end = arc[-1] / insertion.feed_rate
    events = [(0, 0.0, rod_energy(s, m))]
    history = []
    blocked = 0
    window = exclusion_window(coil.rest_len, coil.D2)
    while True:
        s = stepper.advance(s, chunk)
        count = int(np.count_nonzero(arc <= insertion.feed_rate * s.t + 1e-12))
        if count > s.released_count:
            e = rod_energy(s, m)
            for i in range(s.released_count, count):
                events.append((i, float(arc[i] / insertion.feed_rate), e))
            s.released_count = count
        ke = kinetic_energy(s, m)
        history.append(ke)
        if s.t < feed_end:
            # the feed is blocked when it keeps forcing segments deep into each other
            deep = min_segment_distance(s.x, window) < 0.5 * coil.D2
            blocked = blocked + 1 if deep else 0
            recent = history[-stall_window:]
            if blocked >= stall_window and recent[-1] >= recent[0]:
                raise StallDetected(f"feed blocked at t={s.t:.3g}s")
            continue
        if ke < ke_tol:
            break
        if s.t > feed_end + settle_time:
            log.info("settle time exhausted with kinetic energy %.3g", ke)
            break
    s.released_count = s.n
    return DeployResult(s, events)


# --------------------------------------------------------------------------
# export
# --------------------------------------------------------------------------

def export_tube(s: CoilState, segments=16):
    """Watertight capped tube of diameter D2 around the centreline."""
    from .shapes import capped_tube_mesh

    x = np.asarray(s.x, float)
    if len(x) < 2 or np.any(np.linalg.norm(np.diff(x, axis=0), axis=1) == 0):
        raise PreconditionError("tube export needs at least two distinct consecutive points")
    if len(x) > 3:
        dmin = min_segment_distance(x, exclusion_window(s.rest_len, s.D2))
        if dmin < s.D2:
            log.warning("tube self-intersects: segment distance %.4g < D2 %.4g", dmin, s.D2)
    return capped_tube_mesh(x, 0.5 * s.D2, segments)
