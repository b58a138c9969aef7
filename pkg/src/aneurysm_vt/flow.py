"""Incompressible porous Navier-Stokes on the staggered voxel grid.

Fractional step: explicit first-order upwind advection, explicit (or optionally
backward-Euler) viscous term, then a pressure projection that enforces
``div(phi u) = 0`` and integrates the Darcy sink ``-(mu/alpha) u`` implicitly
together with the pressure gradient.  Internal units are mm and s; pressure is
kept kinematic (mm^2/s^2) inside the solver and reported in Pa.
"""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
import pyamg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import Instability, PreconditionError, PressureSolveDiverged
from .geometry import VoxelGrid
from .mac import INFLOW, NONE, OPEN, OUTFLOW, WALL, Topology

log = logging.getLogger(__name__)

MMHG_TO_PA = 133.322387415
CARDIAC_PERIOD = 10.0 / 9.0


@dataclass(frozen=True)
class FluidProps:
    rho: float = 1.0e3   # kg/m^3
    mu: float = 0.004    # kg/(m s)

    def __post_init__(self):
        if not (self.rho > 0 and self.mu > 0):
            raise PreconditionError("density and viscosity must be positive")

    @property
    def nu(self):
        """Kinematic viscosity in mm^2/s."""
        return self.mu / self.rho * 1e6

    def pa_to_kinematic(self, p):
        return np.asarray(p) / self.rho * 1e6

    def kinematic_to_pa(self, pk):
        return np.asarray(pk) * self.rho * 1e-6


@dataclass(frozen=True)
class WaveformSpec:
    """Truncated Fourier series ``sum A_k sin(2 pi f_k t + phi_k) + offset``.

    ``role`` is ``inlet-velocity`` (values in cm/s) or ``outlet-pressure`` (mmHg).
    """

    terms: tuple = ()
    offset: float = 0.0
    role: str = "inlet-velocity"

    def __post_init__(self):
        terms = tuple(tuple(float(x) for x in t) for t in self.terms)
        if any(len(t) != 3 for t in terms) or not np.all(np.isfinite(np.array(terms or [[0, 0, 0]]))):
            raise PreconditionError("waveform terms must be finite (A, f, phase) triples")
        if self.role not in ("inlet-velocity", "outlet-pressure"):
            raise PreconditionError(f"unknown waveform role {self.role!r}")
        object.__setattr__(self, "terms", terms)

    def __call__(self, t):
        return waveform_eval(self, t)

    def si(self, t):
        """Value in solver units: mm/s for velocity, Pa for pressure."""
        v = waveform_eval(self, t)
        return v * 10.0 if self.role == "inlet-velocity" else v * MMHG_TO_PA


def waveform_eval(w: WaveformSpec, t):
    t = np.asarray(t, dtype=float)
    out = np.full(t.shape, float(w.offset))
    for a, f, ph in w.terms:
        out = out + a * np.sin(2 * np.pi * f * t + ph)
    return out if out.ndim else float(out)


PULSATILE_INLET_VELOCITY = WaveformSpec(
    ((-15.49, 0.89, -12.84), (9.42, -1.78, -1.61), (0.27, 18.44, -1.44)), 19.59, "inlet-velocity")
PULSATILE_OUTLET_PRESSURE = WaveformSpec(
    ((-30.44, 0.89, -13.19), (2.96, -1.93, 0.50), (1.39, 15.86, -2.01)), 75.07, "outlet-pressure")


def constant_waveform(value, role="inlet-velocity"):
    return WaveformSpec((), value, role)


def peak_systole_times(w: WaveformSpec, n_cycles, period=CARDIAC_PERIOD, t0=0.0, samples=20000):
    """Time of the maximum inlet value inside each window [t0 + nT, t0 + (n+1)T); earliest on ties."""
    if n_cycles < 1:
        raise PreconditionError("n_cycles must be at least 1")
    out = []
    for n in range(n_cycles):
        ts = t0 + n * period + period * np.arange(samples) / samples
        v = np.asarray(waveform_eval(w, ts))
        out.append(float(ts[int(np.argmax(v))]))
    return out


@dataclass
class FlowState:
    u: list                 # three flat face arrays, mm/s
    p: np.ndarray           # cell pressure, Pa
    phi: np.ndarray         # cell porosity
    inv_alpha: np.ndarray   # cell viscous resistance, 1/mm^2
    t: float = 0.0

    def copy(self):
        return FlowState([a.copy() for a in self.u], self.p.copy(), self.phi.copy(),
                         self.inv_alpha.copy(), self.t)


@dataclass
class FlowSolver:
    grid: VoxelGrid
    props: FluidProps = field(default_factory=FluidProps)
    inlet: WaveformSpec | None = None
    outlet: WaveformSpec | None = None
    wall_bc: object = "free-slip"
    diffusion: str = "explicit"
    cfl: float = 0.4
    tol: float = 1e-10
    max_iter: int = 400
    extra_inv_alpha: np.ndarray | None = None  # device contributions, 1/mm^2

    def __post_init__(self):
        self.topo = Topology(self.grid, self.wall_bc)
        self.nu = self.props.nu
        self._lap = [self.topo.laplacian(d) for d in range(3)]
        self._amg = OrderedDict()
        self._visc = {}
        n = self.topo.ncell
        if self.extra_inv_alpha is None:
            self.extra_inv_alpha = np.zeros(n)
        self.extra_inv_alpha = np.asarray(self.extra_inv_alpha, float).ravel()
        self._has_outflow = any(np.any(k == OUTFLOW) for k in self.topo.kind)

    # ------------------------------------------------------------------
    def initial_state(self, phi=None, inv_alpha=None, ambient=1e-18):
        n = self.topo.ncell
        phi = np.ones(n) if phi is None else np.asarray(phi, float).ravel().copy()
        ia = np.full(n, ambient) if inv_alpha is None else np.asarray(inv_alpha, float).ravel().copy()
        u = [np.zeros(self.topo.nfaces(d)) for d in range(3)]
        return FlowState(u, np.zeros(n), phi, ia, 0.0)

    def inlet_speed(self, t):
        return 0.0 if self.inlet is None else float(self.inlet.si(t))

    def outlet_pressure(self, t):
        """Outlet pressure, kinematic units."""
        return 0.0 if self.outlet is None else float(self.props.pa_to_kinematic(self.outlet.si(t)))

    def stable_dt(self, state=None, u_ref=None):
        """dt = CFL * min(h/|u|max, h^2/(6 nu)); the viscous bound only applies to explicit diffusion."""
        h = self.grid.h
        umax = 0.0 if state is None else max(float(np.abs(a).max(initial=0.0)) for a in state.u)
        if u_ref is not None:
            umax = max(umax, u_ref)
        bounds = []
        if umax > 0:
            bounds.append(h / umax)
        if self.diffusion == "explicit":
            bounds.append(h * h / (6 * self.nu))
        if not bounds:
            return np.inf
        return self.cfl * min(bounds)

    # ------------------------------------------------------------------
    def _face_coeffs(self, state, dt):
        topo = self.topo
        ia = state.inv_alpha + self.extra_inv_alpha
        phis, betas, damps = [], [], []
        for d in range(3):
            pf = topo.face_average(state.phi, d)
            af = topo.face_average(ia, d)
            c = np.zeros_like(pf)
            m = pf > 0
            c[m] = dt * self.nu * af[m] / pf[m]
            phis.append(pf)
            damps.append(c)
            betas.append(np.where(m, pf / (1.0 + c), 0.0))
        return phis, betas, damps

    def _pressure_solver(self, betas, key):
        if key in self._amg:
            self._amg.move_to_end(key)
            return self._amg[key]
        topo = self.topo
        cid = topo.cell_id
        nc = len(topo.cells)
        rows, cols, vals = [], [], []
        diag = np.zeros(nc)
        for d in range(3):
            kind = topo.kind[d]
            o = np.flatnonzero(kind == OPEN)
            a, b = cid[topo.lo[d][o]], cid[topo.hi[d][o]]
            w = betas[d][o]
            np.add.at(diag, a, w)
            np.add.at(diag, b, w)
            rows += [a, b]
            cols += [b, a]
            vals += [-w, -w]
            of = np.flatnonzero(kind == OUTFLOW)
            if len(of):
                np.add.at(diag, cid[topo.interior_cell_of_face(d, of)], betas[d][of])
        pinned = False
        if not self._has_outflow:
            diag[0] += 1.0
            pinned = True
        rows.append(np.arange(nc))
        cols.append(np.arange(nc))
        vals.append(diag)
        A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(nc, nc))
        # pyamg draws its spectral radius start vector from the global RNG
        saved = np.random.get_state()
        np.random.seed(0)
        try:
            ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric", max_coarse=50)
        finally:
            np.random.set_state(saved)
        entry = (A, ml, pinned)
        self._amg[key] = entry
        while len(self._amg) > 4:
            self._amg.popitem(last=False)
        return entry

    def _viscous_solver(self, d, dt):
        key = (d, dt)
        if key not in self._visc:
            faces = self.topo.open[d]
            L = self._lap[d][:, faces]
            M = (sp.identity(len(faces)) - dt * self.nu * L).tocsc()
            self._visc[key] = spla.splu(M)
            if len(self._visc) > 6:
                self._visc.pop(next(iter(self._visc)))
        return self._visc[key]

    def _advection(self, u, d):
        st = self.topo.stencils()[d]
        faces = st["faces"]
        uf = u[d][faces]
        h = self.grid.h
        adv = np.zeros(len(faces))
        for e in range(3):
            if e == d:
                vel = uf
            else:
                vel = 0.25 * u[e][st["trans"][e]].sum(axis=0)
            nbm, wm = st["nbr"][(e, -1)]
            nbp, wp = st["nbr"][(e, 1)]
            um = wm * u[d][nbm]
            up = wp * u[d][nbp]
            adv += np.where(vel > 0, vel * (uf - um), vel * (up - uf)) / h
        return adv

    def _apply_boundary(self, u, t):
        topo = self.topo
        U = self.inlet_speed(t)
        for d in range(3):
            k = topo.kind[d]
            u[d][(k == WALL) | (k == NONE)] = 0.0
            fin = k == INFLOW
            u[d][fin] = U * topo.sign[d][fin]

    def step(self, state: FlowState, dt) -> FlowState:
        if dt <= 0:
            raise PreconditionError("dt must be positive")
        topo = self.topo
        t1 = state.t + dt
        u = [a.copy() for a in state.u]
        self._apply_boundary(u, state.t)
        ut = [a.copy() for a in u]
        for d in range(3):
            faces = topo.open[d]
            if len(faces) == 0:
                continue
            adv = self._advection(u, d)
            if self.diffusion == "explicit":
                ut[d][faces] = u[d][faces] + dt * (self.nu * (self._lap[d] @ u[d]) - adv)
        self._apply_boundary(ut, t1)
        if self.diffusion == "implicit":
            for d in range(3):
                faces = topo.open[d]
                if len(faces) == 0:
                    continue
                adv = self._advection(u, d)
                L = self._lap[d]
                ub = ut[d].copy()
                ub[faces] = 0.0
                rhs = u[d][faces] - dt * adv + dt * self.nu * (L @ ub)
                ut[d][faces] = self._viscous_solver(d, dt).solve(rhs)
        # zero-gradient predictor on outflow faces
        for d in range(3):
            of = topo.boundary_faces(d, OUTFLOW)
            if len(of) == 0:
                continue
            cell = topo.interior_cell_of_face(d, of)
            lower, upper = topo.cell_faces(d)
            opp = np.where(topo.sign[d][of] < 0, lower[cell], upper[cell])
            ut[d][of] = ut[d][opp]

        phis, betas, damps = self._face_coeffs(state, dt)
        key = (dt, hash(state.phi.tobytes()), hash((state.inv_alpha + self.extra_inv_alpha).tobytes()))
        A, ml, pinned = self._pressure_solver(betas, key)
        cid = topo.cell_id
        nc = len(topo.cells)
        flux = np.zeros(nc)
        pout = self.outlet_pressure(t1)
        for d in range(3):
            kind = topo.kind[d]
            o = np.flatnonzero(kind == OPEN)
            f = betas[d][o] * ut[d][o]
            np.add.at(flux, cid[topo.lo[d][o]], f)
            np.add.at(flux, cid[topo.hi[d][o]], -f)
            for kk, coef in ((INFLOW, phis[d]), (OUTFLOW, betas[d])):
                bf = np.flatnonzero(kind == kk)
                if len(bf) == 0:
                    continue
                cell = cid[topo.interior_cell_of_face(d, bf)]
                # sign: +1 when the interior cell is on the hi side
                np.add.at(flux, cell, -topo.sign[d][bf] * coef[bf] * ut[d][bf])
        h = self.grid.h
        rhs = -(h / dt) * flux
        for d in range(3):
            of = topo.boundary_faces(d, OUTFLOW)
            if len(of):
                np.add.at(rhs, cid[topo.interior_cell_of_face(d, of)], betas[d][of] * pout)
        x0 = self.props.pa_to_kinematic(state.p[topo.cells])
        residuals = []
        pk = ml.solve(rhs, x0=x0, tol=self.tol, accel="cg", maxiter=self.max_iter,
                      residuals=residuals)
        bnorm = np.linalg.norm(rhs)
        if not np.all(np.isfinite(pk)):
            raise Instability("non-finite pressure")
        if bnorm > 0 and np.linalg.norm(rhs - A @ pk) > 10 * self.tol * bnorm + 1e-300:
            raise PressureSolveDiverged(
                f"pressure solve stalled at relative residual {np.linalg.norm(rhs - A @ pk) / bnorm:.2e}")
        pfull = np.zeros(topo.ncell)
        pfull[topo.cells] = pk
        for d in range(3):
            kind = topo.kind[d]
            o = np.flatnonzero(kind == OPEN)
            grad = (pfull[topo.hi[d][o]] - pfull[topo.lo[d][o]]) / h
            ut[d][o] = (ut[d][o] - dt * grad) / (1.0 + damps[d][o])
            of = np.flatnonzero(kind == OUTFLOW)
            if len(of):
                cell = topo.interior_cell_of_face(d, of)
                s = topo.sign[d][of]
                # exterior ghost sits on the -s side of the interior cell
                grad = np.where(s > 0, pfull[cell] - pout, pout - pfull[cell]) / h
                ut[d][of] = (ut[d][of] - dt * grad) / (1.0 + damps[d][of])
        umax = max(float(np.abs(a).max(initial=0.0)) for a in ut)
        if not np.isfinite(umax) or umax * dt / h > 1.0:
            raise Instability(f"velocity {umax:.3g} mm/s violates the CFL guard at t={t1:.4g}s")
        p = np.zeros(topo.ncell)
        p[topo.cells] = self.props.kinematic_to_pa(pk)
        return FlowState(ut, p, state.phi, state.inv_alpha, t1)

    # ------------------------------------------------------------------
    def run(self, state, t_end, dt=None, record_times=(), u_ref=None, callback=None):
        """Integrate to ``t_end`` with a fixed step, landing exactly on ``record_times``.

        Returns (final state, list of recorded states in time order).
        """
        if dt is None:
            dt = self.stable_dt(state, u_ref=u_ref if u_ref is not None else self.reference_speed())
        stops = sorted(t for t in record_times if state.t - 1e-12 <= t <= t_end + 1e-12)
        records = []
        eps = 1e-9 * max(dt, 1e-12)
        for stop in stops + [t_end]:
            while state.t < stop - eps:
                step = min(dt, stop - state.t)
                if stop - (state.t + step) < 0.05 * dt and stop - (state.t + step) > 0:
                    step = stop - state.t
                state = self.step(state, step)
                if callback is not None:
                    callback(state)
            if stop in stops and (not records or records[-1].t != state.t):
                records.append(state.copy())
        return state, records

    def reference_speed(self):
        """Velocity scale for the fixed time step: 1.5 times the peak inlet speed."""
        if self.inlet is None:
            return 0.0
        ts = np.linspace(0.0, 4 * CARDIAC_PERIOD, 4000)
        return 1.5 * float(np.abs(self.inlet.si(ts)).max())

    def run_cycles(self, state, n_cycles, period=CARDIAC_PERIOD, dt=None):
        """Integrate ``n_cycles`` periods and return one snapshot per cycle at peak systole."""
        if n_cycles < 1:
            raise PreconditionError("n_cycles must be at least 1")
        w = self.inlet if self.inlet is not None else constant_waveform(0.0)
        times = peak_systole_times(w, n_cycles, period, t0=state.t)
        final, recs = self.run(state, state.t + n_cycles * period, dt=dt, record_times=times)
        return final, recs

    # ------------------------------------------------------------------
    def cell_velocity(self, state):
        return self.topo.cell_velocity(state.u)

    def divergence(self, state):
        phis = [self.topo.face_average(state.phi, d) for d in range(3)]
        return self.topo.divergence(state.u, phis)

    def boundary_flux(self, state, kind):
        """Volume flux through inflow or outflow faces (mm^3/s, positive into the domain for inflow)."""
        topo = self.topo
        total = 0.0
        for d in range(3):
            bf = topo.boundary_faces(d, kind)
            pf = topo.face_average(state.phi, d)[bf]
            total += float(np.sum(topo.sign[d][bf] * pf * state.u[d][bf]))
        total *= self.grid.h ** 2
        return total if kind == INFLOW else -total


def flow_step(state, props, grid, devices=None, bc=None, dt=None, solver=None):
    """Single fractional step; builds a throwaway solver when none is passed."""
    bc = bc or {}
    if solver is None:
        solver = FlowSolver(grid, props, bc.get("inlet"), bc.get("outlet"), bc.get("wall", "free-slip"),
                            extra_inv_alpha=None if devices is None else devices.flow_resistance())
    return solver.step(state, dt if dt is not None else solver.stable_dt(state, solver.reference_speed()))


def shear_rate(topo: Topology, u):
    """gamma_dot = sqrt(2 D:D) from cell-centred velocity; one-sided next to exterior cells."""
    vel = topo.cell_velocity(u)
    h = topo.h
    intr = topo.interior.ravel()
    grad = np.zeros((topo.ncell, 3, 3))  # grad[:, i, j] = d u_i / d x_j
    for j in range(3):
        nm = topo.neighbour_cells(j, -1)
        np_ = topo.neighbour_cells(j, 1)
        okm = (nm >= 0) & intr[np.maximum(nm, 0)]
        okp = (np_ >= 0) & intr[np.maximum(np_, 0)]
        vm = vel[np.maximum(nm, 0)]
        vp = vel[np.maximum(np_, 0)]
        both = (okm & okp)[:, None]
        central = (vp - vm) / (2 * h)
        # second-order one-sided where two neighbours are available
        npp = topo.neighbour_cells(j, 2)
        nmm = topo.neighbour_cells(j, -2)
        okpp = okp & (npp >= 0) & intr[np.maximum(npp, 0)]
        okmm = okm & (nmm >= 0) & intr[np.maximum(nmm, 0)]
        vpp = vel[np.maximum(npp, 0)]
        vmm = vel[np.maximum(nmm, 0)]
        fwd = np.where(okpp[:, None], (-3 * vel + 4 * vp - vpp) / (2 * h), (vp - vel) / h)
        bwd = np.where(okmm[:, None], (3 * vel - 4 * vm + vmm) / (2 * h), (vel - vm) / h)
        g = np.where(both, central, np.where(okp[:, None], fwd, np.where(okm[:, None], bwd, 0.0)))
        grad[:, :, j] = g
    D = 0.5 * (grad + grad.transpose(0, 2, 1))
    out = np.sqrt(2.0 * np.einsum("nij,nij->n", D, D))
    out[~intr] = 0.0
    return out
