"""Thrombin / fibrinogen / fibrin transport with wall thrombin release and porosity feedback.

Concentrations are in nM, time in s (the kinetic constants and release curve are
quoted per minute and converted here).  Transport is conservative in the
porosity-weighted concentration; the Michaelis-Menten reaction is integrated
exactly per cell (thrombin is not consumed, so each cell's fibrinogen follows a
closed-form Lambert-W trajectory).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import wrightomega

from .errors import Instability, PreconditionError
from .mac import INFLOW, OUTFLOW, WALL, Topology

log = logging.getLogger(__name__)

SPECIES = ("IIa", "I", "Ia")


@dataclass(frozen=True)
class KineticParams:
    k_cat: float = 3540.0                  # 1/min
    K_m: float = 3160.0                    # nM
    Gamma: tuple = (6.79e-8, 3.25e-8, 2.59e-8)   # kg/(m s), order IIa, I, Ia
    inlet_fibrinogen: float = 7000.0       # nM
    gamma_star: float = 100.0              # 1/s
    fibrin_star: float = 600.0             # nM
    clot_resistance: float = 1e12          # 1/m^2
    ambient_resistance: float = 1e-12      # 1/m^2

    def __post_init__(self):
        vals = (self.k_cat, self.K_m, self.inlet_fibrinogen, self.gamma_star, self.fibrin_star,
                self.clot_resistance, self.ambient_resistance) + tuple(self.Gamma)
        if len(self.Gamma) != 3 or not all(np.isfinite(v) and v > 0 for v in vals):
            raise PreconditionError("kinetic parameters must be positive")
        object.__setattr__(self, "Gamma", tuple(float(g) for g in self.Gamma))

    @property
    def k_cat_s(self):
        return self.k_cat / 60.0

    def diffusivities(self, rho=1e3):
        """Gamma / rho in mm^2/s."""
        return tuple(g / rho * 1e6 for g in self.Gamma)

    @property
    def clot_inv_alpha(self):
        return self.clot_resistance * 1e-6

    @property
    def ambient_inv_alpha(self):
        return self.ambient_resistance * 1e-6


@dataclass(frozen=True)
class ThrombinReleaseParams:
    """Gumbel-shaped release curve; ``beta`` follows from A and the peak value."""

    A: float = 300.0       # nM min
    t_p: float = 3.2       # min
    peak: float = 160.0    # nM

    def __post_init__(self):
        if self.A < 0 or self.t_p <= 0 or self.peak <= 0:
            raise PreconditionError("release needs A >= 0, t_p > 0 and peak > 0")

    @property
    def beta(self):
        return self.A / (self.peak * np.e)


def release_g(t, p: ThrombinReleaseParams):
    """Release curve value (nM) at t minutes after the clot simulation starts."""
    t = np.asarray(t, dtype=float)
    if p.A == 0:
        out = np.zeros_like(t)
    else:
        z = (t - p.t_p) / p.beta
        with np.errstate(over="ignore"):
            out = p.A / p.beta * np.exp(z - np.exp(z))
    return out if out.ndim else float(out)


def release_integral(t0, t1, p: ThrombinReleaseParams):
    """Exact integral of g over [t0, t1] in nM min."""
    if p.A == 0:
        return 0.0
    with np.errstate(over="ignore"):
        G = lambda t: -p.A * np.exp(-np.exp((t - p.t_p) / p.beta))
        return float(G(t1) - G(t0))


def mm_rate(c_IIa, c_I, k: KineticParams):
    """Fibrin production rate in nM/min."""
    c_IIa = np.asarray(c_IIa, float)
    c_I = np.asarray(c_I, float)
    out = k.k_cat * c_IIa * c_I / (k.K_m + c_I)
    return out if out.ndim else float(out)


def react_exact(c_IIa, c_I, c_Ia, k: KineticParams, dt):
    """Advance the Michaelis-Menten reaction by dt seconds with thrombin held fixed.

    K_m ln c_I + c_I decreases linearly at rate k_cat c_IIa, so
    c_I(t) = K_m * omega(ln(c0/K_m) + (c0 - k_cat c_IIa t)/K_m) with omega the Wright omega function.
    """
    c_I = np.asarray(c_I, float)
    out = c_I.copy()
    m = (c_I > 1e-200) & (c_IIa > 0)
    if np.any(m):
        c0 = c_I[m]
        arg = np.log(c0 / k.K_m) + (c0 - k.k_cat_s * c_IIa[m] * dt) / k.K_m
        out[m] = np.minimum(k.K_m * np.real(wrightomega(arg)), c0)
    return out, c_Ia + (c_I - out)


@dataclass
class SpeciesState:
    c_IIa: np.ndarray
    c_I: np.ndarray
    c_Ia: np.ndarray
    t: float = 0.0

    def copy(self):
        return SpeciesState(self.c_IIa.copy(), self.c_I.copy(), self.c_Ia.copy(), self.t)

    def as_list(self):
        return [self.c_IIa, self.c_I, self.c_Ia]


def initial_species(grid, k: KineticParams):
    """Fields matching the inlet condition: fibrinogen at the inlet value, the rest zero."""
    n = int(np.prod(grid.dims))
    intr = grid.interior.ravel()
    c_I = np.where(intr, k.inlet_fibrinogen, 0.0)
    return SpeciesState(np.zeros(n), c_I, np.zeros(n), 0.0)


def release_area(topo: Topology, devices=None, mask=None):
    """Emitting face area (mm^2) credited to each cell.

    Wall faces of thrombogenic cells emit into that cell; thrombogenic device cells
    emit through their faces shared with non-device interior cells, into the neighbour.
    """
    grid = topo.grid
    if mask is None:
        mask = grid.dome_wall_mask if devices is None else devices.thrombogenic_mask
    if mask is None:
        return np.zeros(topo.ncell)
    mask = np.asarray(mask, bool).ravel()
    dev = np.zeros(topo.ncell, bool) if devices is None else np.asarray(devices.device_mask, bool).ravel()
    area = np.zeros(topo.ncell)
    a2 = grid.h ** 2
    for d in range(3):
        wf = topo.boundary_faces(d, WALL)
        cells = topo.interior_cell_of_face(d, wf)
        hit = mask[cells] & ~dev[cells]
        area += np.bincount(cells[hit], minlength=topo.ncell) * a2
        o = topo.open[d]
        lo, hi = topo.lo[d][o], topo.hi[d][o]
        m1 = mask[lo] & dev[lo] & ~dev[hi]
        m2 = mask[hi] & dev[hi] & ~dev[lo]
        area += np.bincount(hi[m1], minlength=topo.ncell) * a2
        area += np.bincount(lo[m2], minlength=topo.ncell) * a2
    return area


def apply_release_bc(state: SpeciesState, area, p: ThrombinReleaseParams, t0, t1, cell_volume, phi):
    """Add the thrombin released over [t0, t1] seconds; returns the added amount (nM mm^3).

    The wall flux equals g numerically in nM mm/s, so a face of area a delivers
    a * 60 * integral(g dt_min).
    """
    amount = release_integral(t0 / 60.0, t1 / 60.0, p) * 60.0
    if amount == 0.0 or not np.any(area):
        return 0.0
    add = area * amount
    state.c_IIa += add / (cell_volume * phi)
    return float(add.sum())


class SpeciesSolver:
    """Explicit upwind/central transport of the three species on a frozen face flux."""

    def __init__(self, topo: Topology, k: KineticParams = KineticParams(), rho=1e3):
        self.topo = topo
        self.k = k
        self.D = k.diffusivities(rho)
        self.h = topo.h
        t = topo
        self._bnd = {}
        for kind in (INFLOW, OUTFLOW):
            per = []
            for d in range(3):
                f = t.boundary_faces(d, kind)
                per.append((f, t.interior_cell_of_face(d, f), t.sign[d][f]))
            self._bnd[kind] = per
        self.inlet_values = (0.0, k.inlet_fibrinogen, 0.0)
        self.clamped_mass = 0.0

    def set_flow(self, u, phi):
        """Freeze the transport flux phi_f u_f and porosity for the following steps."""
        topo = self.topo
        self.phi = np.where(topo.interior.ravel(), np.asarray(phi, float).ravel(), 1.0)
        self.phi_f = [topo.face_average(self.phi, d) for d in range(3)]
        self.flux = [self.phi_f[d] * u[d] for d in range(3)]
        h = self.h
        adv = sum(float(np.abs(self.flux[d][topo.open[d]]).max(initial=0.0)) for d in range(3))
        for kind in (INFLOW, OUTFLOW):
            for d in range(3):
                f = self._bnd[kind][d][0]
                if len(f):
                    adv = max(adv, float(np.abs(self.flux[d][f]).max()))
        rate = adv / h + 6 * max(self.D) / h ** 2
        self.max_dt = 0.5 * float(self.phi[topo.cells].min()) / rate

    def transport_rhs(self, c, D, cin):
        """d(phi c)/dt from advection and diffusion, per cell."""
        topo = self.topo
        n = topo.ncell
        h = self.h
        out = np.zeros(n)
        for d in range(3):
            o = topo.open[d]
            if len(o):
                a, b = topo.lo[d][o], topo.hi[d][o]
                F = self.flux[d][o]
                fl = np.where(F >= 0, F * c[a], F * c[b]) - D * self.phi_f[d][o] * (c[b] - c[a]) / h
                out -= np.bincount(a, fl, minlength=n)
                out += np.bincount(b, fl, minlength=n)
            f, cell, s = self._bnd[INFLOW][d]
            if len(f):
                un = s * self.flux[d][f]
                val = np.where(un > 0, cin, c[cell])
                gain = un * val + D * self.phi_f[d][f] * (cin - c[cell]) / h
                out += np.bincount(cell, gain, minlength=n)
            f, cell, s = self._bnd[OUTFLOW][d]
            if len(f):
                out += np.bincount(cell, s * self.flux[d][f] * c[cell], minlength=n)
        return out / h

    def transport(self, state: SpeciesState, dt):
        nsub = max(1, int(np.ceil(dt / self.max_dt - 1e-12)))
        sub = dt / nsub
        cells = self.topo.cells
        fields = state.as_list()
        for _ in range(nsub):
            for i, c in enumerate(fields):
                r = self.transport_rhs(c, self.D[i], self.inlet_values[i])
                new = c + sub * r / self.phi
                neg = new < 0
                if np.any(neg):
                    lost = float(-np.sum(new[neg] * self.phi[neg]))
                    self.clamped_mass += lost
                    total = float(np.sum(np.abs(new[cells]) * self.phi[cells]))
                    if lost > 1e-6 * max(total, 1e-300):
                        raise Instability(f"negative {SPECIES[i]} concentration beyond clamp tolerance")
                    new[neg] = 0.0
                fields[i] = new
        state.c_IIa, state.c_I, state.c_Ia = fields
        return state

    def react(self, state: SpeciesState, dt):
        state.c_I, state.c_Ia = react_exact(state.c_IIa, state.c_I, state.c_Ia, self.k, dt)
        return state


def species_step(state, flow, grid, k, dt, release=None, area=None, solver=None, rho=1e3):
    """Advance transport, release and reaction by dt seconds (returns a new state)."""
    if solver is None:
        solver = SpeciesSolver(Topology(grid), k, rho)
        solver.set_flow(flow.u, flow.phi)
    new = state.copy()
    solver.transport(new, dt)
    if release is not None and area is not None:
        apply_release_bc(new, area, release, state.t, state.t + dt, grid.cell_volume, solver.phi)
    solver.react(new, dt)
    new.t = state.t + dt
    for c in new.as_list():
        if not np.all(np.isfinite(c)):
            raise Instability("non-finite species concentration")
    return new


def clot_mask(c_Ia, gamma_dot, k: KineticParams):
    return (np.asarray(c_Ia) >= k.fibrin_star) & (np.asarray(gamma_dot) <= k.gamma_star)


def update_clot(c_Ia, gamma_dot, k: KineticParams):
    """Porosity and viscous resistance (1/mm^2) from fibrin and shear."""
    c_Ia = np.asarray(c_Ia, float)
    g = np.asarray(gamma_dot, float)
    low = g <= k.gamma_star
    phi = np.where(low, np.maximum(0.75, 1.0 - 0.25 * c_Ia / k.fibrin_star), 1.0)
    inv_alpha = np.where(clot_mask(c_Ia, g, k), k.clot_inv_alpha, k.ambient_inv_alpha)
    return phi, inv_alpha


@dataclass
class ClotSchedule:
    t_end: float = 600.0          # s of chemistry time
    dt_chem: float = 0.01         # s
    coupling_interval: float = 1.0
    flow_time: float | None = None    # s of flow per refresh; one cardiac period if None
    refresh_fraction: float = 0.005
    plateau_window: float = 60.0  # s
    plateau_tol: float = 1e-3
    plateau_after: float | None = None   # s; defaults to the end of the release pulse

    def __post_init__(self):
        if not (self.t_end > 0 and self.dt_chem > 0 and self.coupling_interval >= self.dt_chem):
            raise PreconditionError("clot schedule needs t_end > 0 and coupling_interval >= dt_chem > 0")


@dataclass
class ClotResult:
    rows: list = field(default_factory=list)   # (t, clot_volume_mm3, total_fibrin, clamped_mass)
    species: SpeciesState | None = None
    phi: np.ndarray | None = None
    inv_alpha: np.ndarray | None = None
    gamma_dot: np.ndarray | None = None
    flow_state: object = None
    flow_refreshes: int = 0

    @property
    def clot_volume(self):
        return np.array([r[1] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "clot_volume_mm3", "total_fibrin", "clamped_mass"])
            for t, v, f, c in self.rows:
                w.writerow([f"{t:.6f}", f"{v:.9e}", f"{f:.9e}", f"{c:.9e}"])


def _mean_flow(flow_solver, state, duration):
    """Run the flow for ``duration`` and return (final state, time-mean face velocity)."""
    acc = [np.zeros_like(a) for a in state.u]
    count = [0]

    def cb(st):
        for a, b in zip(acc, st.u):
            a += b
        count[0] += 1

    state, _ = flow_solver.run(state, state.t + duration, callback=cb)
    n = max(count[0], 1)
    return state, [a / n for a in acc]


def run_clot_sim(grid, devices=None, props=None, k: KineticParams = KineticParams(),
                 release: ThrombinReleaseParams = ThrombinReleaseParams(),
                 schedule: ClotSchedule = ClotSchedule(), flow_solver=None, flow_state=None,
                 progress=None):
    """Quasi-steady coupling of flow and chemistry; returns the clot time series."""
    from .flow import CARDIAC_PERIOD, FluidProps, shear_rate

    props = props or FluidProps()
    topo = flow_solver.topo if flow_solver is not None else Topology(grid)
    intr = grid.interior.ravel()
    dev = np.zeros(topo.ncell, bool) if devices is None else np.asarray(devices.device_mask, bool).ravel()
    area = release_area(topo, devices)
    solver = SpeciesSolver(topo, k, props.rho)
    state = initial_species(grid, k)
    phi = np.ones(topo.ncell)
    inv_alpha = np.full(topo.ncell, k.ambient_inv_alpha)
    res = ClotResult()

    def refresh_flow(fs):
        if flow_solver is None:
            u = [np.zeros(topo.nfaces(d)) for d in range(3)]
            return fs, u
        fs.phi = phi.copy()
        fs.inv_alpha = inv_alpha.copy()
        dur = schedule.flow_time if schedule.flow_time is not None else CARDIAC_PERIOD
        res.flow_refreshes += 1
        return _mean_flow(flow_solver, fs, dur)

    if flow_solver is not None and flow_state is None:
        flow_state = flow_solver.initial_state(inv_alpha=inv_alpha)
    flow_state, u = refresh_flow(flow_state)
    gdot = shear_rate(topo, u)
    solver.set_flow(u, phi)
    clot = clot_mask(state.c_Ia, gdot, k) & intr
    plateau_after = schedule.plateau_after
    if plateau_after is None:
        plateau_after = 60.0 * (release.t_p + 6 * release.beta) if release.A > 0 else 0.0

    def record():
        vol = float(np.count_nonzero(clot & intr & ~dev)) * grid.cell_volume
        fib = float(np.sum(state.c_Ia[intr] * phi[intr]) * grid.cell_volume)
        res.rows.append((state.t, vol, fib, solver.clamped_mass))

    record()
    n_sub = int(round(schedule.coupling_interval / schedule.dt_chem))
    dtc = schedule.coupling_interval / n_sub
    n_window = max(1, int(round(schedule.plateau_window / schedule.coupling_interval)))
    step = 0
    while state.t < schedule.t_end - 1e-9:
        for _ in range(n_sub):
            t0, t1 = step * dtc, (step + 1) * dtc
            solver.transport(state, dtc)
            apply_release_bc(state, area, release, t0, t1, grid.cell_volume, solver.phi)
            solver.react(state, dtc)
            step += 1
            state.t = t1
        new_phi, new_ia = update_clot(state.c_Ia, gdot, k)
        new_phi = np.where(intr, new_phi, 1.0)
        new_ia = np.where(intr, new_ia, k.ambient_inv_alpha)
        new_clot = clot_mask(state.c_Ia, gdot, k) & intr
        changed = np.count_nonzero(new_clot != clot)
        # keep the phi-weighted mass unchanged when porosity moves
        for c in state.as_list():
            c *= np.where(intr, phi / new_phi, 1.0)
        phi, inv_alpha, clot = new_phi, new_ia, new_clot
        if flow_solver is not None and changed > schedule.refresh_fraction * len(topo.cells):
            flow_state, u = refresh_flow(flow_state)
            gdot = shear_rate(topo, u)
        solver.set_flow(u, phi)
        record()
        if progress is not None:
            progress(res.rows[-1])
        vols = res.clot_volume
        if state.t >= plateau_after and len(vols) > n_window:
            win = vols[-(n_window + 1):]
            ref = max(abs(win[-1]), 1e-300)
            if win[-1] == 0 and win.max() == 0 or (win.max() - win.min()) / ref < schedule.plateau_tol:
                break
    res.species = state
    res.phi = phi
    res.inv_alpha = inv_alpha
    res.gamma_dot = gdot
    res.flow_state = flow_state
    return res
