"""Stage orchestration: deploy -> clot -> flow -> tracer -> dsa -> report, with resume.

Each stage writes into ``<output>/<stage>/`` and finishes with a ``.done`` marker that
records a hash of the config sections it depends on plus the checksum of every file it
wrote.  A stage is skipped when its marker is intact, its files still match and no
upstream stage ran in this invocation.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import SimulationError

log = logging.getLogger(__name__)

STAGES = ("deploy", "clot", "flow", "tracer", "dsa", "report")
_DEPENDS = {
    "deploy": ("paths", "geometry", "treatment", "run"),
    "clot": ("physics", "clot", "flow"),
    "flow": ("physics", "flow"),
    "tracer": ("tracer",),
    "dsa": ("dsa",),
    "report": (),
}


class StageError(SimulationError):
    def __init__(self, stage, exc):
        self.stage = stage
        self.cause = exc
        super().__init__(f"stage {stage!r} failed: {exc}")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _stage_key(cfg, stage):
    keys = []
    for s in STAGES[:STAGES.index(stage) + 1]:
        keys += [k for k in _DEPENDS[s] if k not in keys]
    blob = {k: cfg[k] for k in keys if k != "run"}
    if "run" in keys:
        blob["run"] = {"seed": cfg["run"]["seed"]}   # the thread count never changes results
    return hashlib.sha256(json.dumps(blob, sort_keys=True).encode()).hexdigest()


def _marker_ok(out: Path, stage, key):
    marker = out / stage / ".done"
    try:
        data = json.loads(marker.read_text())
        if data["key"] != key:
            return False
        return all(sha256(out / stage / f) == c for f, c in data["files"].items())
    except (OSError, ValueError, KeyError, TypeError):
        return False


def _write_marker(out: Path, stage, key):
    d = out / stage
    files = sorted(p.name for p in d.iterdir() if p.is_file() and p.name != ".done")
    data = {"key": key, "files": {f: sha256(d / f) for f in files}}
    (d / ".done").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def write_manifest(out: Path):
    lines = []
    for stage in STAGES:
        d = out / stage
        if not d.is_dir():
            continue
        for p in sorted(d.iterdir()):
            if p.is_file() and p.name != ".done":
                lines.append(f"{stage}/{p.name} {sha256(p)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return lines


def _save_arrays(d: Path, arrays: dict):
    for name, a in arrays.items():
        np.save(d / f"{name}.npy", np.ascontiguousarray(a), allow_pickle=False)


def _load(d: Path, name):
    return np.load(d / f"{name}.npy", allow_pickle=False)


# --------------------------------------------------------------------------
# shared builders
# --------------------------------------------------------------------------

def build_domain(cfg):
    """Voxel grid from the configured mesh or built-in vessel."""
    from .geometry import Disk, OstiumSpec, load_surface, tag_sac, voxelize
    from .shapes import Vessel, build_grid

    g = cfg["geometry"]
    h = g["spacing_mm"]
    if cfg["paths"]["mesh"]:
        mesh = load_surface(cfg["paths"]["mesh"])
        inlet = Disk(g["inlet_center_mm"], g["inlet_normal"], g["inlet_radius_mm"])
        outlet = Disk(g["outlet_center_mm"], g["outlet_normal"], g["outlet_radius_mm"])
        grid = voxelize(mesh, h, inlet, outlet)
        if g["ostium_point_mm"] is not None:
            grid = tag_sac(grid, OstiumSpec(g["ostium_point_mm"], g["ostium_normal"], g["ostium_radius_mm"]))
        return grid
    kind = {"tube": "tube", "side-sac": "side-sac", "narrow-neck": "narrow-neck"}[g["builtin"]]
    v = Vessel(kind, g["tube_radius_mm"], g["length_mm"], g["sac_radius_mm"], g["neck_radius_mm"])
    return build_grid(v, h)


def fluid_props(cfg):
    from .flow import FluidProps
    p = cfg["physics"]
    return FluidProps(p["density_kg_per_m3"], p["viscosity_pa_s"])


def kinetic_params(cfg):
    from .coagulation import KineticParams
    k = cfg["physics"]["kinetics"]
    return KineticParams(k["k_cat_per_min"], k["K_m_nM"], inlet_fibrinogen=k["fibrinogen_nM"],
                         gamma_star=k["shear_threshold_per_s"], fibrin_star=k["fibrin_threshold_nM"],
                         clot_resistance=k["clot_resistance_per_m2"],
                         ambient_resistance=k["ambient_resistance_per_m2"])


def release_params(cfg):
    from .coagulation import ThrombinReleaseParams
    r = cfg["physics"]["release"]
    return ThrombinReleaseParams(r["A_nM_min"], r["t_p_min"], r["peak_nM"])


def flow_solver(cfg, grid, devices=None):
    from .flow import (PULSATILE_INLET_VELOCITY, PULSATILE_OUTLET_PRESSURE, FlowSolver, constant_waveform)
    p = cfg["physics"]
    inlet = PULSATILE_INLET_VELOCITY if p["inlet"] == "pulsatile" else constant_waveform(p["inlet_velocity_cm_per_s"])
    outlet = (PULSATILE_OUTLET_PRESSURE if p["outlet"] == "pulsatile"
              else constant_waveform(p["outlet_pressure_mmhg"], "outlet-pressure"))
    extra = None if devices is None else devices.flow_resistance(kinetic_params(cfg).clot_inv_alpha)
    return FlowSolver(grid, fluid_props(cfg), inlet, outlet, p["wall"], cfl=cfg["flow"]["cfl"],
                      extra_inv_alpha=extra)


def load_devices(out: Path, grid):
    from .devices import DeviceField
    d = out / "deploy"
    return DeviceField(_load(d, "device_mask").astype(bool), _load(d, "shell_resistance"),
                       _load(d, "thrombogenic_mask").astype(bool))


# --------------------------------------------------------------------------
# stages
# --------------------------------------------------------------------------

def stage_deploy(cfg, out: Path, grid):
    from .coil import GridSDF, Insertion, ObstacleSet, RodMaterial, deploy, export_tube, make_coil
    from .devices import DeviceField, fd_shell, rasterize_coil, tag_thrombogenic
    from .geometry import write_polyline_obj, write_stl
    from .shapes import disk_mesh
    from .vtkio import write_vtk

    d = out / "deploy"
    t = cfg["treatment"]
    kind = t["kind"]
    devices = DeviceField.empty(grid)
    meta = {"treatment": kind}
    if kind in ("coil", "stent-assisted-coil"):
        if grid.ostium is None:
            raise SimulationError("coiling needs a sac (ostium) on the grid")
        c = t["coil"]
        radii = (c["wire_diameter_mm"], c["tube_diameter_mm"], c["loop_diameter_mm"])
        coil = make_coil(c["length_mm"], radii, c["shape"], c["edge_length_mm"])
        m = RodMaterial(c["stretch_stiffness_nN"], ((c["bending_stiffness_nN_mm2"], 0.0),
                                                    (0.0, c["bending_stiffness_nN_mm2"])),
                        c["twist_stiffness_nN_mm2"], c["damping_per_s"], mu_friction=c["friction"])
        obs = ObstacleSet([GridSDF.from_grid(grid, grid.sac_mask)])
        os_ = grid.ostium
        depth = c["tip_depth_mm"]
        if depth is None:
            depth = 2 * grid.h + radii[1]
        tip = os_.point + depth * os_.normal
        res = deploy(coil, m, obs, Insertion(tuple(tip), tuple(os_.normal), c["feed_rate_mm_per_s"]),
                     ke_tol=c["ke_tol"], settle_time=c["settle_time_s"])
        res.write_log(d / "deploy_log.txt")
        write_polyline_obj(res.state.x, d / "coil_centerline.obj")
        write_stl(export_tube(res.state), d / "coil_tube.stl")
        devices = devices.combine(rasterize_coil(grid, res.state))
        meta["coil_vertices"] = int(res.state.n)
    if kind in ("fd", "stent-assisted-coil"):
        if grid.ostium is None:
            raise SimulationError("a flow diverter needs a sac (ostium) on the grid")
        f = t["fd"]
        os_ = grid.ostium
        patch = disk_mesh(os_.point, os_.normal, f["radius_scale"] * os_.radius)
        devices = devices.combine(fd_shell(grid, patch, f["resistance_per_mm2"], f["thickness_mm"]))
    devices = tag_thrombogenic(grid, devices, t["thrombogenic"])
    _save_arrays(d, {"device_mask": devices.device_mask.astype(np.uint8),
                     "shell_resistance": devices.shell_resistance,
                     "thrombogenic_mask": devices.thrombogenic_mask.astype(np.uint8)})
    meta.update(h_mm=grid.h, dims=list(grid.dims), device_cells=devices.device_volume_cells)
    write_vtk(d / "grid.vtk", grid, {"cell_class": grid.cell_class, "sac_mask": grid.sac_mask,
                                     "dome_wall_mask": grid.dome_wall_mask,
                                     "device_mask": devices.device_mask,
                                     "shell_resistance": devices.shell_resistance,
                                     "thrombogenic_mask": devices.thrombogenic_mask}, meta)


def stage_clot(cfg, out: Path, grid):
    from .coagulation import ClotSchedule, run_clot_sim
    from .vtkio import write_vtk

    d = out / "clot"
    k = kinetic_params(cfg)
    devices = load_devices(out, grid)
    n = grid.cell_class.size
    c = cfg["clot"]
    if not c["enabled"]:
        _save_arrays(d, {"phi": np.ones(n), "inv_alpha": np.full(n, k.ambient_inv_alpha),
                         "clot_mask": np.zeros(n, np.uint8)})
        (d / "clot.csv").write_text("t,clot_volume_mm3,total_fibrin,clamped_mass\n")
        return
    fs = flow_solver(cfg, grid, devices)
    sched = ClotSchedule(c["t_end_s"], c["dt_chem_s"], c["coupling_interval_s"], c["flow_time_s"],
                         plateau_window=c["plateau_window_s"])
    res = run_clot_sim(grid, devices, fluid_props(cfg), k, release_params(cfg), sched, flow_solver=fs)
    res.write_csv(d / "clot.csv")
    clot = (res.inv_alpha >= k.clot_inv_alpha) & grid.interior.ravel()
    _save_arrays(d, {"phi": res.phi, "inv_alpha": res.inv_alpha, "clot_mask": clot.astype(np.uint8)})
    sp = res.species
    write_vtk(d / "clot.vtk", grid, {"c_IIa": sp.c_IIa, "c_I": sp.c_I, "c_Ia": sp.c_Ia, "phi": res.phi,
                                     "clot": clot, "gamma_dot": res.gamma_dot},
              {"t_s": float(sp.t), "flow_refreshes": res.flow_refreshes})


def stage_flow(cfg, out: Path, grid):
    from .flow import CARDIAC_PERIOD
    from .vtkio import write_vtk

    d = out / "flow"
    devices = load_devices(out, grid)
    fs = flow_solver(cfg, grid, devices)
    cd = out / "clot"
    state = fs.initial_state(_load(cd, "phi"), _load(cd, "inv_alpha"))
    f = cfg["flow"]
    n_snap = f["snapshots_per_cycle"]
    t0 = f["warmup_cycles"] * CARDIAC_PERIOD
    if t0 > 0:
        state, _ = fs.run(state, t0)
    times = t0 + CARDIAC_PERIOD * np.arange(n_snap) / n_snap
    # the cycle start is recorded as the current state itself
    recs = [state.copy()]
    state, more = fs.run(state, t0 + CARDIAC_PERIOD * (n_snap - 1) / n_snap, record_times=list(times[1:]))
    recs += more
    if len(recs) != n_snap:
        raise SimulationError(f"expected {n_snap} flow snapshots, got {len(recs)}")
    _save_arrays(d, {"times": np.array([r.t for r in recs]),
                     **{f"u{ax}": np.stack([r.u[ax] for r in recs]) for ax in range(3)},
                     "phi": state.phi})
    last = recs[-1]
    write_vtk(d / "flow_last.vtk", grid, {"velocity": fs.cell_velocity(last).reshape(grid.dims + (3,)),
                                          "pressure_pa": last.p, "phi": last.phi},
              {"t_s": float(last.t)})


def stage_tracer(cfg, out: Path, grid):
    from .flow import CARDIAC_PERIOD, PULSATILE_INLET_VELOCITY, constant_waveform, peak_systole_times
    from .mac import Topology
    from .tracer import InjectionProtocol, TracerParams, VelocityReplay, run_tracer
    from .vtkio import write_vtk

    d = out / "tracer"
    fd = out / "flow"
    times = _load(fd, "times")
    fields = [[u[i] for u in (_load(fd, "u0"), _load(fd, "u1"), _load(fd, "u2"))] for i in range(len(times))]
    topo = Topology(grid, cfg["physics"]["wall"])
    phi = _load(fd, "phi")
    phi_faces = [topo.face_average(phi, ax) for ax in range(3)]
    replay = VelocityReplay(times, fields, CARDIAC_PERIOD, phi_faces)
    t = cfg["tracer"]
    params = TracerParams(t["diffusivity_m2_per_s"], t["cfl"])
    proto = InjectionProtocol(t["injection_start_s"], t["injection_duration_s"])
    w = PULSATILE_INLET_VELOCITY if cfg["physics"]["inlet"] == "pulsatile" else constant_waveform(1.0)
    peaks = peak_systole_times(w, t["n_cycles"])
    t_end = t["n_cycles"] * CARDIAC_PERIOD
    state, res = run_tracer(grid, replay, params, proto, t_end, peaks, t["series_every_s"], topo=topo)
    res.write_series(d / "tracer_series.csv")
    snaps = np.stack([c for _, c in res.snapshots])
    _save_arrays(d, {"snapshot_times": np.array([s for s, _ in res.snapshots]), "snapshots": snaps})
    for i, (ts, C) in enumerate(res.snapshots):
        write_vtk(d / f"tracer_{i:02d}.vtk", grid, {"C": C}, {"t_s": float(ts)})


def stage_dsa(cfg, out: Path, grid):
    from .dsa import ProjectionSetup, render_dsa

    d = out / "dsa"
    c = cfg["dsa"]
    setup = ProjectionSetup.along_axis(grid, "xyz".index(c["axis"]), c["pitch_mm"], c["k_per_mm"])
    snaps = _load(out / "tracer", "snapshots")
    for i, C in enumerate(snaps):
        img = render_dsa(C, grid, setup)
        img.write_pgm(d / f"dsa_{i:02d}.pgm", c["window"], binary=c["format"] == "P5")
        img.write_raw(d / f"dsa_{i:02d}.raw")


def stage_report(cfg, out: Path, grid):
    from .dsa import DsaImage
    from .occlusion import (OcclusionReport, format_table, occlusion_percentages, rrc_classify,
                            write_report_csv)

    d = out / "report"
    devices = load_devices(out, grid)
    clot = _load(out / "clot", "clot_mask").astype(bool).reshape(grid.dims)
    name = cfg["treatment"]["kind"]
    if grid.sac_mask.any():
        rep = occlusion_percentages(grid.sac_mask, clot, devices.device_mask, grid.h)
        rep.rrc_class = rrc_classify(grid.sac_mask, clot | devices.device_mask, grid.ostium, grid)
    else:
        # no sac to occlude: volumes are reported over the whole vessel, percentages are zero
        v = grid.cell_volume
        rep = OcclusionReport(0.0, float(np.count_nonzero(clot & ~devices.device_mask)) * v,
                              float(np.count_nonzero(devices.device_mask)) * v, 0.0, 0.0, 0.0, None, 0.0)
    write_report_csv({name: rep}, d / "report.csv")
    text = format_table({name: rep})
    text += f"Raymond-Roy class: {rep.rrc_class or 'n/a (no sac)'}\n"
    frames = sorted((out / "dsa").glob("dsa_*.raw"))
    if frames:
        imgs = [DsaImage.read_raw(p) for p in frames]
        text += "Projected contrast per frame (mm^2): " + " ".join(f"{im.R.sum() * im.pitch ** 2:.6g}" for im in imgs) + "\n"
    (d / "report.txt").write_text(text)


_RUNNERS = {"deploy": stage_deploy, "clot": stage_clot, "flow": stage_flow, "tracer": stage_tracer,
            "dsa": stage_dsa, "report": stage_report}


def apply_threads(n):
    """Cap BLAS/OpenMP pools; results do not depend on the count."""
    if n is None:
        return None
    from threadpoolctl import threadpool_limits
    os.environ["OMP_NUM_THREADS"] = str(n)
    return threadpool_limits(limits=int(n))


def run_pipeline(cfg: dict, output=None, force=False, stages=None, threads=None):
    """Run (or resume) the stages in order; returns (ran stage names, manifest lines)."""
    out = Path(output or cfg["paths"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    threads = threads if threads is not None else cfg["run"]["threads"]
    limiter = apply_threads(threads)
    np.random.seed(cfg["run"]["seed"])
    wanted = STAGES if stages is None else tuple(s for s in STAGES if s in stages)
    last = max(STAGES.index(s) for s in wanted)
    grid = build_domain(cfg)
    (out / "config.yaml").write_text(cfgmod.dump_config(cfg))
    ran = []
    dirty = False
    try:
        for stage in STAGES[:last + 1]:
            key = _stage_key(cfg, stage)
            explicit = stage in wanted
            if not dirty and _marker_ok(out, stage, key) and not (force and explicit):
                continue
            d = out / stage
            d.mkdir(exist_ok=True)
            for p in d.iterdir():
                if p.is_file():
                    p.unlink()
            log.info("running stage %s", stage)
            try:
                _RUNNERS[stage](cfg, out, grid)
            except SimulationError as exc:
                raise StageError(stage, exc) from exc
            _write_marker(out, stage, key)
            ran.append(stage)
            dirty = True
    finally:
        if limiter is not None:
            limiter.restore_original_limits()
    return ran, write_manifest(out)


def read_report(out):
    """(treatment, OcclusionReport) from a finished output directory."""
    import csv

    from .occlusion import OcclusionReport

    path = Path(out) / "report" / "report.csv"
    try:
        with open(path, newline="") as fh:
            row = next(csv.DictReader(fh))
    except (OSError, StopIteration) as exc:
        raise SimulationError(f"no report in {out}") from exc
    name = row.pop("treatment")
    vals = {k: (v or None if k == "rrc_class" else float(v)) for k, v in row.items()}
    return name, OcclusionReport(**vals)
