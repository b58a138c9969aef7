"""Pipeline configuration: YAML with unit-suffixed keys, validated against a fixed schema.

Every leaf has a default, so an empty file is a valid (demo) configuration.  Unknown
keys are rejected and every error names the dotted key path.
"""
from __future__ import annotations

import copy
import math
from pathlib import Path

import yaml

from .errors import ConfigError

_NUM = (int, float)


class F:
    """Schema leaf: default value, accepted types and an optional check."""

    def __init__(self, default, types=_NUM, check=None, choices=None, nullable=False, length=None):
        self.default = default
        self.types = types
        self.check = check
        self.choices = choices
        self.nullable = nullable
        self.length = length

    def validate(self, value, key):
        if value is None:
            if self.nullable:
                return None
            raise ConfigError("value is required", key)
        if self.choices is not None:
            if value not in self.choices:
                raise ConfigError(f"must be one of {', '.join(map(str, self.choices))}", key)
            return value
        if self.length is not None:
            if not isinstance(value, (list, tuple)) or len(value) != self.length:
                raise ConfigError(f"expected a list of {self.length} numbers", key)
            out = []
            for i, v in enumerate(value):
                if isinstance(v, bool) or not isinstance(v, _NUM) or not math.isfinite(v):
                    raise ConfigError("expected finite numbers", f"{key}[{i}]")
                out.append(float(v))
            value = out
        elif self.types is _NUM:
            if isinstance(value, bool) or not isinstance(value, _NUM) or not math.isfinite(value):
                raise ConfigError(f"expected a finite number, got {value!r}", key)
            value = float(value) if isinstance(self.default, float) or self.default is None else value
        elif not isinstance(value, self.types) or (self.types is int and isinstance(value, bool)):
            raise ConfigError(f"expected {getattr(self.types, '__name__', self.types)}, got {value!r}", key)
        if self.check is not None and not self.check[0](value):
            raise ConfigError(self.check[1], key)
        return value


POS = (lambda v: v > 0, "must be positive")
NONNEG = (lambda v: v >= 0, "must be non-negative")
POS_INT = (lambda v: v >= 1, "must be at least 1")
UNIT = (lambda v: any(abs(x) > 0 for x in v), "must be a non-zero vector")
FRAC = (lambda v: 0 < v <= 1, "must lie in (0, 1]")

SCHEMA = {
    "paths": {
        "mesh": F(None, str, nullable=True),
        "output_dir": F("out", str),
    },
    "geometry": {
        "builtin": F("side-sac", choices=("tube", "side-sac", "narrow-neck")),
        "tube_radius_mm": F(2.0, check=POS),
        "length_mm": F(20.0, check=POS),
        "sac_radius_mm": F(3.0, check=POS),
        "neck_radius_mm": F(1.2, check=POS),
        "spacing_mm": F(0.4, check=POS),
        # for meshes only: inlet/outlet disks and the ostium
        "inlet_center_mm": F(None, length=3, nullable=True),
        "inlet_normal": F(None, length=3, nullable=True, check=UNIT),
        "inlet_radius_mm": F(None, nullable=True, check=POS),
        "outlet_center_mm": F(None, length=3, nullable=True),
        "outlet_normal": F(None, length=3, nullable=True, check=UNIT),
        "outlet_radius_mm": F(None, nullable=True, check=POS),
        "ostium_point_mm": F(None, length=3, nullable=True),
        "ostium_normal": F(None, length=3, nullable=True, check=UNIT),
        "ostium_radius_mm": F(None, nullable=True, check=POS),
    },
    "treatment": {
        "kind": F("none", choices=("none", "coil", "fd", "stent-assisted-coil")),
        "thrombogenic": F("dome-only", choices=("dome-only", "dome-plus-coil")),
        "coil": {
            "length_mm": F(12.0, check=POS),
            "wire_diameter_mm": F(0.05, check=POS),
            "tube_diameter_mm": F(0.25, check=POS),
            "loop_diameter_mm": F(2.0, check=POS),
            "shape": F("helix", choices=("straight", "arc", "helix")),
            "edge_length_mm": F(None, nullable=True, check=POS),
            "feed_rate_mm_per_s": F(5.0, check=POS),
            "tip_depth_mm": F(None, nullable=True, check=NONNEG),
            "settle_time_s": F(10.0, check=POS),
            "ke_tol": F(1e-6, check=POS),
            "stretch_stiffness_nN": F(2000.0, check=POS),
            "bending_stiffness_nN_mm2": F(1.0, check=POS),
            "twist_stiffness_nN_mm2": F(0.8, check=POS),
            "damping_per_s": F(1.0, check=POS),
            "friction": F(0.3, check=NONNEG),
        },
        "fd": {
            "resistance_per_mm2": F(1e6, check=NONNEG),
            "thickness_mm": F(None, nullable=True, check=POS),
            "radius_scale": F(1.2, check=POS),
        },
    },
    "physics": {
        "density_kg_per_m3": F(1000.0, check=POS),
        "viscosity_pa_s": F(0.004, check=POS),
        "wall": F("free-slip", choices=("free-slip", "no-slip")),
        "inlet": F("pulsatile", choices=("pulsatile", "constant")),
        "inlet_velocity_cm_per_s": F(10.0),
        "outlet": F("pulsatile", choices=("pulsatile", "constant")),
        "outlet_pressure_mmhg": F(0.0),
        "kinetics": {
            "k_cat_per_min": F(3540.0, check=POS),
            "K_m_nM": F(3160.0, check=POS),
            "fibrinogen_nM": F(7000.0, check=POS),
            "shear_threshold_per_s": F(100.0, check=POS),
            "fibrin_threshold_nM": F(600.0, check=POS),
            "clot_resistance_per_m2": F(1e12, check=POS),
            "ambient_resistance_per_m2": F(1e-12, check=POS),
        },
        "release": {
            "A_nM_min": F(300.0, check=NONNEG),
            "t_p_min": F(3.2, check=POS),
            "peak_nM": F(160.0, check=POS),
        },
    },
    "flow": {
        "cfl": F(0.4, check=FRAC),
        "warmup_cycles": F(1, int, check=NONNEG),
        "snapshots_per_cycle": F(20, int, check=POS_INT),
    },
    "clot": {
        "enabled": F(True, bool),
        "t_end_s": F(60.0, check=POS),
        "dt_chem_s": F(0.05, check=POS),
        "coupling_interval_s": F(1.0, check=POS),
        "flow_time_s": F(None, nullable=True, check=POS),
        "plateau_window_s": F(60.0, check=POS),
    },
    "tracer": {
        "diffusivity_m2_per_s": F(1e-9, check=NONNEG),
        "cfl": F(0.4, check=FRAC),
        "injection_start_s": F(0.0, check=NONNEG),
        "injection_duration_s": F(2.0, check=POS),
        "n_cycles": F(2, int, check=POS_INT),
        "series_every_s": F(0.01, check=POS),
    },
    "dsa": {
        "axis": F("z", choices=("x", "y", "z")),
        "pitch_mm": F(None, nullable=True, check=POS),
        "k_per_mm": F(0.6, check=POS),
        "window": F(2.0, check=POS),
        "format": F("P5", choices=("P2", "P5")),
    },
    "run": {
        "threads": F(None, int, nullable=True, check=POS_INT),
        "seed": F(0, int, check=NONNEG),
    },
}


def _defaults(schema):
    return {k: _defaults(v) if isinstance(v, dict) else copy.deepcopy(v.default) for k, v in schema.items()}


def _merge(schema, data, prefix):
    out = _defaults(schema)
    if data is None:
        return out
    if not isinstance(data, dict):
        raise ConfigError("expected a mapping", prefix or None)
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in schema:
            raise ConfigError("unknown key", path)
        node = schema[key]
        out[key] = _merge(node, value, path) if isinstance(node, dict) else node.validate(value, path)
    return out


def validate(data: dict | None, base_dir=None) -> dict:
    cfg = _merge(SCHEMA, data, "")
    mesh = cfg["paths"]["mesh"]
    if mesh is not None:
        p = Path(mesh)
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        if not p.exists():
            raise ConfigError(f"file not found: {p}", "paths.mesh")
        cfg["paths"]["mesh"] = str(p)
        g = cfg["geometry"]
        for part in ("inlet", "outlet"):
            for suffix in ("center_mm", "normal", "radius_mm"):
                if g[f"{part}_{suffix}"] is None:
                    raise ConfigError("required when paths.mesh is set", f"geometry.{part}_{suffix}")
    c = cfg["treatment"]["coil"]
    if not c["wire_diameter_mm"] < c["tube_diameter_mm"] < c["loop_diameter_mm"]:
        raise ConfigError("diameters must satisfy wire < tube < loop", "treatment.coil")
    return cfg


def load_config(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    return validate(data, base_dir=path.parent)


def set_key(cfg: dict, dotted: str, value):
    """Apply one ``a.b.c=value`` override (value parsed as YAML) and revalidate."""
    parts = dotted.split(".")
    raw = copy.deepcopy(cfg)
    node = raw
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError("unknown key", dotted)
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError("unknown key", dotted)
    node[parts[-1]] = yaml.safe_load(value) if isinstance(value, str) else value
    return validate(raw)


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
