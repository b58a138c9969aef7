"""Legacy VTK structured-points files (ASCII cell data) with a JSON sidecar."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError


def write_vtk(path, grid, arrays: dict, meta: dict | None = None):
    """Write cell arrays (scalars of shape grid.dims, or (..., 3) vectors) for ``grid``.

    Values are laid out x-fastest as VTK expects.  Metadata goes to ``<path>.json``.
    """
    path = Path(path)
    nx, ny, nz = grid.dims
    lines = ["# vtk DataFile Version 3.0", "aneurysm_vt fields", "ASCII", "DATASET STRUCTURED_POINTS",
             f"DIMENSIONS {nx + 1} {ny + 1} {nz + 1}",
             "ORIGIN {:.17g} {:.17g} {:.17g}".format(*grid.origin),
             f"SPACING {grid.h:.17g} {grid.h:.17g} {grid.h:.17g}",
             f"CELL_DATA {nx * ny * nz}"]
    for name, a in arrays.items():
        a = np.asarray(a)
        if a.ndim == 1:
            a = a.reshape(grid.dims)
        if a.shape == tuple(grid.dims):
            flat = a.transpose(2, 1, 0).ravel()
            if a.dtype == bool:
                flat = flat.astype(np.uint8)
            kind = "int" if flat.dtype.kind in "biu" else "double"
            lines += [f"SCALARS {name} {kind} 1", "LOOKUP_TABLE default"]
            lines += [str(int(v)) for v in flat] if kind == "int" else [f"{float(v):.17g}" for v in flat]
        elif a.shape == tuple(grid.dims) + (3,):
            flat = a.transpose(2, 1, 0, 3).reshape(-1, 3)
            lines.append(f"VECTORS {name} double")
            lines += [f"{x:.17g} {y:.17g} {z:.17g}" for x, y, z in flat]
        else:
            raise ValueError(f"array {name!r} has shape {a.shape}, grid is {grid.dims}")
    path.write_text("\n".join(lines) + "\n")
    if meta is not None:
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_vtk(path):
    """Return (dims, origin, h, arrays) from a file written by :func:`write_vtk`."""
    text = Path(path).read_text().split("\n")
    try:
        header = {ln.split()[0]: ln.split()[1:] for ln in text[3:8] if ln}
        dims = tuple(int(v) - 1 for v in header["DIMENSIONS"])
        origin = np.array([float(v) for v in header["ORIGIN"]])
        h = float(header["SPACING"][0])
        n = int(header["CELL_DATA"][0])
    except (KeyError, IndexError, ValueError) as exc:
        raise ParseError(f"{path}: not a structured-points file") from exc
    arrays = {}
    i = 8
    while i < len(text):
        parts = text[i].split()
        if not parts:
            i += 1
            continue
        if parts[0] == "SCALARS":
            name, kind = parts[1], parts[2]
            vals = text[i + 2:i + 2 + n]
            a = np.array(vals, dtype=np.int64 if kind == "int" else float)
            arrays[name] = a.reshape(dims[::-1]).transpose(2, 1, 0)
            i += 2 + n
        elif parts[0] == "VECTORS":
            vals = np.array([ln.split() for ln in text[i + 1:i + 1 + n]], float)
            arrays[parts[1]] = vals.reshape(dims[::-1] + (3,)).transpose(2, 1, 0, 3)
            i += 1 + n
        else:
            raise ParseError(f"{path}: unexpected line {text[i]!r}")
    return dims, origin, h, arrays


def read_meta(path):
    p = Path(str(path) + ".json")
    return json.loads(p.read_text()) if p.exists() else {}
