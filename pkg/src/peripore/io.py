"""Problem-file ingestion, snapshot serialization, and run reporting.

Decks are JSON (schema version 1); pressures may be declared in kPa and
are converted to Pa at load. Snapshots are legacy ASCII VTK point clouds
plus a CSV sidecar of scalar time series. All floats are written with 17
significant digits so a write/read round trip is bit exact, and nothing
is randomized: identical decks give identical output bytes.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields

import numpy as np

from .core import MaterialModel, SolverConfig
from .problem import (Problem, add_crack, drive_solid, fix_solid,
                      make_column_problem, prescribe_pressure, pressure_ramp,
                      select_box, set_geostatic_stress, set_linear_pressure,
                      set_uniform_pressure, set_uniform_stress, shake_solid)

FMT = "%.17g"

# deck fields carrying pressure units (Pa internally, kPa allowed in decks)
_MATERIAL_PRESSURE_FIELDS = ("K", "mu_s", "K_w", "s_a")
_SCHEMA_VERSION = 1


class ProblemFormatError(Exception):
    """Deck schema violation with a field-path diagnostic."""


@dataclass
class Snapshot:
    """Serialized field state at one time instant."""

    time: float
    position: np.ndarray
    u: np.ndarray
    v: np.ndarray
    pw: np.ndarray
    sr: np.ndarray
    porosity: np.ndarray
    damage: np.ndarray
    sigma_eff: np.ndarray
    interface: np.ndarray

    @classmethod
    def from_fields(cls, d):
        return cls(**{f.name: d[f.name] for f in fields(cls)})

    def __post_init__(self):
        n = self.position.shape[0]
        for f in fields(self):
            if f.name == "time":
                continue
            arr = getattr(self, f.name)
            if arr.shape[0] != n:
                raise ValueError(f"snapshot field {f.name} has wrong length")


# ----------------------------------------------------------------------
# problem decks
# ----------------------------------------------------------------------

def load_problem(path):
    """Load and validate a JSON problem deck; returns a Problem.

    Raises ProblemFormatError with a field diagnostic on schema errors,
    or if the assembled problem fails validation.
    """
    with open(path) as fh:
        try:
            deck = json.load(fh)
        except json.JSONDecodeError as err:
            raise ProblemFormatError(f"{path}: not valid JSON ({err})")
    return build_problem(deck, name=str(path))


def _need(d, key, where):
    if key not in d:
        raise ProblemFormatError(f"missing '{where}.{key}' block")
    return d[key]


def build_problem(deck, name="<deck>"):
    version = deck.get("version")
    if version != _SCHEMA_VERSION:
        raise ProblemFormatError(
            f"{name}: unsupported schema version {version!r}"
        )
    unit = deck.get("units", {}).get("pressure", "Pa")
    if unit not in ("Pa", "kPa"):
        raise ProblemFormatError(f"{name}: unknown pressure unit '{unit}'")
    scale = 1e3 if unit == "kPa" else 1.0

    geo = _need(deck, "geometry", name)
    spacing = float(_need(geo, "spacing", "geometry"))
    mode = geo.get("mode", "3d")
    thickness = float(geo.get("thickness", 1.0))
    box = _need(geo, "box", "geometry")

    mats_spec = _need(deck, "materials", name)
    if not mats_spec:
        raise ProblemFormatError(f"{name}: missing material block")
    materials = []
    for k, m in enumerate(mats_spec):
        m = dict(m)
        m.pop("_note", None)
        region = m.pop("region", None)
        try:
            for f in _MATERIAL_PRESSURE_FIELDS:
                if f in m:
                    m[f] = m[f] * scale
            if "a1" in m:
                m["a1"] = m["a1"] / scale  # 1/pressure
            mat = MaterialModel(**m)
        except TypeError as err:
            raise ProblemFormatError(f"{name}: materials[{k}]: {err}")
        mat._region = region
        materials.append(mat)

    cfg_spec = dict(_need(deck, "config", name))
    try:
        config = SolverConfig(**{k: (tuple(v) if k == "gravity" else v)
                                 for k, v in cfg_spec.items()})
    except TypeError as err:
        raise ProblemFormatError(f"{name}: config: {err}")

    if mode == "plane_strain":
        width = box[1][0] - box[0][0]
        height = box[1][1] - box[0][1]
        prob = make_column_problem(width, height, spacing, materials[0],
                                   config, thickness=thickness,
                                   mode="plane_strain",
                                   title=deck.get("title", ""))
        prob.particles.x_ref[:, 0] += box[0][0]
        prob.particles.x_ref[:, 1] += box[0][1]
    else:
        from .discretization import build_lattice
        from .core import Particles

        pos, vol, _ = build_lattice(box[0], box[1], spacing)
        pts = Particles.zeros(len(pos))
        pts.x_ref[:] = pos
        pts.volume_ref[:] = vol
        pts.volume[:] = vol
        prob = Problem(particles=pts, materials=[materials[0]], config=config,
                       dim=3, thickness=1.0, spacing=spacing,
                       title=deck.get("title", ""))
    prob.materials = materials
    for k, mat in enumerate(materials):
        region = getattr(mat, "_region", None)
        if region is not None:
            ids = select_box(prob.particles.x_ref, region[0], region[1])
            prob.particles.material_id[ids] = k

    pts = prob.particles
    phi0 = deck.get("initial", {}).get("porosity")
    if phi0 is None:
        raise ProblemFormatError(f"{name}: missing 'initial.porosity'")
    pts.phi_ref[:] = phi0
    pts.phi[:] = phi0

    init = deck.get("initial", {})
    pw = init.get("p_w", {"type": "uniform", "value": 0.0})
    if pw["type"] == "uniform":
        set_uniform_pressure(prob, pw["value"] * scale)
    elif pw["type"] == "linear":
        set_linear_pressure(prob, pw["origin"],
                            np.asarray(pw["gradient"], float) * scale,
                            pw.get("value", 0.0) * scale)
    else:
        raise ProblemFormatError(f"{name}: initial.p_w.type {pw['type']!r}")
    stress = init.get("stress")
    if stress is not None:
        if stress["type"] == "uniform":
            set_uniform_stress(prob, np.asarray(stress["value"], float) * scale)
        elif stress["type"] == "geostatic":
            set_geostatic_stress(prob, stress["surface"],
                                 stress.get("axis", 2),
                                 stress.get("lateral_ratio", 1.0))
        else:
            raise ProblemFormatError(f"{name}: initial.stress.type")

    for k, b in enumerate(deck.get("boundaries", [])):
        region = _need(b, "region", f"boundaries[{k}]")
        ids = select_box(pts.x_ref, region["box"][0], region["box"][1])
        if ids.size == 0:
            raise ProblemFormatError(
                f"{name}: boundaries[{k}] region selects no points")
        solid = b.get("solid")
        if solid:
            kind = solid.get("type", "fix")
            comp = solid.get("components")
            if kind == "fix":
                fix_solid(prob, ids, comp)
            elif kind == "velocity":
                drive_solid(prob, ids, solid["value"], comp)
            elif kind == "acceleration":
                shake_solid(prob, ids, solid["series"], comp or "x")
            else:
                raise ProblemFormatError(
                    f"{name}: boundaries[{k}].solid.type {kind!r}")
        fluid = b.get("fluid")
        if fluid and fluid.get("type") != "impervious":
            kind = fluid.get("type", "pressure")
            if kind == "pressure":
                prescribe_pressure(prob, ids, fluid["value"] * scale)
            elif kind == "pressure_ramp":
                prescribe_pressure(prob, ids, pressure_ramp(
                    fluid["start"] * scale, fluid["end"] * scale,
                    fluid["t0"], fluid["t1"]))
            else:
                raise ProblemFormatError(
                    f"{name}: boundaries[{k}].fluid.type {kind!r}")

    for c in deck.get("cracks", []):
        add_crack(prob, c["point"], c["normal"], c.get("extent"))

    prob.output_every = int(deck.get("output", {}).get("every_steps", 10))

    errors = prob.validate()
    if errors:
        raise ProblemFormatError(
            f"{name}: validation failed:\n  " + "\n  ".join(errors))
    return prob


# ----------------------------------------------------------------------
# snapshots: legacy ASCII VTK point clouds
# ----------------------------------------------------------------------

def write_snapshot(snap, path):
    """Write one snapshot as a legacy ASCII VTK unstructured point cloud."""
    n = snap.position.shape[0]
    lines = [
        "# vtk DataFile Version 3.0",
        f"peripore snapshot t={FMT % snap.time}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {n} double",
    ]
    lines.extend(_rows(snap.position))
    lines.append(f"CELLS {n} {2 * n}")
    lines.extend(f"1 {i}" for i in range(n))
    lines.append(f"CELL_TYPES {n}")
    lines.extend("1" for _ in range(n))
    lines.append(f"POINT_DATA {n}")
    for name in ("pw", "sr", "porosity", "damage"):
        lines.append(f"SCALARS {name} double 1")
        lines.append("LOOKUP_TABLE default")
        lines.extend(FMT % x for x in getattr(snap, name))
    lines.append("SCALARS interface int 1")
    lines.append("LOOKUP_TABLE default")
    lines.extend(str(int(x)) for x in snap.interface)
    lines.append("VECTORS u double")
    lines.extend(_rows(snap.u))
    lines.append("VECTORS v double")
    lines.extend(_rows(snap.v))
    lines.append("FIELD FieldData 2")
    lines.append("TIME 1 1 double")
    lines.append(FMT % snap.time)
    lines.append(f"sigma_eff 6 {n} double")
    lines.extend(_rows(snap.sigma_eff))
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as err:
        raise OSError(f"cannot write snapshot {path}: {err}")
    return path


def _rows(arr):
    return (" ".join(FMT % v for v in row) for row in np.atleast_2d(arr))


def read_snapshot(path):
    """Read a snapshot written by write_snapshot, bit exact."""
    with open(path) as fh:
        tok = fh.read().split()
    pos = 0

    def expect(word):
        nonlocal pos
        while tok[pos] != word:
            pos += 1
        pos += 1

    expect("POINTS")
    n = int(tok[pos]); pos += 2
    position = _take(tok, pos, n, 3); pos += 3 * n

    data = {"position": position}
    expect("POINT_DATA"); pos += 1
    for name in ("pw", "sr", "porosity", "damage"):
        expect(name); pos += 2  # skip 'double 1', then LOOKUP_TABLE default
        expect("default")
        data[name] = _take(tok, pos, n, 1).ravel(); pos += n
    expect("interface"); pos += 2
    expect("default")
    data["interface"] = _take(tok, pos, n, 1).astype(np.int64).ravel(); pos += n
    expect("u"); pos += 1
    data["u"] = _take(tok, pos, n, 3); pos += 3 * n
    expect("v"); pos += 1
    data["v"] = _take(tok, pos, n, 3); pos += 3 * n
    expect("TIME"); pos += 3
    data["time"] = float(tok[pos]); pos += 1
    expect("sigma_eff"); pos += 3
    data["sigma_eff"] = _take(tok, pos, n, 6); pos += 6 * n
    return Snapshot.from_fields(data)


def _take(tok, pos, n, width):
    flat = np.array(tok[pos:pos + n * width], dtype=float)
    return flat.reshape(n, width)


# ----------------------------------------------------------------------
# time series and run reports
# ----------------------------------------------------------------------

SERIES_COLUMNS = ("time", "reaction_x", "reaction_y", "reaction_z",
                  "total_fluid_mass", "max_damage")


def write_series(rows, path):
    with open(path, "w") as fh:
        fh.write(",".join(SERIES_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(FMT % row[c] for c in SERIES_COLUMNS) + "\n")
    return path


def read_series(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [dict(zip(header, map(float, line.split(","))))
                for line in fh if line.strip()]
    return rows


def total_variation(values):
    """Total variation of a 1D profile; the roughness metric used to
    compare stabilized and unstabilized velocity fields."""
    v = np.asarray(values, dtype=float)
    return float(np.abs(np.diff(v)).sum())


def report_run(result):
    """Build the machine- and human-readable run summaries."""
    reports = result.reports
    series = result.series
    mass0 = series[0]["total_fluid_mass"]
    mass1 = series[-1]["total_fluid_mass"]
    drift = abs(mass1 - mass0) / abs(mass0) if mass0 else 0.0
    vmax = float(max(np.abs(s.v).max() for s in result.snapshots))
    data = {
        "steps": len(reports),
        "final_time": reports[-1].time if reports else 0.0,
        "newton": [
            {"step": r.step, "time": r.time, "deformation": r.newton_u,
             "flow": r.newton_p, "fracture_flow": r.newton_f,
             "bisections": r.bisections, "broken_bonds": r.broken_bonds}
            for r in reports
        ],
        "max_newton_deformation": max((r.newton_u for r in reports), default=0),
        "max_newton_flow": max((r.newton_p for r in reports), default=0),
        "bisection_events": [
            {"step": s, "dt_rejected": d} for s, d in result.bisection_events
        ],
        "conservation": {
            "fluid_mass_initial": mass0,
            "fluid_mass_final": mass1,
            "relative_drift": drift,
        },
        "peaks": {
            "max_velocity": vmax,
            "max_damage": float(result.snapshots[-1].damage.max()),
            "min_pw": float(min(s.pw.min() for s in result.snapshots)),
            "max_pw": float(max(s.pw.max() for s in result.snapshots)),
        },
    }
    text = [
        f"steps run            : {data['steps']}",
        f"final time           : {data['final_time']:.6g} s",
        f"max Newton (deform)  : {data['max_newton_deformation']}",
        f"max Newton (flow)    : {data['max_newton_flow']}",
        f"bisection events     : {len(data['bisection_events'])}",
        f"fluid mass drift     : {drift:.3e}",
        f"peak |v|             : {data['peaks']['max_velocity']:.6g} m/s",
        f"peak damage          : {data['peaks']['max_damage']:.4f}",
        f"pw range             : [{data['peaks']['min_pw']:.6g}, "
        f"{data['peaks']['max_pw']:.6g}] Pa",
    ]
    return data, "\n".join(text)


def write_run(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    for k, snap in enumerate(result.snapshots):
        write_snapshot(snap, os.path.join(out_dir, f"snapshot_{k:06d}.vtk"))
    write_series(result.series, os.path.join(out_dir, "series.csv"))
    data, text = report_run(result)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(data, fh, indent=2)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text + "\n")
    return out_dir


def probe_snapshot(path, point, field):
    """Value of a field at the stored point nearest to ``point``."""
    snap = read_snapshot(path)
    d = np.linalg.norm(snap.position - np.asarray(point, float)[None, :], axis=1)
    i = int(np.argmin(d))
    value = getattr(snap, field)[i]
    return i, snap.position[i], value
