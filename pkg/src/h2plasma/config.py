"""Run configuration: INI files with a fixed, documented key set.

Every section and key is declared in :data:`SCHEMA` together with its type
and default.  Unknown sections or keys raise :class:`ConfigError`.  The
boundary section is free-form: ``region<label> = <kind> <value>``.

Magnetic fields are given in tesla and converted to the nondimensional
value ``e B t0 / m_e`` when the run is set up.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

__all__ = ["ConfigError", "SCHEMA", "RunConfig", "load_config", "preset_path", "PRESETS"]

PRESETS = ("sheath", "oscillation", "accelerator", "bench")


class ConfigError(ValueError):
    pass


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    return tuple(float(t) for t in str(s).replace(",", " ").split())


def _ints(s):
    return tuple(int(t) for t in str(s).replace(",", " ").split())


def _slabs(s):
    out = []
    for part in str(s).split(","):
        lo, hi = part.split(":")
        out.append((float(lo), float(hi)))
    return tuple(out)


def _choice(*options):
    def parse(s):
        s = str(s).strip()
        if s not in options:
            raise ValueError(f"{s!r} not in {options}")
        return s
    parse.__name__ = "one of " + "|".join(options)
    return parse


# section -> key -> (parser, default, description)
SCHEMA = {
    "mesh": {
        "source": (_choice("sphere", "cylinder", "accelerator", "file"), "sphere", "mesh generator or file"),
        "level": (int, 3, "sphere refinement level (20 * 4^level triangles)"),
        "radius": (float, 1.0, "sphere or cylinder radius"),
        "height": (float, 5.0, "cylinder height"),
        "resolution": (int, 33, "vertices around the circumference (cylinder, accelerator)"),
        "path": (str, "", "mesh file for source = file"),
    },
    "physics": {
        "L0": (float, 0.1, "characteristic length in m"),
        "n0": (float, 1e12, "reference electron density in 1/m^3"),
        "kT0_eV": (float, 1.0, "reference temperature in eV"),
        "density_factor": (float, 1.0, "electron density in units of n0"),
        "background": (_bool, False, "uniform neutralising background charge"),
        "B_tesla": (_floats, (0.0, 0.0, 0.0), "constant magnetic field in T"),
        "nondimensional": (_bool, True, "false: unit masses, charges, weights and beta = 1"),
    },
    "particles": {
        "count": (int, 1000, "number of particles"),
        "shape": (_choice("mesh", "ball", "cylinder"), "mesh", "initial region"),
        "radius": (float, 1.0, "ball or cylinder radius"),
        "height": (float, 4.0, "cylinder height"),
        "center": (_floats, (0.0, 0.0, 0.0), "ball or cylinder centre"),
        "axis": (_choice("x", "y", "z"), "z", "cylinder axis"),
        "velocity": (_choice("zero", "maxwellian"), "zero", "velocity law"),
        "temperature": (float, 1.0, "Maxwellian temperature in units of kT0"),
        "bulk": (_floats, (0.0, 0.0, 0.0), "bulk velocity in units of v0"),
        "charge": (float, -1.0, "charge in units of e"),
        "mass": (float, 1.0, "mass in units of m_e"),
        "weight": (float, 0.0, "numerical weight; 0 selects |shape| / count"),
    },
    "h2": {
        "order": (int, 5, "Chebyshev nodes per direction"),
        "eta": (float, 2.0, "admissibility constant"),
        "leaf_cap": (int, 250, "maximal leaf size (2 d^3)"),
        "delta": (float, 1e-3, "kernel regularisation radius"),
        "mode": (_choice("on-the-fly", "stored"), "on-the-fly", "coupling matrix storage"),
        "variant": (_choice("max", "min", "first-variable", "second-variable"), "max", "admissibility variant"),
    },
    "quadrature": {
        "regular_points": (int, 7, "points of the regular triangle rule"),
        "near_order": (int, 6, "Gauss points per direction for close pairs"),
        "near_factor": (float, 2.0, "close-pair threshold in diameters"),
        "singular_order": (int, 4, "Gauss points per dimension for singular pairs"),
        "cache_dir": (str, "", "directory for assembled matrices"),
    },
    "solver": {
        "single_layer": (_choice("dense", "cg"), "dense", "solver for V"),
        "mixed": (_choice("gmres", "dense"), "gmres", "solver for the mixed block system"),
        "preconditioner": (_choice("jacobi", "none"), "jacobi", "preconditioner for iterative solvers"),
        "alpha": (float, 0.0, "Neumann stabilisation; 0 selects 1/|Gamma|"),
    },
    "run": {
        "dt": (float, 1e-3, "time step in units of t0"),
        "steps": (int, 100, "number of steps"),
        "pusher": (_choice("leapfrog", "boris"), "leapfrog", "particle pusher"),
        "absorption": (_bool, True, "remove particles leaving the domain"),
        "seed": (int, 12345, "seed of the PCG64 generator"),
        "slabs": (_slabs, ((-2.5, -2.0), (-0.25, 0.25), (2.0, 2.5)), "z-intervals lo:hi for region counts"),
        "spectrum_series": (_choice("region1", "region2", "region3", "alive"), "region2",
                            "series analysed by the DFT"),
        "histogram_bins": (int, 20, "bins of the final radial histogram"),
        "histogram_radius": (float, 1.0, "radius normalising the histogram"),
    },
    "bench": {
        "particles": (_ints, (1000, 4000, 16000, 64000), "particle ladder for bench-field"),
        "levels": (_ints, (2, 3, 4, 5), "sphere levels for bench-bem"),
        "bem_particles": (int, 10000, "particles for bench-bem"),
        "repeats": (int, 3, "repetitions per timing (median)"),
        "synthetic_traces": (_bool, True, "bench-bem: skip assembly above level 3, use random traces"),
    },
    "sweep": {
        "factors": (_floats, (1.0, 10.0, 100.0), "density factors"),
        "dt_scaling": (_choice("none", "sqrt"), "sqrt", "divide dt by sqrt(factor)"),
    },
}


@dataclass
class RunConfig:
    """Parsed configuration: typed sections plus the boundary table."""

    sections: dict
    boundary: dict
    source: str = ""

    def __getitem__(self, section):
        return self.sections[section]

    def get(self, section, key):
        return self.sections[section][key]

    def replace(self, section, **kw):
        for k in kw:
            if k not in SCHEMA[section]:
                raise ConfigError(f"unknown key {section}.{k}")
        sections = {s: dict(v) for s, v in self.sections.items()}
        sections[section].update(kw)
        return RunConfig(sections, dict(self.boundary), self.source)

    def as_dict(self):
        out = {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
               for s, d in self.sections.items()}
        out["run"]["slabs"] = [list(p) for p in self.sections["run"]["slabs"]]
        out["boundary"] = {str(k): list(v) for k, v in self.boundary.items()}
        return out

    def hash(self):
        blob = json.dumps(self.as_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_ini(self):
        lines = []
        for s, d in self.as_dict().items():
            lines.append(f"[{s}]")
            if s == "boundary":
                for lab, (kind, val) in d.items():
                    lines.append(f"region{lab} = {kind} {val}")
            else:
                for k, v in d.items():
                    if k == "slabs":
                        v = ", ".join(f"{a}:{b}" for a, b in v)
                    elif isinstance(v, list):
                        v = " ".join(str(t) for t in v)
                    lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _parse_boundary(items):
    table = {}
    for key, value in items:
        if not key.startswith("region") or not key[6:].isdigit():
            raise ConfigError(f"boundary keys must look like region<label>, got {key!r}")
        parts = value.split()
        if len(parts) != 2 or parts[0] not in ("dirichlet", "neumann"):
            raise ConfigError(f"boundary entry {key} must be '<dirichlet|neumann> <value>'")
        kind, v = parts
        try:
            v = float(v)
        except ValueError:
            pass
        table[int(key[6:])] = (kind, v)
    return table


def parse_config(text, source="<string>", overrides=None):
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    sections = {s: {k: d for k, (_, d, _) in keys.items()} for s, keys in SCHEMA.items()}
    boundary = {}
    for sec in cp.sections():
        if sec == "boundary":
            boundary = _parse_boundary(cp.items(sec))
            continue
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}] in {source}")
        for key, raw in cp.items(sec):
            if key not in SCHEMA[sec]:
                raise ConfigError(f"unknown key {sec}.{key} in {source}")
            parser = SCHEMA[sec][key][0]
            try:
                sections[sec][key] = parser(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {sec}.{key}: {exc}") from None
    for (sec, key), val in (overrides or {}).items():
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown key {sec}.{key}")
        sections[sec][key] = val
    _check(sections)
    return RunConfig(sections, boundary, source)


def _check(s):
    if s["run"]["dt"] <= 0:
        raise ConfigError("run.dt must be positive")
    if s["run"]["steps"] < 0:
        raise ConfigError("run.steps must be >= 0")
    if s["particles"]["count"] < 0:
        raise ConfigError("particles.count must be >= 0")
    if len(s["physics"]["B_tesla"]) != 3:
        raise ConfigError("physics.B_tesla needs three components")
    if len(s["run"]["slabs"]) != 3:
        raise ConfigError("run.slabs needs three intervals")
    if s["mesh"]["source"] == "file" and not s["mesh"]["path"]:
        raise ConfigError("mesh.path is required for source = file")
    if s["h2"]["order"] < 1 or s["h2"]["leaf_cap"] < 1:
        raise ConfigError("h2.order and h2.leaf_cap must be positive")


def preset_path(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("h2plasma") / "presets" / f"{name}.ini"


def load_config(path_or_preset, overrides=None):
    """Read a config file, or a shipped preset when given its bare name."""
    p = str(path_or_preset)
    if p in PRESETS:
        ref = preset_path(p)
        return parse_config(ref.read_text(), f"preset:{p}", overrides)
    path = Path(p)
    if not path.exists():
        raise ConfigError(f"config file {p} not found")
    return parse_config(path.read_text(), str(path), overrides)
