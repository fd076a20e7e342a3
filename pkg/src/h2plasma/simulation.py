"""Experiment orchestration shared by the command line interface.

A run goes through the stages ``rebuild -> newton -> solve -> field ->
push -> absorb -> diagnostics`` once per step.  Failures are re-raised as
:class:`StageError` carrying the stage name and step index.
"""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .bemops import ParticleBoundaryCoupling, assemble_N0, assemble_galerkin, edge_midpoint_rule
from .cluster import build_cluster_tree
from .config import RunConfig
from .dynamics import (Ball, Cylinder, Particles, StepConfig, dominant_nonzero_frequency,
                       init_uniform, kinetic_energy, radial_histogram, region_counts, spectrum, step)
from .field import (FieldSolver, NondimensionalParameters, SolverConfig, TraceSolution,
                    boundary_moments)
from .h2 import ClusterBasis, H2Config, H2Matrix, LaplaceGradientKernel
from .mesh import (BoundaryCondition, generate_accelerator, generate_cylinder, generate_sphere,
                   load_mesh)
from .quadrature import QuadratureConfig

log = logging.getLogger(__name__)

__all__ = [
    "StageError",
    "TIMESERIES_HEADER",
    "STATE_HEADER",
    "SPECTRUM_HEADER",
    "build_mesh",
    "build_boundary",
    "build_parameters",
    "build_particles",
    "Simulation",
    "run_simulation",
    "bench_field",
    "bench_bem",
    "sweep_density",
    "loglog_slope",
    "summary_schema",
]

TIMESERIES_HEADER = ["step", "time", "alive", "region1", "region2", "region3", "kinetic_energy"]
STATE_HEADER = ["x", "y", "z", "vx", "vy", "vz", "q", "m", "w"]
SPECTRUM_HEADER = ["freq", "magnitude"]
HISTOGRAM_HEADER = ["r_lo", "r_hi", "count", "density", "reference"]
BENCH_HEADER = ["n_particles", "n_triangles", "stage", "seconds"]
SWEEP_HEADER = ["factor", "n", "frequency", "angular_frequency", "plasma_frequency", "status"]


class StageError(RuntimeError):
    def __init__(self, stage, step, cause):
        super().__init__(f"stage '{stage}' failed at step {step}: {cause}")
        self.stage = stage
        self.step = step
        self.cause = cause


@contextlib.contextmanager
def _stage(name, step):
    try:
        yield
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with context
        raise StageError(name, step, exc) from exc


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def build_mesh(cfg):
    m = cfg["mesh"]
    if m["source"] == "sphere":
        return generate_sphere(m["level"], m["radius"])
    if m["source"] == "cylinder":
        return generate_cylinder(m["radius"], m["height"], m["resolution"])
    if m["source"] == "accelerator":
        return generate_accelerator(m["resolution"])
    return load_mesh(m["path"])


def build_boundary(cfg, mesh):
    table = cfg.boundary or {lab: ("dirichlet", 0.0) for lab in mesh.region_labels}
    bc = BoundaryCondition(table)
    bc.check(mesh, allow_pure_neumann=True)
    return bc


def build_parameters(cfg, factor=None):
    p = cfg["physics"]
    if not p["nondimensional"]:
        return NondimensionalParameters.unit()
    base = NondimensionalParameters(p["L0"], p["n0"], p["kT0_eV"])
    f = p["density_factor"] if factor is None else factor
    return base.scaled_density(f) if f != 1.0 else base


def build_h2(cfg):
    h = cfg["h2"]
    return H2Config(order=h["order"], eta=h["eta"], leaf_cap=h["leaf_cap"], delta=h["delta"],
                    mode=h["mode"], variant=h["variant"])


def build_quadrature(cfg):
    q = cfg["quadrature"]
    return QuadratureConfig(q["regular_points"], q["near_order"], q["near_factor"], q["singular_order"])


def build_particles(cfg, mesh, rng):
    p = cfg["particles"]
    if p["shape"] == "mesh":
        shape = mesh
    elif p["shape"] == "ball":
        shape = Ball(p["radius"], p["center"])
    else:
        shape = Cylinder(p["radius"], p["height"], p["center"], p["axis"])
    if p["count"] == 0:
        return Particles.empty()
    parts = init_uniform(shape, p["count"], p["velocity"], p["temperature"], p["bulk"],
                         p["charge"], p["mass"], rng=rng)
    if p["weight"] > 0:
        parts.w[:] = p["weight"]
    return parts


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def _finite(obj):
    """Replace NaN floats by None so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and math.isnan(obj):
        return None
    return obj


def _write_json(path, obj):
    path.write_text(json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False))


def summary_schema():
    return json.loads((resources.files("h2plasma") / "schema" / "summary.schema.json").read_text())


def loglog_slope(x, y):
    """Least-squares slope of log y against log x."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


# --------------------------------------------------------------------------
# time loop
# --------------------------------------------------------------------------

@dataclass
class Diagnostics:
    slabs: tuple
    rows: list = field(default_factory=list)

    def record(self, step_index, t, particles):
        c = region_counts(particles.x, self.slabs)
        self.rows.append((step_index, t, len(particles), int(c[0]), int(c[1]), int(c[2]),
                          kinetic_energy(particles)))

    def series(self, name):
        col = TIMESERIES_HEADER.index(name)
        return np.array([r[col] for r in self.rows], dtype=np.float64)


class Simulation:
    """Set up and run one configured experiment."""

    def __init__(self, cfg: RunConfig, seed=None, factor=None):
        self.cfg = cfg
        self.seed = cfg["run"]["seed"] if seed is None else int(seed)
        self.rng = np.random.Generator(np.random.PCG64(self.seed))
        self.params = build_parameters(cfg, factor)
        self.mesh = build_mesh(cfg)
        self.bc = build_boundary(cfg, self.mesh)
        self.h2 = build_h2(cfg)
        self.quad = build_quadrature(cfg)
        r = cfg["run"]
        self.dt = r["dt"]
        if factor is not None and cfg["sweep"]["dt_scaling"] == "sqrt":
            self.dt = r["dt"] / math.sqrt(factor)
        B = self.params.magnetic_field(cfg["physics"]["B_tesla"])
        self.step_cfg = StepConfig(self.dt, r["pusher"], tuple(B), cfg["physics"]["background"],
                                   r["absorption"])
        self.particles = build_particles(cfg, self.mesh, self.rng)
        self.initial_count = len(self.particles)
        self.diag = Diagnostics(r["slabs"])
        self.timings = {k: 0.0 for k in ("assemble", "rebuild", "newton", "solve", "particle_field",
                                         "boundary_field", "push", "absorb", "diagnostics")}
        self.solver_iterations = []
        self.absorbed_per_step = []
        self.solver = None
        self.traces = None

    def setup(self):
        with _stage("assemble", 0):
            t = time.perf_counter()
            cache = self.cfg["quadrature"]["cache_dir"] or None
            mats = assemble_galerkin(self.mesh, self.quad, cache)
            s = self.cfg["solver"]
            scfg = SolverConfig(single_layer=s["single_layer"], mixed=s["mixed"],
                                preconditioner=s["preconditioner"],
                                alpha=s["alpha"] if s["alpha"] > 0 else None)
            self.solver = FieldSolver(self.mesh, self.bc, mats, self.params, self.h2, scfg,
                                      background=self.step_cfg.background)
            self.timings["assemble"] += time.perf_counter() - t
        return self

    def _field(self, step_index):
        def callback(particles):
            with _stage("field", step_index):
                report, traces = self.solver.compute(particles.x, particles.wq)
            for k, v in report.timings.items():
                self.timings[k] = self.timings.get(k, 0.0) + v
            if "iterations" in traces.stats:
                self.solver_iterations.append(int(traces.stats["iterations"]))
            self.traces = traces
            return report.E
        return callback

    def _field_time(self):
        return sum(v for k, v in self.timings.items() if k not in ("assemble", "push", "absorb", "diagnostics"))

    def run(self, steps=None):
        if self.solver is None:
            self.setup()
        steps = self.cfg["run"]["steps"] if steps is None else steps
        with _stage("diagnostics", 0):
            self.diag.record(0, 0.0, self.particles)
        for n in range(1, steps + 1):
            t = time.perf_counter()
            before = self._field_time()
            with _stage("push", n):
                removed = step(self.particles, self._field(n), self.step_cfg,
                               self.mesh if self.step_cfg.absorption else None)
            # the field callback runs inside the step and books its own stages
            field = self._field_time() - before
            self.timings["push"] += time.perf_counter() - t - field
            self.absorbed_per_step.append(removed)
            t = time.perf_counter()
            with _stage("diagnostics", n):
                self.diag.record(n, n * self.dt, self.particles)
            self.timings["diagnostics"] += time.perf_counter() - t
            if n % max(1, steps // 10) == 0:
                log.info("step %d/%d alive %d", n, steps, len(self.particles))
        return self

    def tree_stats(self):
        """Cluster and block tree statistics of the last field evaluation."""
        out = {}
        op = self.solver.particle_op if self.solver else None
        if op is not None:
            out["particle_tree"] = op.row_basis.tree.stats()
            out["particle_blocks"] = op.blocks.stats()
            cpl = self.solver.edge_coupling
            out["boundary_tree"] = cpl.boundary_basis.tree.stats()
            out["coupling_blocks"] = cpl.gradient_op.blocks.stats()
        return _jsonable(out)

    # outputs -------------------------------------------------------------

    def spectrum(self):
        name = self.cfg["run"]["spectrum_series"]
        s = self.diag.series(name)
        if len(s) < 4:
            return np.zeros(0), np.zeros(0), None
        freq, mag = spectrum(s, self.dt)
        try:
            f, _ = dominant_nonzero_frequency(s, self.dt)
        except ValueError:
            f = None
        return freq, mag, f

    def histogram(self):
        r = self.cfg["run"]
        return radial_histogram(self.particles.x, r["histogram_bins"], r["histogram_radius"],
                                total=self.initial_count)

    def summary(self, command="simulate"):
        freq, mag, f = self.spectrum()
        dom = None
        if f is not None:
            dom = {"frequency": f, "angular": 2 * math.pi * f,
                   "angular_physical": 2 * math.pi * f / self.params.t0}
        iters = self.solver_iterations
        return {
            "command": command,
            "version": __version__,
            "seed": self.seed,
            "config_hash": self.cfg.hash(),
            "config": self.cfg.as_dict(),
            "parameters": self.params.as_dict(),
            "mesh": {"triangles": self.mesh.n_triangles, "vertices": self.mesh.n_vertices,
                     "hash": self.mesh.hash},
            "boundary_kind": self.solver.kind if self.solver else None,
            "steps": len(self.diag.rows) - 1,
            "dt": self.dt,
            "B_nondimensional": list(self.step_cfg.B),
            "particles": {"initial": self.initial_count, "final": len(self.particles),
                          "absorbed": self.particles.absorbed_count,
                          "absorbed_charge": self.particles.absorbed_charge},
            "timings": {k: float(v) for k, v in self.timings.items()},
            "solver": {"iterations_mean": float(np.mean(iters)) if iters else 0.0,
                       "iterations_max": int(max(iters)) if iters else 0},
            "dominant_frequency": dom,
            "flags": {"reconstructed": self.cfg["mesh"]["source"] == "accelerator"},
        }

    def write(self, out_dir, command="simulate"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "timeseries.csv", TIMESERIES_HEADER, self.diag.rows)
        _write_csv(out / "final_state.csv", STATE_HEADER, self.particles.as_table().tolist())
        freq, mag, _ = self.spectrum()
        _write_csv(out / "spectrum.csv", SPECTRUM_HEADER, zip(freq.tolist(), mag.tolist()))
        h = self.histogram()
        _write_csv(out / "histogram.csv", HISTOGRAM_HEADER,
                   zip(h.edges[:-1].tolist(), h.edges[1:].tolist(), h.counts.tolist(),
                       h.density.tolist(), h.reference.tolist()))
        summary = self.summary(command)
        _write_json(out / "summary.json", summary)
        return summary


def run_simulation(cfg, out_dir=None, seed=None, steps=None):
    sim = Simulation(cfg, seed).setup().run(steps)
    if out_dir is not None:
        sim.write(out_dir)
    return sim


# --------------------------------------------------------------------------
# benchmarks
# --------------------------------------------------------------------------

def _median_time(fn, repeats):
    ts = []
    out = None
    for _ in range(max(1, repeats)):
        t = time.perf_counter()
        out = fn()
        ts.append(time.perf_counter() - t)
    return float(np.median(ts)), out


class _FieldStages:
    """The four timed parts of one field evaluation."""

    def __init__(self, mesh, params, h2, node_basis=None):
        self.mesh = mesh
        self.params = params
        self.h2 = h2
        nodes, self.Q = edge_midpoint_rule(mesh)
        self.node_basis = node_basis or ClusterBasis(build_cluster_tree(nodes, h2.leaf_cap), h2.order)
        self.coupling = ParticleBoundaryCoupling(self.node_basis, params.beta, h2.delta, h2.order,
                                                 h2.leaf_cap, h2.admissibility)

    def rebuild(self, x):
        return ClusterBasis(build_cluster_tree(x, self.h2.leaf_cap), self.h2.order)

    def newton(self, x, wq, basis):
        self.coupling.rebuild(x, basis)
        return assemble_N0(self.mesh, x, wq, self.params.beta, self.h2.delta, coupling=self.coupling)

    def particle_field(self, basis, wq):
        kern = LaplaceGradientKernel(1.0 / (4 * math.pi * self.params.beta), self.h2.delta)
        op = H2Matrix(basis, basis, kern, cfg=self.h2.admissibility, mode=self.h2.mode)
        return op.matvec(wq)

    def boundary_field(self, traces):
        _, c, b = boundary_moments(self.mesh, traces)
        return self.coupling.gradient_op.matvec_dipole(c, b)


def _bench_particles(cfg, n, rng):
    p = cfg["particles"]
    x = init_uniform(Ball(p["radius"], p["center"]), n, rng=rng).x
    wq = np.full(n, p["charge"] * (p["weight"] if p["weight"] > 0 else 1.0))
    return x, wq


def bench_field(cfg, particles=None, repeats=None, seed=None, progress=None):
    """Timing rows ``(n, n_triangles, stage, seconds)`` over a particle ladder."""
    ladder = particles or cfg["bench"]["particles"]
    repeats = repeats or cfg["bench"]["repeats"]
    rng = np.random.Generator(np.random.PCG64(cfg["run"]["seed"] if seed is None else seed))
    mesh = build_mesh(cfg)
    bc = build_boundary(cfg, mesh)
    params = build_parameters(cfg)
    h2 = build_h2(cfg)
    mats = assemble_galerkin(mesh, build_quadrature(cfg))
    from .field import solve_dirichlet
    stages = _FieldStages(mesh, params, h2)
    rows = []
    for n in ladder:
        x, wq = _bench_particles(cfg, n, rng)
        t_reb, basis = _median_time(lambda: stages.rebuild(x), repeats)
        t_n0, _ = _median_time(lambda: stages.newton(x, wq, basis), repeats)
        # untimed: the traces only feed the boundary-field stage
        traces = solve_dirichlet(mats, mesh, bc, (x, wq), params, h2)
        t_pf, _ = _median_time(lambda: stages.particle_field(basis, wq), repeats)
        t_bf, _ = _median_time(lambda: stages.boundary_field(traces), repeats)
        for stage, t in (("rebuild", t_reb), ("newton", t_n0), ("particle_field", t_pf),
                         ("boundary_field", t_bf)):
            rows.append((int(n), mesh.n_triangles, stage, t))
        if progress:
            progress(f"N={n}: rebuild {t_reb:.3f}s newton {t_n0:.3f}s particle {t_pf:.3f}s "
                     f"boundary {t_bf:.3f}s")
    return rows


def bench_bem(cfg, levels=None, n_particles=None, repeats=None, seed=None, progress=None):
    """Timing rows over sphere refinement levels with a fixed particle set."""
    levels = levels or cfg["bench"]["levels"]
    n = n_particles or cfg["bench"]["bem_particles"]
    repeats = repeats or cfg["bench"]["repeats"]
    rng = np.random.Generator(np.random.PCG64(cfg["run"]["seed"] if seed is None else seed))
    params = build_parameters(cfg)
    h2 = build_h2(cfg)
    x, wq = _bench_particles(cfg, n, rng)
    rows = []
    for level in levels:
        mesh = generate_sphere(level, cfg["mesh"]["radius"])
        stages = _FieldStages(mesh, params, h2)
        basis = stages.rebuild(x)
        t_n0, _ = _median_time(lambda: stages.newton(x, wq, basis), repeats)
        if cfg["bench"]["synthetic_traces"]:
            # timings do not depend on the trace values
            traces = TraceSolution(phi=rng.standard_normal(mesh.n_vertices),
                                   t=rng.standard_normal(mesh.n_triangles),
                                   kind="synthetic", includes_newton=False)
        else:
            from .field import solve_dirichlet
            mats = assemble_galerkin(mesh, build_quadrature(cfg))
            traces = solve_dirichlet(mats, mesh, BoundaryCondition.all_dirichlet(mesh), (x, wq),
                                     params, h2)
        t_bf, _ = _median_time(lambda: stages.boundary_field(traces), repeats)
        rows.append((n, mesh.n_triangles, "newton", t_n0))
        rows.append((n, mesh.n_triangles, "boundary_field", t_bf))
        if progress:
            progress(f"level {level} ({mesh.n_triangles} triangles): newton {t_n0:.3f}s "
                     f"boundary {t_bf:.3f}s")
    return rows


def bench_slopes(rows, by="n_particles"):
    col = BENCH_HEADER.index(by)
    out = {}
    for stage in dict.fromkeys(r[2] for r in rows):
        sel = [r for r in rows if r[2] == stage]
        out[stage] = loglog_slope([r[col] for r in sel], [r[3] for r in sel])
    return out


def write_bench(out_dir, name, rows, slopes, cfg, seed, command):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / f"{name}.csv", BENCH_HEADER, rows)
    summary = {"command": command, "version": __version__, "seed": seed,
               "config_hash": cfg.hash(), "config": cfg.as_dict(),
               "slopes": {k: None if math.isnan(v) else v for k, v in slopes.items()},
               "rows": [dict(zip(BENCH_HEADER, r)) for r in rows]}
    _write_json(out / "summary.json", summary)
    return summary


# --------------------------------------------------------------------------
# density sweep
# --------------------------------------------------------------------------

def sweep_density(cfg, factors=None, out_dir=None, seed=None, progress=None):
    """Dominant frequency of the middle-slab count for each density factor.

    Failed sub-runs are recorded with their error and the sweep continues.
    Returns ``(rows, slope)`` where the slope fits log f against log factor.
    """
    factors = factors or cfg["sweep"]["factors"]
    rows = []
    for fac in factors:
        try:
            sim = Simulation(cfg, seed, factor=float(fac)).setup().run()
            if out_dir is not None:
                sim.write(Path(out_dir) / f"factor_{fac:g}")
            s = sim.diag.series("region2")
            f, _ = dominant_nonzero_frequency(s, sim.dt)
            omega = 2 * math.pi * f / sim.params.t0
            rows.append((float(fac), sim.params.n0, f, omega, sim.params.plasma_frequency(), "ok"))
        except Exception as exc:  # noqa: BLE001 - recorded per factor
            log.error("density factor %g failed: %s", fac, exc)
            rows.append((float(fac), float("nan"), float("nan"), float("nan"), float("nan"),
                         f"failed: {exc}"))
        if progress:
            progress(f"factor {fac:g}: {rows[-1][2]:.4g} cycles/t0 ({rows[-1][5]})")
    ok = [r for r in rows if r[5] == "ok"]
    slope = loglog_slope([r[0] for r in ok], [r[2] for r in ok]) if len(ok) >= 2 else float("nan")
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
        summary = {"command": "sweep-density", "version": __version__,
                   "seed": cfg["run"]["seed"] if seed is None else int(seed),
                   "config_hash": cfg.hash(), "config": cfg.as_dict(),
                   "slope": None if math.isnan(slope) else slope,
                   "rows": [dict(zip(SWEEP_HEADER, r)) for r in rows]}
        _write_json(out / "summary.json", summary)
    return rows, slope
