"""Command line entry point ``h2plasma``.

Subcommands: ``gen-mesh``, ``bench-field``, ``bench-bem``, ``simulate`` and
``sweep-density``.  ``--config`` takes a path or a preset name (``sheath``,
``oscillation``, ``accelerator``, ``bench``).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .mesh import MeshError, save_mesh
from .simulation import StageError

log = logging.getLogger("h2plasma")

DEFAULT_PRESET = {"gen-mesh": "sheath", "bench-field": "bench", "bench-bem": "bench",
                  "simulate": "sheath", "sweep-density": "oscillation"}


def _limit_threads(n):
    if n is None:
        return None
    import numba
    from threadpoolctl import threadpool_limits
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))
    return threadpool_limits(limits=n)


def _overrides(args):
    out = {}
    if getattr(args, "steps", None) is not None:
        out[("run", "steps")] = args.steps
    if getattr(args, "particles", None) is not None and args.command in ("simulate", "sweep-density"):
        out[("particles", "count")] = args.particles
    if args.seed is not None:
        out[("run", "seed")] = args.seed
    return out


def _print_stats(summary):
    t = summary.get("timings", {})
    if t:
        width = max(len(k) for k in t)
        for k, v in t.items():
            print(f"  {k:<{width}}  {v:10.4f} s")
    s = summary.get("solver")
    if s:
        print(f"  solver iterations mean {s['iterations_mean']:.1f} max {s['iterations_max']}")


def cmd_gen_mesh(args, cfg):
    from .simulation import build_mesh
    mesh_kw = {}
    if args.shape:
        mesh_kw["source"] = args.shape
    if args.level is not None:
        mesh_kw["level"] = args.level
    if args.resolution is not None:
        mesh_kw["resolution"] = args.resolution
    if mesh_kw:
        cfg = cfg.replace("mesh", **mesh_kw)
    mesh = build_mesh(cfg)
    if args.out:
        path = Path(args.out)
    else:
        path = Path(args.out_dir) / f"{cfg['mesh']['source']}.mesh"
    path.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(mesh, path)
    print(f"wrote {path}: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles, "
          f"labels {list(mesh.region_labels)}")
    return 0


def cmd_bench_field(args, cfg):
    from .simulation import bench_field, bench_slopes, write_bench
    ladder = tuple(args.n) if args.n else None
    rows = bench_field(cfg, ladder, args.repeats, progress=print)
    slopes = bench_slopes(rows, "n_particles")
    write_bench(args.out_dir, "bench_field", rows, slopes, cfg, cfg["run"]["seed"], "bench-field")
    for k, v in slopes.items():
        print(f"slope {k}: {v:.3f}")
    return 0


def cmd_bench_bem(args, cfg):
    from .simulation import bench_bem, bench_slopes, write_bench
    levels = tuple(args.levels) if args.levels else None
    rows = bench_bem(cfg, levels, args.n_particles, args.repeats, progress=print)
    slopes = bench_slopes(rows, "n_triangles")
    write_bench(args.out_dir, "bench_bem", rows, slopes, cfg, cfg["run"]["seed"], "bench-bem")
    for k, v in slopes.items():
        print(f"slope {k}: {v:.3f}")
    return 0


def cmd_simulate(args, cfg):
    from .simulation import Simulation
    sim = Simulation(cfg)
    sim.setup().run()
    summary = sim.write(args.out_dir)
    p = summary["particles"]
    print(f"{summary['steps']} steps, {p['final']}/{p['initial']} particles alive")
    if summary["dominant_frequency"]:
        d = summary["dominant_frequency"]
        print(f"dominant frequency {d['frequency']:.4g}/t0, angular {d['angular_physical']:.3e} 1/s")
    if args.stats:
        _print_stats(summary)
        print(json.dumps(sim.tree_stats(), indent=2))
    return 0


def cmd_sweep_density(args, cfg):
    from .simulation import sweep_density
    factors = tuple(args.factors) if args.factors else None
    rows, slope = sweep_density(cfg, factors, args.out_dir, progress=print)
    print(f"log-log slope of frequency against density: {slope:.3f}")
    return 0 if any(r[5] == "ok" for r in rows) else 1


COMMANDS = {"gen-mesh": cmd_gen_mesh, "bench-field": cmd_bench_field, "bench-bem": cmd_bench_bem,
            "simulate": cmd_simulate, "sweep-density": cmd_sweep_density}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file or preset name")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out-dir", default="out", help="output directory (default: out)")
    common.add_argument("--threads", type=int, help="cap BLAS and numba worker threads")
    common.add_argument("--stats", action="store_true", help="print per-stage timings")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="h2plasma", description="Particle plasma simulation with "
                                "H2-matrix field evaluation and boundary elements.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-mesh", parents=[common], help="write the configured mesh")
    g.add_argument("--shape", choices=("sphere", "cylinder", "accelerator"))
    g.add_argument("--level", type=int, help="sphere refinement level")
    g.add_argument("--resolution", type=int, help="vertices around the circumference")
    g.add_argument("--out", help="output file (default: <out-dir>/<shape>.mesh)")

    bf = sub.add_parser("bench-field", parents=[common], help="field timing over particle counts")
    bf.add_argument("--n", type=int, nargs="+", help="particle ladder")
    bf.add_argument("--repeats", type=int)

    bb = sub.add_parser("bench-bem", parents=[common], help="field timing over sphere levels")
    bb.add_argument("--levels", type=int, nargs="+")
    bb.add_argument("--n-particles", type=int)
    bb.add_argument("--repeats", type=int)

    s = sub.add_parser("simulate", parents=[common], help="run a particle simulation")
    s.add_argument("--steps", type=int, help="override run.steps")
    s.add_argument("--particles", type=int, help="override particles.count")

    sw = sub.add_parser("sweep-density", parents=[common], help="oscillation frequency vs density")
    sw.add_argument("--factors", type=float, nargs="+")
    sw.add_argument("--steps", type=int, help="override run.steps")
    sw.add_argument("--particles", type=int, help="override particles.count")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    limiter = _limit_threads(args.threads)
    try:
        cfg = load_config(args.config or DEFAULT_PRESET[args.command], _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, MeshError, StageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3 if isinstance(exc, StageError) else 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
