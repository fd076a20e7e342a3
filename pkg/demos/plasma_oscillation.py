"""Plasma oscillation in a grounded cylinder: frequency against electron density.

Run ``python demos/plasma_oscillation.py``.  Each density factor is a short
Boris run; the dominant frequency of the middle-slab particle count is
compared with the plasma frequency, and the log-log slope should be near 1/2.
"""
import argparse
import math

from h2plasma.config import parse_config
from h2plasma.simulation import sweep_density

CONFIG = """
[mesh]
source = cylinder
resolution = {resolution}
[boundary]
region0 = dirichlet 0.0
region1 = dirichlet 0.0
region2 = neumann 0.0
[physics]
background = true
B_tesla = 0 0 0.01
[particles]
count = {count}
shape = cylinder
height = 4.0
[run]
dt = 2e-3
steps = {steps}
pusher = boris
[sweep]
dt_scaling = sqrt
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--factors", type=float, nargs="+", default=[1, 4, 16])
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--steps", type=int, default=3000)
    ap.add_argument("--resolution", type=int, default=12)
    args = ap.parse_args()

    cfg = parse_config(CONFIG.format(resolution=args.resolution, count=args.count, steps=args.steps))
    rows, slope = sweep_density(cfg, args.factors)
    print(f"{'factor':>8}  {'omega [1/s]':>12}  {'omega_p [1/s]':>13}  ratio")
    for fac, _, _, omega, omega_p, status in rows:
        if status != "ok":
            print(f"{fac:8g}  {status}")
            continue
        print(f"{fac:8g}  {omega:12.4e}  {omega_p:13.4e}  {omega / omega_p:.3f}")
    if not math.isnan(slope):
        print(f"log-log slope {slope:.3f}")


if __name__ == "__main__":
    main()
