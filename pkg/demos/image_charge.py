"""Grounded sphere with one point charge: boundary element field vs the image solution.

Run ``python demos/image_charge.py --level 3``.  Prints the relative error of
the total field at a few probe points and of the induced (image) part alone.
"""
import argparse

import numpy as np

from h2plasma.bemops import assemble_galerkin
from h2plasma.field import NondimensionalParameters, evaluate_field_at, image_charge_field, solve_dirichlet
from h2plasma.mesh import generate_sphere

PROBES = np.array([[0.0, 0.0, 0.0], [-0.5, 0.1, 0.2], [0.2, 0.4, -0.3], [0.8, 0.0, 0.0]])


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--level", type=int, default=3, help="sphere refinement level")
    ap.add_argument("--charge-x", type=float, default=0.5, help="charge position on the x axis")
    args = ap.parse_args()

    mesh = generate_sphere(args.level)
    mats = assemble_galerkin(mesh)
    unit = NondimensionalParameters.unit()
    a = np.array([[args.charge_x, 0.0, 0.0]])
    traces = solve_dirichlet(mats, mesh, 0.0, (a, np.ones(1)), unit)
    rep = evaluate_field_at(PROBES, traces, mesh, (a, np.ones(1)), unit)
    exact = image_charge_field(PROBES, a[0], 1.0, 1.0)
    image = exact - rep.parts["particle"]

    print(f"{mesh.n_triangles} triangles, charge at x = {args.charge_x}")
    print(f"{'probe':>24}  {'total err':>10}  {'image err':>10}")
    for p, e, ex, b, im in zip(PROBES, rep.E, exact, rep.parts["boundary"], image):
        tot = np.linalg.norm(e - ex) / np.linalg.norm(ex)
        img = np.linalg.norm(b - im) / np.linalg.norm(im)
        print(f"{str(p):>24}  {tot:10.2e}  {img:10.2e}")


if __name__ == "__main__":
    main()
