"""Linear solvers with iteration statistics.

``dense`` uses a Cholesky factorisation for symmetric positive definite
systems and LU otherwise; ``cg`` is a Jacobi-preconditioned conjugate
gradient; ``gmres`` wraps SciPy's restarted GMRES.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

__all__ = ["SolverStats", "SolverError", "LinearSolver", "conjugate_gradient"]

RTOL = 1e-8


class SolverError(RuntimeError):
    """Iterative solver did not reach the requested tolerance."""


@dataclass
class SolverStats:
    kind: str
    iterations: int
    residual: float

    def as_dict(self):
        return {"kind": self.kind, "iterations": self.iterations, "residual": self.residual}


def _as_operator(A):
    if isinstance(A, np.ndarray):
        return (lambda x: A @ x), np.diag(A).copy(), A.shape[0]
    return A.matvec, A.diagonal(), A.shape[0]


def conjugate_gradient(A, b, x0=None, rtol=RTOL, maxiter=2000, jacobi=True):
    """Preconditioned CG; returns ``(x, iterations, relative residual)``."""
    matvec, diag, n = _as_operator(A)
    b = np.asarray(b, dtype=np.float64)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n), 0, 0.0
    inv = 1.0 / diag if jacobi else np.ones(n)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    r = b - matvec(x)
    z = inv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = matvec(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r) / bnorm
        if res <= rtol:
            return x, it, res
        z = inv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge in {maxiter} iterations (residual {res:.3e})")


class LinearSolver:
    """Reusable solver for a fixed matrix.

    Parameters
    ----------
    A : ndarray
    kind : {"dense", "cg", "gmres"}
    preconditioner : {"jacobi", "none"}
    spd : bool
        Matrix is symmetric positive definite (Cholesky for ``dense``).
    """

    def __init__(self, A, kind="dense", preconditioner="jacobi", spd=False,
                 rtol=RTOL, restart=80, maxiter=2000):
        if kind not in ("dense", "cg", "gmres"):
            raise ValueError(f"unknown solver {kind!r}")
        if preconditioner not in ("jacobi", "none"):
            raise ValueError(f"unknown preconditioner {preconditioner!r}")
        self.A = A
        self.kind = kind
        self.jacobi = preconditioner == "jacobi"
        self.spd = spd
        self.rtol = rtol
        self.restart = restart
        self.maxiter = maxiter
        self._factor = None
        self.last = None

    def _dense_factor(self):
        if self._factor is None:
            if self.spd:
                self._factor = ("chol", sla.cho_factor(self.A, lower=True, check_finite=False))
            else:
                self._factor = ("lu", sla.lu_factor(self.A, check_finite=False))
        return self._factor

    def solve(self, b, x0=None):
        b = np.asarray(b, dtype=np.float64)
        bnorm = max(np.linalg.norm(b), 1e-300)
        if self.kind == "dense":
            how, f = self._dense_factor()
            x = sla.cho_solve(f, b, check_finite=False) if how == "chol" else \
                sla.lu_solve(f, b, check_finite=False)
            res = np.linalg.norm(self.A @ x - b) / bnorm
            self.last = SolverStats("dense", 1, float(res))
            return x
        if self.kind == "cg":
            x, it, res = conjugate_gradient(self.A, b, x0, self.rtol, self.maxiter, self.jacobi)
            self.last = SolverStats("cg", it, float(res))
            return x
        matvec, diag, n = _as_operator(self.A)
        A = spla.LinearOperator((n, n), matvec=matvec)
        M = spla.LinearOperator((n, n), matvec=lambda v: v / diag) if self.jacobi else None
        count = [0]

        def cb(_):
            count[0] += 1

        x, info = spla.gmres(A, b, x0=x0, rtol=self.rtol, restart=self.restart,
                             maxiter=max(1, self.maxiter // self.restart), M=M,
                             callback=cb, callback_type="pr_norm")
        res = np.linalg.norm(matvec(x) - b) / bnorm
        self.last = SolverStats("gmres", count[0], float(res))
        if info != 0 or res > 10 * self.rtol:
            raise SolverError(f"GMRES did not converge after {count[0]} iterations "
                              f"(residual {res:.3e})")
        return x
