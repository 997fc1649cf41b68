"""Preconditioned conjugate gradients with a Lanczos condition estimate.

The CG coefficients define the Lanczos tridiagonal of the preconditioned
operator ``BA``: diagonal ``1/alpha_k + beta_{k-1}/alpha_{k-1}`` and
off-diagonal ``sqrt(beta_k)/alpha_k``. Its extreme eigenvalues (found by
bisection) are Ritz values, so ``lambda_max`` is a lower bound and
``lambda_min`` an upper bound of the true extremes.
"""

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigvalsh_tridiagonal

CRITERIA = ("rel_l2_residual", "rel_precond_residual")


class IndefiniteError(ArithmeticError):
    """``p^T A p <= 0`` or ``r^T B r < 0`` met during PCG."""

    def __init__(self, iteration, message):
        self.iteration = iteration
        super().__init__(f"iteration {iteration}: {message}")


@dataclass
class SolveReport:
    iterations: int
    residual_history: list
    converged: bool
    cond_estimate: float
    lambda_min: float
    lambda_max: float
    wall_time: float
    criterion: str = "rel_l2_residual"
    alphas: list = field(default_factory=list, repr=False)
    betas: list = field(default_factory=list, repr=False)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "residual"])
            for k, r in enumerate(self.residual_history):
                w.writerow([k, repr(float(r))])


def _as_apply(op):
    if op is None:
        return lambda v: v
    if callable(op) and not hasattr(op, "shape"):
        return op
    if hasattr(op, "matvec"):
        return op.matvec
    return lambda v: op @ v


def lanczos_extremes(alphas, betas):
    """Extreme Ritz values from CG coefficients ``alpha_0..alpha_{k-1}``, ``beta_0..beta_{k-2}``."""
    a = np.asarray(alphas, dtype=float)
    b = np.asarray(betas, dtype=float)[: max(len(a) - 1, 0)]
    if len(a) == 0:
        return np.nan, np.nan
    diag = 1.0 / a
    diag[1:] += b / a[:-1]
    off = np.sqrt(b) / a[:-1]
    if len(a) == 1:
        return float(diag[0]), float(diag[0])
    lam = eigvalsh_tridiagonal(diag, off, lapack_driver="stebz")
    return float(lam[0]), float(lam[-1])


def pcg(A, b, B=None, tol=1e-10, max_iter=500, criterion="rel_l2_residual", x0=None):
    """Preconditioned CG; returns ``(x, SolveReport)``.

    ``criterion`` selects ``||r_k|| / ||r_0||`` or
    ``sqrt(r_k^T B r_k) / sqrt(r_0^T B r_0)``. Raises :class:`IndefiniteError`
    when a curvature ``p^T A p`` is not positive.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}")
    t0 = time.perf_counter()
    Aop, Bop = _as_apply(A), _as_apply(B)
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - Aop(x) if x0 is not None else b.copy()
    z = Bop(r)
    rz = float(r @ z)
    if rz < 0:
        raise IndefiniteError(0, "preconditioner is not positive")

    def measure(r, rz):
        return np.sqrt(max(rz, 0.0)) if criterion == "rel_precond_residual" else np.linalg.norm(r)

    r0 = measure(r, rz)
    hist = [1.0]
    alphas, betas = [], []
    converged = r0 == 0.0
    p = z.copy()
    k = 0
    while not converged and k < max_iter:
        Ap = Aop(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            raise IndefiniteError(k, f"p^T A p = {pAp:.3e} <= 0")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = Bop(r)
        rz_new = float(r @ z)
        if rz_new < 0:
            raise IndefiniteError(k + 1, "preconditioner is not positive")
        beta = rz_new / rz
        alphas.append(alpha)
        betas.append(beta)
        rz = rz_new
        k += 1
        rel = measure(r, rz) / r0
        hist.append(float(rel))
        if rel <= tol:
            converged = True
            break
        if rz == 0:
            break
        p = z + beta * p
    lmin, lmax = lanczos_extremes(alphas, betas)
    cond = max(lmax / lmin, 1.0) if alphas and lmin > 0 else (1.0 if not alphas else np.inf)
    report = SolveReport(k, hist, bool(converged), float(cond), lmin, lmax,
                         time.perf_counter() - t0, criterion, alphas, betas)
    return x, report


def estimate_condition(A, B, b=None, n_iters=30, seed=0):
    """``(lambda_min, lambda_max)`` of ``BA`` from ``n_iters`` PCG steps on a random right-hand side."""
    Aop = _as_apply(A)
    if b is None:
        n = A.shape[0] if hasattr(A, "shape") else None
        if n is None:
            raise ValueError("pass b when A has no shape")
        b = np.random.default_rng(seed).standard_normal(n)
    _, rep = pcg(Aop, b, B, tol=0.0, max_iter=n_iters)
    return rep.lambda_min, rep.lambda_max


def write_histories(path, reports, labels):
    """Residual histories side by side, one column per report."""
    width = max(len(r.residual_history) for r in reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", *labels])
        for k in range(width):
            w.writerow([k] + [repr(r.residual_history[k]) if k < len(r.residual_history) else ""
                              for r in reports])
