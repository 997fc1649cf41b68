"""Aggregation hierarchies and multigrid cycles.

The fine level carries the configured smoother (Schwarz patches built from
the coupling map); coarser levels use symmetric Gauss-Seidel. The coarsest
level is solved directly.
"""

import json
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .decomposition import (active_dofs, aggregate, build_neighborhoods, build_patches, metric_map,
                            pair_patches, seed_groups, singleton_decomposition, strength_matrix,
                            tentative_prolongation)
from .smoothers import Smoother, SmootherConfig, bidomain_diagonal_block
from .sparse import DenseFactor, csr

DENSE_COARSE_CAP = 2000
POWER_ITERS = 10


class HierarchyError(RuntimeError):
    def __init__(self, level, message):
        self.level = level
        super().__init__(f"level {level}: {message}")


def ua_prolongation(agg):
    """0/1 prolongation with ``P[i, k] = 1`` iff DOF ``i`` lies in aggregate ``k``."""
    return tentative_prolongation(agg)


def spectral_radius_dinv_a(A, iters=POWER_ITERS, seed=0):
    """Power-iteration estimate of ``rho(D^{-1} A)``."""
    A = csr(A)
    d = A.diagonal()
    d = np.where(d == 0, 1.0, d)
    x = np.random.default_rng(seed).standard_normal(A.shape[0])
    lam = 0.0
    for _ in range(iters):
        y = (A @ x) / d
        lam = np.linalg.norm(y) / np.linalg.norm(x)
        x = y / np.linalg.norm(y)
    return float(lam)


def sa_prolongation(P_tent, A, omega=None):
    """Jacobi-smoothed prolongation ``(I - omega D^{-1} A) P_tent``.

    ``omega`` defaults to ``(4/3) / rho(D^{-1} A)``, i.e. two thirds of the
    admissible interval ``(0, 2/rho)``.
    """
    A = csr(A)
    if omega is None:
        omega = 4.0 / (3.0 * spectral_radius_dinv_a(A))
    d = A.diagonal()
    dinv = np.where(d == 0, 0.0, 1.0 / np.where(d == 0, 1.0, d))
    P = csr(P_tent) - omega * csr(sp.diags(dinv) @ (A @ P_tent))
    P = csr(P)
    P.eliminate_zeros()
    return P


def bidomain_special_prolongation(n_total):
    """``[I; I]`` mapping one scalar field onto both aligned fields."""
    if n_total % 2:
        raise ValueError("two aligned fields need an even DOF count")
    n = n_total // 2
    I = sp.identity(n, format="csr")
    return csr(sp.vstack([I, I]))


@dataclass
class HierarchyOptions:
    """Hierarchy settings.

    ``prolongation`` is ``ua``, ``sa``, ``special`` (``[I; I]`` on the fine
    level, then ``coarse_prolongation``) or ``paired`` (two aligned fields
    coarsened by the same aggregates, ``diag(P, P)``, with pair-patch Schwarz
    smoothing on every level). ``constrained=False`` drops the metric-map
    seeds from the fine aggregation. ``seed_threshold > 0`` keeps only seeds
    whose coupling strength in ``A`` reaches the threshold.
    """

    prolongation: str = "ua"
    coarse_prolongation: str = "ua"
    smoother: str = "schwarz_multiplicative_sym"
    coarse_smoother: str = "gauss_seidel_sym"
    constrained: bool = True
    c_agg: int = 8
    max_levels: int = 10
    coarse_size_cap: int = 200
    cycle: str = "W"
    pre_sweeps: int = 1
    post_sweeps: int = 1
    sa_omega: float = None
    strength: str = "A1"
    damping: float = None
    seed_threshold: float = 0.0

    def __post_init__(self):
        if self.prolongation not in ("ua", "sa", "special", "paired"):
            raise ValueError(f"unknown prolongation {self.prolongation!r}")
        if self.coarse_prolongation not in ("ua", "sa"):
            raise ValueError(f"unknown coarse prolongation {self.coarse_prolongation!r}")
        if self.cycle not in ("V", "W"):
            raise ValueError("cycle must be 'V' or 'W'")
        if self.pre_sweeps + self.post_sweeps < 1:
            raise ValueError("at least one smoothing step per level")
        if self.strength not in ("A1", "A"):
            raise ValueError("strength must be computed from 'A1' or 'A'")

    @classmethod
    def from_dict(cls, data):
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass
class Level:
    A: sp.csr_matrix
    A1: sp.csr_matrix
    P: sp.csr_matrix = None
    smoother: Smoother = None
    aggregation: object = None


@dataclass
class Hierarchy:
    levels: list
    coarse_solver: object
    options: HierarchyOptions
    setup_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @property
    def nlevels(self):
        return len(self.levels)

    def sizes(self):
        return [lev.A.shape[0] for lev in self.levels]

    def operator_complexity(self):
        nnz = [lev.A.nnz for lev in self.levels]
        return sum(nnz) / nnz[0]

    def stats(self):
        return {"sizes": self.sizes(), "nnz": [int(lev.A.nnz) for lev in self.levels],
                "operator_complexity": self.operator_complexity(),
                "smoothers": [lev.smoother.cfg.describe() if lev.smoother else None for lev in self.levels],
                "cycle": self.options.cycle, "setup_s": self.setup_time}

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.stats(), fh, indent=2)

    def aggregations(self):
        return [lev.aggregation for lev in self.levels]

    def solve_coarse(self, b):
        return self.coarse_solver.solve(b)

    def __call__(self, b):
        return cycle(self, b)


class _CoarseSolver:
    def __init__(self, A):
        n = A.shape[0]
        if n <= DENSE_COARSE_CAP:
            self._f = DenseFactor(A.toarray(), symmetric=True, pseudo=True)
            self.singular = self._f.singular
        else:
            self._f = splu(sp.csc_matrix(A))
            self.singular = False

    def solve(self, b):
        return self._f.solve(b)


def fine_patches(system, kind):
    """Patch decomposition used by the fine-level smoother of ``kind``."""
    if kind in ("schwarz_multiplicative_sym", "schwarz_additive", "bidomain_block"):
        nb = build_neighborhoods(system.R, system.partition)
        return build_patches(nb, system.partition, R=system.R)
    return None


def fine_seeds(system, threshold=0.0):
    """Aggregation seeds ``{j} + L^{-1}(j)``; Dirichlet-isolated DOFs are not admissible targets.

    With ``threshold > 0`` an interface DOF ``i`` joins the seed of ``L(i)``
    only when their strength ``|a_ij| / sqrt(a_ii a_jj)`` in the full matrix
    reaches ``threshold``; weakly coupled pairs are left to plain matching.
    """
    part = system.partition
    if len(part.gamma) == 0:
        return []
    targets = np.intersect1d(part.omega, active_dofs(system.A))
    L = metric_map(part, coords=system.coords, A=None if system.coords is not None else system.A,
                   targets=targets)
    if threshold > 0:
        A = system.A
        d = A.diagonal()
        gamma = np.asarray(part.gamma)
        a = np.abs(np.asarray(A[gamma, L]).ravel())
        strong = a >= threshold * np.sqrt(d[gamma] * d[L])
        sub = type(part)(part.n_total, part.omega, gamma[strong],
                         np.concatenate([part.rest, gamma[~strong]]))
        return seed_groups(L[strong], sub)
    return seed_groups(L, part)


def _smoother(kind, A, patches, opts, system=None):
    if kind == "bidomain_diag":
        meta = system.meta
        op = bidomain_diagonal_block(meta["K"], meta["M"], meta["alpha_e"], meta["alpha_i"], system.gamma)
        cfg = SmootherConfig(kind, operator=op, damping=opts.damping)
    else:
        cfg = SmootherConfig(kind, patches=patches, damping=opts.damping
                             if kind not in ("gauss_seidel_sym", "schwarz_multiplicative_sym") else None)
    return Smoother(cfg, A)


def _check_spd_diag(A, level):
    d = A.diagonal()
    if np.any(d <= 0):
        raise HierarchyError(level, f"Galerkin operator lost positive definiteness (diagonal entry {d.min():.3e})")


def build_hierarchy(system, options=None, reuse=None):
    """Build the multilevel hierarchy for ``system``.

    ``reuse`` may be an earlier hierarchy for the same problem at another
    ``gamma``; its aggregations and patches are reused (they depend only on
    ``A1``, ``R`` and the coordinates) unless smoothed prolongations make the
    coarse operators depend on ``gamma``.
    """
    opts = options or HierarchyOptions()
    t0 = time.perf_counter()
    A, A1 = system.A, system.A1
    kind = opts.smoother
    _check_spd_diag(A, 0)
    patches = None
    reuse_ok = reuse is not None and reuse.options == opts
    # aggregations stay valid across gamma while they see only A1-derived, gamma-free data
    agg_reusable = reuse_ok and opts.seed_threshold == 0 and opts.strength == "A1"
    if opts.prolongation == "paired":
        part = system.partition
        m = system.n // 2
        if system.n % 2 or not (np.array_equal(part.omega, np.arange(m))
                                and np.array_equal(part.gamma, m + np.arange(m))):
            raise ValueError("paired prolongation needs two aligned fields ordered [omega, gamma]")
    if kind in ("schwarz_multiplicative_sym", "schwarz_additive", "bidomain_block"):
        patches = reuse.meta["patches"] if reuse_ok and reuse.meta.get("patches") is not None \
            else fine_patches(system, kind)
    levels = []
    meta = {"patches": patches}
    level = 0
    while True:
        n = A.shape[0]
        if n <= opts.coarse_size_cap or level == opts.max_levels - 1:
            levels.append(Level(A, A1))
            break
        if opts.prolongation == "paired":
            m = n // 2
            # on coarse levels the pointwise 2x2 block smoother is the additive pair smoother
            ck = kind if level == 0 or kind != "bidomain_diag" else "bidomain_block"
            sm = _smoother(ck, A, patches if level == 0 else pair_patches(m), opts, system)
        elif level == 0:
            sm = _smoother(kind, A, patches, opts, system)
        else:
            sm = _smoother(opts.coarse_smoother, A, None, opts)
        agg = None
        if level == 0 and opts.prolongation == "special":
            P = bidomain_special_prolongation(n)
        elif opts.prolongation == "paired":
            cached = reuse.levels[level].aggregation if agg_reusable and level < reuse.nlevels - 1 else None
            agg = cached if cached is not None and 2 * len(cached.labels) == n \
                else aggregate(strength_matrix(abs(A1[:m, :m]) + abs(A1[m:, m:])), (), opts.c_agg)
            Ps = ua_prolongation(agg)
            Pe = Ps
            if level == 0 and len(system.bc_indices):
                keep = np.ones(m)
                keep[system.bc_indices[system.bc_indices < m]] = 0.0
                Pe = csr(sp.diags(keep) @ Ps)
            P = csr(sp.block_diag([Pe, Ps]))
        else:
            cached = reuse.levels[level].aggregation if agg_reusable and level < reuse.nlevels - 1 else None
            if cached is not None and len(cached.labels) == n:
                agg = cached
            else:
                S = strength_matrix(A1 if opts.strength == "A1" else A)
                seeds = fine_seeds(system, opts.seed_threshold) if level == 0 and opts.constrained else []
                agg = aggregate(S, seeds, opts.c_agg, isolated=_isolated(A, seeds))
            P = ua_prolongation(agg)
            use_sa = opts.prolongation == "sa" if level == 0 else opts.coarse_prolongation == "sa"
            if use_sa:
                P = sa_prolongation(P, A, opts.sa_omega)
                agg_reusable = False
        if P.shape[1] == 0 or P.shape[1] >= n:
            levels.append(Level(A, A1))
            break
        levels.append(Level(A, A1, P, sm, agg))
        A = csr(P.T @ A @ P)
        A1 = csr(P.T @ A1 @ P)
        # coarse DOFs built only from Dirichlet rows are decoupled; a unit diagonal keeps them inert
        dead = np.flatnonzero(np.diff(csr(P.T).indptr) == 0) if opts.prolongation == "paired" else []
        if len(dead):
            pin = np.zeros(A.shape[0])
            pin[dead] = 1.0
            A, A1 = csr(A + sp.diags(pin)), csr(A1 + sp.diags(pin))
        level += 1
        _check_spd_diag(A, level)
    coarse = _CoarseSolver(levels[-1].A)
    meta["coarse_singular"] = coarse.singular
    return Hierarchy(levels, coarse, opts, time.perf_counter() - t0, meta)


def _isolated(A, seeds):
    """DOFs whose row in ``A`` is purely diagonal and that belong to no seed."""
    iso = np.ones(A.shape[0], dtype=bool)
    iso[active_dofs(A)] = False
    for s in seeds:
        iso[s] = False
    return iso


def cycle(hier, b, x=None):
    """One multigrid cycle; with ``x=None`` this is a fixed linear map of ``b``."""
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b) if x is None else np.array(x, dtype=float)
    return _cycle(hier, 0, b, x)


def _cycle(hier, l, b, x):
    levels = hier.levels
    if l == len(levels) - 1:
        return hier.solve_coarse(b)
    lev = levels[l]
    opts = hier.options
    for _ in range(opts.pre_sweeps):
        x = lev.smoother.apply(b, x)
    rc = lev.P.T @ (b - lev.A @ x)
    ec = _cycle(hier, l + 1, rc, np.zeros_like(rc))
    if opts.cycle == "W" and l + 1 < len(levels) - 1:
        ec = _cycle(hier, l + 1, rc, ec)
    x = x + lev.P @ ec
    for _ in range(opts.post_sweeps):
        x = lev.smoother.apply(b, x)
    return x


def as_linear_operator(hier):
    from scipy.sparse.linalg import LinearOperator
    n = hier.levels[0].A.shape[0]
    return LinearOperator((n, n), matvec=lambda v: cycle(hier, v), dtype=float)


def two_level_additive(A, P, dec):
    """Dense ``B = P A_c^{-1} P^T + sum_j R_j^T A_j^{-1} R_j`` (desk scale)."""
    A = csr(A)
    n = A.shape[0]
    B = np.zeros((n, n))
    if P is not None:
        P = csr(P)
        Ac = (P.T @ A @ P).toarray()
        Pd = P.toarray()
        B += Pd @ DenseFactor(Ac, symmetric=True, pseudo=True).solve(Pd.T)
    dec = dec or singleton_decomposition(n)
    Ad = A.toarray()
    for p in range(dec.npatches):
        idx = dec.patch(p)
        B[np.ix_(idx, idx)] += DenseFactor(Ad[np.ix_(idx, idx)], symmetric=True, pseudo=True).inverse()
    return B


def preconditioned_spectrum(A, B):
    """Ascending eigenvalues of ``BA`` for dense SPD ``B``, via ``L^T A L`` with ``B = L L^T``."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    L = la.cholesky(0.5 * (B + B.T), lower=True)
    C = L.T @ A @ L
    return la.eigvalsh(0.5 * (C + C.T))
