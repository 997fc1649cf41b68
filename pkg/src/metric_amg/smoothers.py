"""Pointwise, bidomain block and Schwarz smoothers.

A patch decomposition with stacked restriction ``Rt`` turns one multiplicative
Schwarz sweep into a single block-triangular solve on the expanded matrix
``Rt A Rt^T``: the forward sweep is ``x += Rt^T (D + L)^{-1} Rt r`` with
``D + L`` the block-lower part. Both triangular parts are factored once with
SuperLU in natural order, so a sweep costs two sparse triangular solves.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .decomposition import SubspaceDecomposition, singleton_decomposition
from .sparse import EIG_CAP, DenseFactor, SingularMatrixError, csr

ADDITIVE = ("jacobi", "bidomain_block", "bidomain_diag", "schwarz_additive")
MULTIPLICATIVE = ("gauss_seidel_sym", "schwarz_multiplicative_sym")
KINDS = ADDITIVE + MULTIPLICATIVE
ADDITIVE_DAMPING = 0.6
PSEUDO_RTOL = 1e-12


@dataclass
class SmootherConfig:
    """Smoother choice; ``damping=None`` picks 1 for multiplicative and 0.6 for additive kinds."""

    kind: str = "gauss_seidel_sym"
    sweeps: int = 1
    damping: float = None
    patches: SubspaceDecomposition = None
    operator: object = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown smoother kind {self.kind!r}")
        if self.kind.startswith("schwarz") and self.patches is None:
            raise ValueError(f"{self.kind} needs a patch decomposition")
        if self.kind == "bidomain_diag" and self.operator is None:
            raise ValueError("bidomain_diag needs its 2x2-block inverse as operator")
        if self.damping is None:
            self.damping = ADDITIVE_DAMPING if self.kind in ADDITIVE else 1.0
        if not 0 < self.damping <= 1 and self.kind in ADDITIVE:
            raise ValueError("damping must lie in (0, 1]")
        if self.sweeps < 1:
            raise ValueError("at least one sweep required")

    def describe(self):
        return {"kind": self.kind, "sweeps": self.sweeps, "damping": self.damping,
                "npatches": None if self.patches is None else self.patches.npatches}


def _block_inverse(At, pid, starts, sizes):
    """Block-diagonal inverse of the patch blocks of ``At`` (pseudo-inverse for singular blocks).

    Returns the inverse as a sparse matrix and the list of singular patch ids.
    """
    m = At.shape[0]
    C = At.tocoo()
    keep = pid[C.row] == pid[C.col]
    r, c, v = C.row[keep], C.col[keep], C.data[keep]
    local_r = r - starts[pid[r]]
    local_c = c - starts[pid[c]]
    rows, cols, vals, singular = [], [], [], []
    for s in np.unique(sizes):
        ps = np.flatnonzero(sizes == s)
        where = np.full(len(sizes), -1)
        where[ps] = np.arange(len(ps))
        sel = where[pid[r]] >= 0
        blocks = np.zeros((len(ps), s, s))
        blocks[where[pid[r[sel]]], local_r[sel], local_c[sel]] = v[sel]
        lam, Q = np.linalg.eigh(blocks)
        top = np.maximum(lam[:, -1:], 0.0)
        ok = lam > PSEUDO_RTOL * top
        singular += [int(p) for p in ps[~ok.all(axis=1)]]
        linv = np.where(ok, 1.0 / np.where(ok, lam, 1.0), 0.0)
        inv = np.einsum("pik,pk,pjk->pij", Q, linv, Q)
        off = starts[ps]
        rr = off[:, None, None] + np.arange(s)[None, :, None] + np.zeros((1, 1, s), dtype=np.int64)
        cc = off[:, None, None] + np.arange(s)[None, None, :] + np.zeros((1, s, 1), dtype=np.int64)
        rows.append(rr.ravel())
        cols.append(cc.ravel())
        vals.append(inv.ravel())
    Dinv = csr((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(m, m))
    return Dinv, sorted(singular)


class Smoother:
    """Smoother bound to a matrix; :meth:`apply` performs ``cfg.sweeps`` smoothing steps."""

    def __init__(self, cfg, A):
        self.cfg = cfg
        self.A = csr(A)
        n = self.A.shape[0]
        self.singular_patches = []
        kind = cfg.kind
        if kind == "jacobi":
            d = self.A.diagonal()
            if np.any(d <= 0):
                raise SingularMatrixError(int(np.flatnonzero(d <= 0)[0]), "nonpositive diagonal")
            self._dinv = 1.0 / d
            return
        if kind == "bidomain_diag":
            self._Dinv = csr(cfg.operator)
            return
        dec = cfg.patches if cfg.patches is not None else singleton_decomposition(n)
        if dec.n != n:
            raise ValueError("patch decomposition does not match the matrix size")
        self.dec = dec
        self._Rt = dec.restriction()
        At = csr(self._Rt @ self.A @ self._Rt.T)
        pid = dec.patch_ids()
        if kind in ADDITIVE:
            sizes = np.diff(dec.indptr)
            self._Dinv, self.singular_patches = _block_inverse(At, pid, dec.indptr[:-1], sizes)
            return
        C = At.tocoo()
        lower = pid[C.row] >= pid[C.col]
        upper = pid[C.row] <= pid[C.col]
        m = At.shape[0]
        Lt = sp.csc_matrix((C.data[lower], (C.row[lower], C.col[lower])), shape=(m, m))
        Ut = sp.csc_matrix((C.data[upper], (C.row[upper], C.col[upper])), shape=(m, m))
        opts = dict(permc_spec="NATURAL", diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        try:
            self._lo = splu(Lt, **opts)
            self._up = splu(Ut, **opts)
        except RuntimeError as exc:
            raise SingularMatrixError(-1, f"singular patch block: {exc}") from exc

    def _correct(self, x, b):
        r = b - self.A @ x
        kind = self.cfg.kind
        w = self.cfg.damping
        if kind == "jacobi":
            return x + w * (self._dinv * r.T).T
        if kind == "bidomain_diag":
            return x + w * (self._Dinv @ r)
        if kind in ADDITIVE:
            return x + w * (self._Rt.T @ (self._Dinv @ (self._Rt @ r)))
        x = x + self._Rt.T @ self._lo.solve(self._Rt @ r)
        r = b - self.A @ x
        return x + self._Rt.T @ self._up.solve(self._Rt @ r)

    def apply(self, b, x=None):
        b = np.asarray(b, dtype=float)
        x = np.zeros_like(b) if x is None else np.array(x, dtype=float)
        for _ in range(self.cfg.sweeps):
            x = self._correct(x, b)
        return x


def bidomain_diagonal_block(K, M, alpha_e, alpha_i, gamma):
    """Inverse of ``[[a_e D_K + g D_M, -g D_M], [-g D_M, a_i D_K + g D_M]]`` with ``D`` the diagonals."""
    dk, dm = K.diagonal(), M.diagonal()
    a, b, c = alpha_e * dk + gamma * dm, -gamma * dm, alpha_i * dk + gamma * dm
    det = a * c - b * b
    return csr(sp.bmat([[sp.diags(c / det), sp.diags(-b / det)], [sp.diags(-b / det), sp.diags(a / det)]]))


def apply_smoother(cfg, A, b, x=None):
    """One call of the configured smoother (builds the factorization each time)."""
    return Smoother(cfg, A).apply(b, x)


def smoother_as_operator(cfg, A, cap=EIG_CAP, smoother=None):
    """Explicit matrix of ``b -> smoother(b, x=0)``, assembled from all unit vectors at once."""
    n = A.shape[0]
    if n > cap:
        raise ValueError(f"explicit smoother operator limited to {cap} DOFs")
    S = smoother if smoother is not None else Smoother(cfg, A)
    return S.apply(np.eye(n))


@dataclass
class PatchFactorization:
    """Dense factorizations of ``A`` restricted to every patch."""

    factors: list
    singular: list

    @classmethod
    def build(cls, A, dec):
        A = csr(A)
        factors, singular = [], []
        for p in range(dec.npatches):
            idx = dec.patch(p)
            f = DenseFactor(A[idx][:, idx].toarray(), symmetric=True, pseudo=True)
            factors.append(f)
            if f.singular:
                singular.append(p)
        return cls(factors, singular)

    def solve(self, p, b):
        return self.factors[p].solve(b)


def contraction_factor(smoother, A, Z, iters=20, seed=0):
    """Observed A-norm contraction of the smoother error propagator on the span of ``Z``.

    Runs a power iteration of ``E = I - S A`` restricted to the columns of
    ``Z`` (re-projected every step) and returns the final per-step ratio.
    """
    rng = np.random.default_rng(seed)
    Q = la.qr(Z, mode="economic")[0]
    e = Q @ rng.standard_normal(Q.shape[1])
    rate = 0.0
    for _ in range(iters):
        na = np.sqrt(e @ (A @ e))
        e = e / na
        e2 = e - smoother.apply(A @ e)
        rate = np.sqrt(e2 @ (A @ e2))
        e = Q @ (Q.T @ e2)
        if np.linalg.norm(e) == 0:
            break
    return float(rate)
