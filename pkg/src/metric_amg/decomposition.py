"""Kernel-aware subspace splitting and constrained aggregation.

The Schwarz patches pair every coupled-side DOF ``j`` with the interface DOFs
``N_j`` that the coupling map ``R`` links to it, so that each spanning
vector of ``Ker(A0)`` lives inside a single patch. Aggregation starts from
the groups ``{j} + L^{-1}(j)`` (interface DOFs attached to their nearest
coupled-side DOF), which makes the metric term vanish on the coarse space.
"""

import json
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import shortest_path
from scipy.spatial import cKDTree

from .sparse import csr, nullspace, range_basis

KERNEL_TOL = 1e-10
VERIFY_CAP = 5000


def _ragged(lists):
    ptr = np.zeros(len(lists) + 1, dtype=np.int64)
    ptr[1:] = np.cumsum([len(x) for x in lists])
    idx = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists]) if lists else np.zeros(0, np.int64)
    return ptr, idx


@dataclass
class Neighborhoods:
    """``N_j`` for every coupled-side DOF ``omega[k]``, stored as a ragged array."""

    omega: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.omega)

    def __getitem__(self, j):
        k = np.searchsorted(self.omega, j)
        if k >= len(self.omega) or self.omega[k] != j:
            raise KeyError(j)
        return self.indices[self.indptr[k]:self.indptr[k + 1]]

    def reached(self):
        return np.unique(self.indices)


def build_neighborhoods(R, partition):
    """``N_j`` = interface DOFs sharing a row of ``R`` with coupled-side DOF ``j``."""
    R = csr(R)
    omega = np.sort(partition.omega)
    gamma = np.asarray(partition.gamma)
    Ro = abs(R[:, omega])
    Rg = abs(R[:, gamma])
    pattern = csr(Ro.T @ Rg)
    pattern.eliminate_zeros()
    return Neighborhoods(omega, pattern.indptr.copy(), gamma[pattern.indices])


@dataclass
class SubspaceDecomposition:
    """Overlapping index patches with partition-of-unity weights.

    ``kernel_frames[p]`` is aligned with ``patch(p)`` and spans
    ``Ker(A0)`` restricted to that patch, or is ``None`` when the patch holds
    no kernel vector.
    """

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    pou_weights: np.ndarray
    kernel_frames: list

    @property
    def npatches(self):
        return len(self.indptr) - 1

    def patch(self, p):
        return self.indices[self.indptr[p]:self.indptr[p + 1]]

    @property
    def patches(self):
        return [self.patch(p) for p in range(self.npatches)]

    def patch_ids(self):
        """Patch index of every entry of ``indices``."""
        return np.repeat(np.arange(self.npatches), np.diff(self.indptr))

    def restriction(self):
        """Stacked patch selections, shape ``(sum |V_p|, n)``."""
        m = len(self.indices)
        return sp.csr_matrix((np.ones(m), self.indices, np.arange(m + 1)), shape=(m, self.n))

    def multiplicity(self):
        return np.bincount(self.indices, minlength=self.n)

    def split(self, v):
        """Pieces ``chi_p v`` (one vector per patch, aligned with the patch)."""
        w = self.pou_weights[self.indices] * np.asarray(v)[self.indices]
        return [w[self.indptr[p]:self.indptr[p + 1]] for p in range(self.npatches)]

    def assemble(self, pieces):
        out = np.zeros(self.n)
        np.add.at(out, self.indices, np.concatenate(pieces) if pieces else np.zeros(0))
        return out

    def to_json(self):
        return {"n": int(self.n), "patches": [p.tolist() for p in self.patches],
                "pou_weights": self.pou_weights.tolist(),
                "kernel_frames": [None if f is None else f.tolist() for f in self.kernel_frames]}


def _interface_rows(R, gamma):
    """Map each row of ``R`` to its single interface DOF and coefficient (or -1 when absent)."""
    Rg = csr(R[:, gamma])
    Rg.eliminate_zeros()
    counts = np.diff(Rg.indptr)
    if np.any(counts > 1):
        return None, None
    g = np.full(R.shape[0], -1, dtype=np.int64)
    c = np.zeros(R.shape[0])
    has = counts == 1
    g[has] = gamma[Rg.indices]
    c[has] = Rg.data
    return g, c


def build_patches(nbhd, partition, R=None, singleton_rest=True):
    """One patch ``{j} + N_j`` per coupled-side DOF, then singletons for any uncovered DOF.

    When ``R`` is given, each patch with nonempty ``N_j`` carries the kernel
    frame ``e_j - R_gamma^{-1} R_omega e_j`` restricted to the patch.
    """
    n = partition.n_total
    if n == 0:
        raise ValueError("empty decomposition")
    lists = [np.concatenate([[j], nbhd.indices[nbhd.indptr[k]:nbhd.indptr[k + 1]]])
             for k, j in enumerate(nbhd.omega)]
    covered = np.zeros(n, dtype=bool)
    covered[nbhd.omega] = True
    covered[nbhd.indices] = True
    if singleton_rest:
        lists += [[i] for i in np.flatnonzero(~covered)]
    elif not covered.all():
        raise ValueError("patches do not cover all DOFs")
    indptr, indices = _ragged(lists)
    mult = np.bincount(indices, minlength=n)
    frames = [None] * len(lists)
    if R is not None:
        R = csr(R)
        g, c = _interface_rows(R, np.asarray(partition.gamma))
        if g is not None:
            Rc = R.tocsc()
            for k, j in enumerate(nbhd.omega):
                if nbhd.indptr[k + 1] == nbhd.indptr[k]:
                    continue
                rows = Rc.indices[Rc.indptr[j]:Rc.indptr[j + 1]]
                vals = Rc.data[Rc.indptr[j]:Rc.indptr[j + 1]]
                patch = lists[k]
                frame = np.zeros(len(patch))
                frame[0] = 1.0
                pos = {int(d): q for q, d in enumerate(patch)}
                for r, a in zip(rows, vals):
                    if g[r] >= 0:
                        frame[pos[int(g[r])]] -= a / c[r]
                frames[k] = frame
    return SubspaceDecomposition(n, indptr, indices, 1.0 / mult, frames)


def singleton_decomposition(n):
    """Pointwise splitting: one patch per DOF."""
    idx = np.arange(n)
    return SubspaceDecomposition(n, np.arange(n + 1), idx, np.ones(n), [None] * n)


def pair_patches(m):
    """Patches ``{j, m + j}`` for two aligned fields of ``m`` DOFs each."""
    idx = np.column_stack([np.arange(m), m + np.arange(m)]).ravel()
    return SubspaceDecomposition(2 * m, np.arange(0, 2 * m + 1, 2), idx, np.ones(2 * m),
                                 [np.ones(2)] * m)


def active_dofs(A):
    """DOFs with at least one nonzero off-diagonal entry."""
    A = csr(A)
    off = A - sp.diags(A.diagonal())
    off.eliminate_zeros()
    return np.flatnonzero(np.diff(off.indptr) > 0)


def metric_map(partition, coords=None, A=None, targets=None, k=8):
    """Nearest coupled-side DOF ``L(i)`` for every interface DOF ``i``.

    Euclidean distance on ``coords`` when given, else hop distance in the
    graph of ``A``. Ties go to the lowest index. ``targets`` restricts the
    admissible coupled-side DOFs (defaults to all of them).
    """
    omega = np.sort(partition.omega) if targets is None else np.sort(np.asarray(targets))
    gamma = np.asarray(partition.gamma)
    if len(gamma) == 0:
        return np.zeros(0, dtype=np.int64)
    if len(omega) == 0:
        raise ValueError("no admissible coupled-side DOFs")
    if coords is not None:
        coords = np.asarray(coords, dtype=float)
        tree = cKDTree(coords[omega])
        kk = min(k, len(omega))
        dist, idx = tree.query(coords[gamma], k=kk)
        dist, idx = dist.reshape(len(gamma), kk), idx.reshape(len(gamma), kk)
        scale = max(np.ptp(coords, axis=0).max(), 1.0)
        tie = dist <= dist[:, :1] + 1e-12 * scale
        cand = np.where(tie, omega[idx], np.iinfo(np.int64).max)
        return cand.min(axis=1)
    if A is None:
        raise ValueError("either coordinates or a matrix is required")
    hops = shortest_path(abs(csr(A)), unweighted=True, indices=gamma)
    d = hops[:, omega]
    return omega[np.argmin(d, axis=1)]


def seed_groups(L, partition):
    """Groups ``{j} + L^{-1}(j)`` for every ``j`` with nonempty preimage."""
    gamma = np.asarray(partition.gamma)
    if len(gamma) == 0:
        return []
    order = np.lexsort((gamma, L))
    Ls, gs = L[order], gamma[order]
    starts = np.flatnonzero(np.concatenate([[True], Ls[1:] != Ls[:-1]]))
    ends = np.append(starts[1:], len(Ls))
    return [np.concatenate([[Ls[s]], gs[s:e]]) for s, e in zip(starts, ends)]


def redefine_a0(system, L):
    """Metric term with every interface DOF tied to ``L(i)`` only:
    ``sum_i m_i (e_i - e_{L(i)})(e_i - e_{L(i)})^T``, ``m_i`` the interface mass row sums."""
    gamma = np.asarray(system.partition.gamma)
    R = csr(system.R)
    g, c = _interface_rows(R, gamma)
    m = np.zeros(system.n)
    if g is not None:
        has = g >= 0
        m[g[has]] = np.asarray(system.M_gamma.sum(axis=1)).ravel()[has] * c[has] ** 2
    else:
        m[gamma] = np.asarray(system.M_gamma.sum(axis=1)).ravel()[:len(gamma)]
    w = m[gamma]
    rows = np.concatenate([gamma, L, gamma, L])
    cols = np.concatenate([gamma, L, L, gamma])
    vals = np.concatenate([w, w, -w, -w])
    return csr((vals, (rows, cols)), shape=(system.n, system.n))


def strength_matrix(A):
    """Symmetric strength ``|a_ij| / sqrt(a_ii a_jj)`` on off-diagonal entries."""
    A = csr(A)
    d = np.abs(A.diagonal())
    d[d == 0] = 1.0
    s = 1.0 / np.sqrt(d)
    S = csr(sp.diags(s) @ abs(A) @ sp.diags(s))
    S.setdiag(0.0)
    S.eliminate_zeros()
    return S


@dataclass
class Aggregation:
    """Aggregate id per DOF; ``-1`` marks isolated DOFs left out of the coarse space."""

    labels: np.ndarray
    n_agg: int
    c_agg: int

    def members(self):
        order = np.argsort(self.labels, kind="stable")
        lab = self.labels[order]
        keep = lab >= 0
        order, lab = order[keep], lab[keep]
        cuts = np.searchsorted(lab, np.arange(self.n_agg + 1))
        return [order[cuts[k]:cuts[k + 1]] for k in range(self.n_agg)]

    def sizes(self):
        return np.bincount(self.labels[self.labels >= 0], minlength=self.n_agg)

    def to_json(self):
        return {"labels": self.labels.tolist(), "n_agg": int(self.n_agg), "c_agg": int(self.c_agg)}


def _match_arrays(indptr, indices, data, size, c_agg):
    """One greedy pairing pass on a strength graph between groups.

    Each unmatched group joins its strongest unmatched neighbour when the
    combined size stays within ``c_agg``. Returns ``(labels, ngroups)``.
    """
    n = len(indptr) - 1
    label = np.full(n, -1, dtype=np.int64)
    nxt = 0
    for i in range(n):
        if label[i] >= 0:
            continue
        best = -1
        bw = 0.0
        for q in range(indptr[i], indptr[i + 1]):
            k = indices[q]
            w = data[q]
            if w > bw and label[k] < 0 and k != i and size[i] + size[k] <= c_agg:
                best = k
                bw = w
        label[i] = nxt
        if best >= 0:
            label[best] = nxt
        nxt += 1
    return label, nxt


try:  # the matching loop dominates setup time on large graphs
    from numba import njit
    _match = njit(cache=True)(_match_arrays)
except ImportError:  # pragma: no cover
    _match = _match_arrays


def aggregate(S, seeds=(), c_agg=8, passes=None, isolated=None):
    """Constrained pairwise aggregation.

    Parameters
    ----------
    S : sparse matrix or WeightedGraph
        Symmetric strength graph (off-diagonal weights).
    seeds : sequence of index arrays
        Groups placed into one aggregate each before matching.
    c_agg : int
        Maximal aggregate size.
    passes : int, optional
        Number of pairwise passes; defaults to ``ceil(log2(c_agg))``.
    isolated : array of bool, optional
        DOFs with no couplings; they get label ``-1``. Defaults to DOFs
        without neighbours in ``S`` that are not in a seed.
    """
    if hasattr(S, "edges"):
        from .sparse import graph_laplacian
        L = graph_laplacian(S)
        S = csr(-L)
        S.setdiag(0.0)
        S.eliminate_zeros()
    S = csr(S)
    n = S.shape[0]
    if passes is None:
        passes = int(np.ceil(np.log2(max(c_agg, 2))))
    label = np.full(n, -1, dtype=np.int64)
    for g, members in enumerate(seeds):
        if np.any(label[members] >= 0):
            raise ValueError("seed groups overlap")
        label[members] = g
    nseed = len(seeds)
    if isolated is None:
        isolated = (np.diff(S.indptr) == 0) & (label < 0)
    free = np.flatnonzero((label < 0) & ~isolated)
    # free DOFs start as singletons after the seeds
    label[free] = nseed + np.arange(len(free))
    ngroups = nseed + len(free)
    for _ in range(passes):
        active = label >= 0
        Pg = sp.csr_matrix((np.ones(active.sum()), (np.flatnonzero(active), label[active])),
                           shape=(n, ngroups))
        Sg = csr(Pg.T @ S @ Pg)
        size = np.bincount(label[active], minlength=ngroups).astype(np.int64)
        glabel, nnew = _match(Sg.indptr, Sg.indices, Sg.data, size, c_agg)
        if nnew == ngroups:
            break
        label[active] = glabel[label[active]]
        ngroups = nnew
    return Aggregation(label, int(ngroups), int(c_agg))


@dataclass
class KernelReport:
    passed: bool
    residual: float
    kernel_dim: int
    span_dim: int


def _local_kernel(A0, cols):
    """Basis of ``{y : A0[:, cols] y = 0}``."""
    B = A0[:, cols]
    rows = np.unique(B.nonzero()[0])
    if len(rows) == 0:
        return np.eye(len(cols))
    Bd = B[rows].toarray()
    _, s, Vt = np.linalg.svd(Bd)
    scale = s[0] if s.size else 0.0
    rank = int(np.sum(s > KERNEL_TOL * scale)) if scale > 0 else 0
    return Vt[rank:].T


def verify_kernel_condition(dec, coarse, A0, tol=1e-8, cap=VERIFY_CAP):
    """Check that ``Ker(A0)`` is the sum of its intersections with the patches and the coarse space.

    ``coarse`` is an :class:`Aggregation` or a prolongation matrix (``None``
    for no coarse space). Every kernel basis vector must be reproduced by the
    span of the local kernel pieces to ``tol``.
    """
    A0 = csr(A0)
    n = A0.shape[0]
    if n > cap:
        raise ValueError(f"kernel check limited to {cap} DOFs")
    K = nullspace(A0, KERNEL_TOL)
    pieces = []
    for p in range(dec.npatches):
        idx = dec.patch(p)
        Z = _local_kernel(A0, idx)
        if Z.shape[1]:
            W = np.zeros((n, Z.shape[1]))
            W[idx] = Z
            pieces.append(W)
    if coarse is not None:
        P = coarse if sp.issparse(coarse) else tentative_prolongation(coarse)
        Z = _local_kernel(csr(A0 @ P), np.arange(P.shape[1]))
        if Z.shape[1]:
            pieces.append(P @ Z)
    W = np.hstack(pieces) if pieces else np.zeros((n, 0))
    Q = range_basis(W, KERNEL_TOL)
    resid = K - Q @ (Q.T @ K) if K.shape[1] else np.zeros((n, 0))
    r = float(np.max(np.linalg.norm(resid, axis=0))) if K.shape[1] else 0.0
    return KernelReport(r <= tol, r, K.shape[1], Q.shape[1])


def tentative_prolongation(agg):
    """Piecewise-constant interpolation; isolated DOFs get zero rows."""
    keep = np.flatnonzero(agg.labels >= 0)
    return csr((np.ones(len(keep)), (keep, agg.labels[keep])), shape=(len(agg.labels), agg.n_agg))


def dump_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj.to_json(), fh)
