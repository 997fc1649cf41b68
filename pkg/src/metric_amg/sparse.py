"""CSR helpers, weighted graphs and small dense kernels.

Sparse operators throughout the package are plain ``scipy.sparse.csr_matrix``
objects kept in canonical form (sorted column indices, no duplicates).
Dense routines are meant for local patches, coarse grids and test oracles.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

SYMMETRY_RTOL = 1e-12
PIVOT_RTOL = 1e-14
DENSE_CAP = 64
EIG_CAP = 2000


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when a dense factorization meets a pivot below tolerance."""

    def __init__(self, pivot, message=None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is singular to tolerance at pivot {self.pivot}")


class NonSymmetricError(ValueError):
    pass


def csr(A, shape=None):
    """Return ``A`` as a canonical float64 CSR matrix.

    Duplicate entries are summed and column indices sorted, so that two
    matrices with the same entries have identical storage.
    """
    if isinstance(A, tuple):
        A = sp.coo_matrix(A, shape=shape)
    A = sp.csr_matrix(A, dtype=np.float64, copy=True)
    A.sum_duplicates()
    A.sort_indices()
    A.indptr = A.indptr.astype(np.int64, copy=False)
    A.indices = A.indices.astype(np.int64, copy=False)
    return A


def is_symmetric(A, rtol=SYMMETRY_RTOL):
    """Check ``|a_ij - a_ji| <= rtol * max(|a_ij|, |a_ji|, 1)`` on stored pairs."""
    A = sp.csr_matrix(A)
    if A.shape[0] != A.shape[1]:
        return False
    D = (A - A.T).tocoo()
    if D.nnz == 0:
        return True
    At = A.T.tocsr()
    a = np.abs(np.asarray(A[D.row, D.col]).ravel())
    b = np.abs(np.asarray(At[D.row, D.col]).ravel())
    bound = rtol * np.maximum(np.maximum(a, b), 1.0)
    return bool(np.all(np.abs(D.data) <= bound))


def check_csr(A):
    """Assert the CSR structural invariants; returns ``A`` for chaining."""
    n = A.shape[0]
    if len(A.indptr) != n + 1 or A.indptr[-1] != A.nnz:
        raise ValueError("row_offsets must have length nrows+1 and end at nnz")
    if np.any(np.diff(A.indptr) < 0):
        raise ValueError("row_offsets must be nondecreasing")
    for i in range(n):
        cols = A.indices[A.indptr[i]:A.indptr[i + 1]]
        if np.any(np.diff(cols) <= 0):
            raise ValueError(f"row {i} is not in canonical form")
    return A


def spmv(A, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != A.shape[1]:
        raise ValueError(f"dimension mismatch: matrix has {A.shape[1]} columns, vector {x.shape[0]}")
    return A @ x


def identity(n):
    return csr(sp.identity(n))


def tridiag(n, lower=-1.0, diag=2.0, upper=-1.0):
    return csr(sp.diags([lower, diag, upper], [-1, 0, 1], shape=(n, n)))


def path_laplacian(n, weight=1.0):
    """Graph Laplacian of the path 0-1-...-(n-1) with uniform edge weight."""
    i = np.arange(1, n)
    return graph_laplacian(WeightedGraph(n, np.column_stack([i, i - 1]), np.full(n - 1, weight)))


def block_diag(*blocks):
    return csr(sp.block_diag(blocks))


@dataclass(frozen=True)
class WeightedGraph:
    """Undirected graph with edges stored as ``(i, j)`` pairs, ``j < i``."""

    nvertices: int
    edges: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        weights = np.asarray(self.weights, dtype=np.float64).ravel()
        if len(edges) != len(weights):
            raise ValueError("one weight per edge required")
        if np.any(edges[:, 1] >= edges[:, 0]):
            raise ValueError("edges must be ordered as (i, j) with j < i")
        if np.any(weights <= 0):
            raise ValueError("edge weights must be strictly positive")
        keys = edges[:, 0] * self.nvertices + edges[:, 1]
        if len(np.unique(keys)) != len(keys):
            raise ValueError("duplicate edges")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "weights", weights)

    @property
    def nedges(self):
        return len(self.weights)

    def edge_set(self):
        return {(int(i), int(j)) for i, j in self.edges}


def graph_of(A, weights=None):
    """Graph of the sparsity pattern of a symmetric matrix.

    Every stored nonzero off-diagonal entry yields one edge. Weights default
    to ``|a_ij|``; ``weights`` may be a callable ``(i, j, a_ij) -> w`` or a
    dict keyed by ``(i, j)`` with ``j < i``.
    """
    A = csr(A)
    if not is_symmetric(A):
        raise NonSymmetricError("graph_of requires a symmetric matrix")
    L = sp.tril(A, k=-1).tocoo()
    keep = L.data != 0
    rows, cols, vals = L.row[keep], L.col[keep], L.data[keep]
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    if weights is None:
        w = np.abs(vals)
    elif callable(weights):
        w = np.array([weights(i, j, a) for i, j, a in zip(rows, cols, vals)], dtype=float)
    else:
        w = np.array([weights[(int(i), int(j))] for i, j in zip(rows, cols)], dtype=float)
    return WeightedGraph(A.shape[0], np.column_stack([rows, cols]), w)


def graph_laplacian(graph):
    """Assemble ``sum_e w_e (e_i - e_j)(e_i - e_j)^T``."""
    n = graph.nvertices
    i, j = graph.edges[:, 0], graph.edges[:, 1]
    w = graph.weights
    rows = np.concatenate([i, j, i, j])
    cols = np.concatenate([j, i, i, j])
    vals = np.concatenate([-w, -w, w, w])
    return csr((vals, (rows, cols)), shape=(n, n))


def to_graph_laplacian(A, mesh, kappa):
    """Weighted graph Laplacian spectrally equivalent to a P1 stiffness matrix.

    Each simplex contributes ``|e|^(d-2) * kappa_T`` to every one of its
    vertex-pair edges, ``kappa_T`` being the cell mean of the coefficient.
    """
    cells = np.asarray(mesh.cells)
    if len(cells) == 0:
        raise ValueError("empty mesh")
    nv = len(mesh.vertices)
    if A is not None and A.shape != (nv, nv):
        raise ValueError("stiffness matrix does not match mesh")
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (len(cells),))
    d = cells.shape[1] - 1
    X = np.asarray(mesh.vertices, dtype=float)
    rows, cols, vals = [], [], []
    for a, b in combinations(range(d + 1), 2):
        va, vb = cells[:, a], cells[:, b]
        length = np.linalg.norm(X[va] - X[vb], axis=1)
        w = length ** (d - 2) * kappa
        hi, lo = np.maximum(va, vb), np.minimum(va, vb)
        rows.append(hi)
        cols.append(lo)
        vals.append(w)
    W = csr((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nv, nv)).tocoo()
    return graph_laplacian(WeightedGraph(nv, np.column_stack([W.row, W.col]), W.data))


def _check_pivots(diag, scale, pivot_rtol):
    tiny = np.flatnonzero(np.abs(diag) <= pivot_rtol * scale)
    if len(tiny):
        raise SingularMatrixError(tiny[0])


class DenseFactor:
    """Cached factorization of a small square matrix.

    Symmetric positive definite input is factored by Cholesky, anything else
    by partially pivoted LU. With ``pseudo=True`` a singular matrix is not an
    error: it is inverted on the eigenvectors above ``1e-12 * lambda_max``.
    """

    def __init__(self, M, symmetric=None, pivot_rtol=PIVOT_RTOL, pseudo=False):
        M = np.array(M, dtype=float)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise ValueError("square matrix required")
        self.n = M.shape[0]
        if symmetric is None:
            symmetric = np.allclose(M, M.T, rtol=SYMMETRY_RTOL, atol=0)
        self.symmetric = symmetric
        self.singular = False
        # absolute floor of 1 so uniformly tiny matrices also count as singular
        scale = max(np.max(np.abs(M)) if M.size else 0.0, 1.0)
        self._kind = None
        try:
            if symmetric:
                try:
                    c = la.cho_factor(M, lower=True, check_finite=False)
                    _check_pivots(np.diag(c[0]) ** 2, scale, pivot_rtol)
                    self._kind, self._fac = "chol", c
                    return
                except la.LinAlgError:
                    pass
            lu, piv = la.lu_factor(M, check_finite=False)
            _check_pivots(np.diag(lu), scale, pivot_rtol)
            self._kind, self._fac = "lu", (lu, piv)
        except SingularMatrixError:
            if not (pseudo and symmetric):
                raise
            lam, Q = la.eigh(M)
            keep = lam > 1e-12 * max(lam.max(), 0.0)
            self._kind, self._fac = "pinv", (Q[:, keep], 1.0 / lam[keep])
            self.singular = True

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if self._kind == "chol":
            return la.cho_solve(self._fac, b, check_finite=False)
        if self._kind == "lu":
            return la.lu_solve(self._fac, b, check_finite=False)
        Q, inv = self._fac
        return Q @ (inv[:, None] * (Q.T @ b)) if b.ndim == 2 else Q @ (inv * (Q.T @ b))

    def inverse(self):
        return self.solve(np.eye(self.n))


def dense_solve(M, b, symmetric=None, pivot_rtol=PIVOT_RTOL):
    """Solve a small dense system, raising :class:`SingularMatrixError` on tiny pivots."""
    return DenseFactor(M, symmetric=symmetric, pivot_rtol=pivot_rtol).solve(b)


def dense_generalized_eigs(A, B, cap=EIG_CAP):
    """Ascending eigenvalues of ``B^{-1} A`` for symmetric ``A`` and SPD ``B``."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    B = B.toarray() if sp.issparse(B) else np.asarray(B, dtype=float)
    if A.shape[0] > cap:
        raise ValueError("dense eigen-oracle is limited to desk-scale matrices")
    try:
        la.cholesky(B, lower=True)
    except la.LinAlgError as exc:
        raise ValueError("B is not symmetric positive definite") from exc
    return la.eigh(A, B, eigvals_only=True)


def nullspace(A, rtol=1e-10):
    """Orthonormal basis of the numerical kernel of a symmetric matrix."""
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    lam, Q = la.eigh(A)
    scale = np.max(np.abs(lam)) if lam.size else 0.0
    return Q[:, np.abs(lam) <= rtol * scale] if scale > 0 else np.eye(A.shape[0])


def range_basis(W, rtol=1e-10):
    """Orthonormal basis for the column space of ``W``."""
    if W.shape[1] == 0:
        return W
    U, s, _ = la.svd(W, full_matrices=False)
    return U[:, s > rtol * s[0]] if s.size and s[0] > 0 else U[:, :0]


def complement_of_constants(n):
    """Orthonormal basis of the orthogonal complement of the constant vector."""
    Q, _ = la.qr(np.column_stack([np.ones(n), np.eye(n)[:, : n - 1]]), mode="economic")
    return Q[:, 1:]
