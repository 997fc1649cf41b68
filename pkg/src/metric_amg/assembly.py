"""P1 assembly and the coupled systems ``A = gamma * A0 + A1``.

Three builders produce a :class:`CoupledSystem`: the bidomain model (two
fields coupled in the whole domain), the EMI model (two subdomains coupled
through the trace jump on their interface) and the reduced 3D-1D EMI model
(a 3D field coupled to a field on an embedded curve through an averaging
or a trace-like operator).
"""

import json
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .meshing import (DofPartition, Mesh, embedded_curve, locate_points, split_box_mesh,
                      submesh, unit_box_mesh)
from .sparse import csr, is_symmetric

# mS/cm conductivities with muF/cm^2 capacitance and lengths in micrometres
MEMBRANE_UNIT = 1e-7


def membrane_gamma(dt_inv, cm=1.0):
    """Membrane coupling ``C_m / dt`` in units matching conductivities in mS/cm and lengths in um."""
    return MEMBRANE_UNIT * cm * dt_inv


def _local_gradients(X, cells):
    """Per-cell volume and barycentric gradient Gram matrix ``(d+1) x (d+1)``.

    Works for simplices embedded in a higher-dimensional space through the
    metric tensor of the cell.
    """
    d = cells.shape[1] - 1
    E = X[cells[:, 1:]] - X[cells[:, :1]]                 # (c, d, gdim)
    G = np.einsum("cik,cjk->cij", E, E)
    det = np.linalg.det(G)
    if np.any(det <= 0):
        bad = int(np.flatnonzero(det <= 0)[0])
        raise ValueError(f"degenerate cell {bad} (zero volume)")
    vol = np.sqrt(det) / np.prod(np.arange(1, d + 1))
    Ginv = np.linalg.inv(G)
    B = np.hstack([-np.ones((d, 1)), np.eye(d)])          # reference gradients
    K = np.einsum("ai,cab,bj->cij", B, Ginv, B)
    return vol, K


def _scatter(cells, local, n):
    k = cells.shape[1]
    rows = np.repeat(cells, k, axis=1).ravel()
    cols = np.tile(cells, (1, k)).ravel()
    return csr((local.ravel(), (rows, cols)), shape=(n, n))


def assemble_stiffness(mesh, kappa=1.0):
    """P1 stiffness matrix of ``-div(kappa grad u)`` with cellwise ``kappa``."""
    cells = mesh.cells
    vol, K = _local_gradients(mesh.vertices, cells)
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (len(cells),))
    return _scatter(cells, (kappa * vol)[:, None, None] * K, mesh.nvertices)


def assemble_mass(mesh, lumped=False):
    """Consistent or row-sum lumped P1 mass matrix."""
    cells = mesh.cells
    d = cells.shape[1] - 1
    vol, _ = _local_gradients(mesh.vertices, cells)
    n = mesh.nvertices
    if lumped:
        diag = np.bincount(cells.ravel(), weights=np.repeat(vol / (d + 1), d + 1), minlength=n)
        return csr(sp.diags(diag))
    ref = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    return _scatter(cells, vol[:, None, None] * ref, n)


def _facet_mass(vertices, facets, n, lumped=True):
    return assemble_mass(Mesh(facets.shape[1] - 1, vertices, facets), lumped=lumped)[:n, :n] if len(facets) else \
        csr(sp.csr_matrix((n, n)))


def averaging_operator(mesh3d, curve, nquad=8):
    """Discrete circle average of 3D P1 functions at every curve vertex.

    For each curve vertex, ``nquad`` midpoint-rule points are placed on the
    circle of radius ``rho`` in the plane normal to the curve; values are P1
    interpolated in ``mesh3d``. Points outside the box are clamped to the
    nearest boundary point. Returns ``(Pi, n_clamped)``.
    """
    T = curve.tangents()
    helper = np.where(np.abs(T[:, [0]]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    U = np.cross(T, helper)
    U /= np.linalg.norm(U, axis=1)[:, None]
    W = np.cross(T, U)
    theta = 2 * np.pi * (np.arange(nquad) + 0.5) / nquad
    rho = curve.radius
    pts = (curve.vertices[:, None, :]
           + rho[:, None, None] * (np.cos(theta)[None, :, None] * U[:, None, :]
                                   + np.sin(theta)[None, :, None] * W[:, None, :]))
    pts = pts.reshape(-1, 3)
    lo, hi = mesh3d.vertices.min(axis=0), mesh3d.vertices.max(axis=0)
    clamped = np.clip(pts, lo, hi)
    n_clamped = int(np.count_nonzero(np.any(clamped != pts, axis=1)))
    if n_clamped:
        warnings.warn(f"{n_clamped} averaging points left the domain and were clamped", RuntimeWarning)
    cells, bary = locate_points(mesh3d, clamped)
    if np.any(cells < 0):
        raise ValueError("averaging point could not be located in the 3D mesh")
    rows = np.repeat(np.arange(curve.nvertices), nquad * 4)
    cols = mesh3d.cells[cells].ravel()
    vals = (bary / nquad).ravel()
    return csr((vals, (rows, cols)), shape=(curve.nvertices, mesh3d.nvertices)), n_clamped


def trace_operator(mesh3d, curve):
    """Element-local average: each curve vertex takes the mean of the 3D
    vertices of one cell containing it (lowest cell index among candidates)."""
    n1, n3 = curve.nvertices, mesh3d.nvertices
    cells = np.empty(n1, dtype=np.int64)
    if curve.mesh_vertex is not None:
        incident = [[] for _ in range(n1)]
        where = {int(v): k for k, v in enumerate(curve.mesh_vertex)}
        for c, cell in enumerate(mesh3d.cells):
            for v in cell:
                k = where.get(int(v))
                if k is not None:
                    incident[k].append(c)
        cells[:] = [min(c) for c in incident]
    else:
        cells, _ = locate_points(mesh3d, curve.vertices)
        if np.any(cells < 0):
            raise ValueError("curve vertex outside the 3D mesh")
    nv = mesh3d.cells.shape[1]
    rows = np.repeat(np.arange(n1), nv)
    vals = np.full(n1 * nv, 1.0 / nv)
    return csr((vals, (rows, mesh3d.cells[cells].ravel())), shape=(n1, n3))


@dataclass
class ProblemSpec:
    """Parameters of one model problem.

    ``gamma`` multiplies the metric term directly. For the reduced model it
    is the membrane factor of :func:`membrane_gamma`; the 1D stiffness is
    scaled by ``pi rho^2`` and the membrane mass by ``2 pi rho``.
    """

    model: str = "bidomain"
    dim: int = 2
    n: int = 8
    alpha_e: float = 1.0
    alpha_i: float = 1.0
    gamma: float = 1.0
    rho: float = 1.0
    coupling: str = "average"
    lumped: bool = True
    bc: str = "default"
    extents: float = 1.0
    curve: str = "straight"
    nquad: int = 8

    def __post_init__(self):
        if self.alpha_e <= 0 or self.alpha_i <= 0:
            raise ValueError("conductivities must be positive")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")
        if self.model not in ("bidomain", "emi", "reduced_emi"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.coupling not in ("average", "trace"):
            raise ValueError(f"unknown coupling {self.coupling!r}")

    @classmethod
    def from_dict(cls, data):
        known = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    @classmethod
    def load(cls, path):
        return cls.from_dict(load_config(path))


def load_config(path):
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


@dataclass
class CoupledSystem:
    """``A = gamma * A0 + A1`` with ``A0 = R^T M_gamma R``.

    ``coords`` holds one point per DOF (used by nearest-vertex constraints).
    Dirichlet DOFs are eliminated symmetrically; ``lift`` is the load moved to
    the right-hand side by the elimination.
    """

    A1: sp.csr_matrix
    A0: sp.csr_matrix
    gamma: float
    R: sp.csr_matrix
    M_gamma: sp.csr_matrix
    partition: DofPartition
    coords: np.ndarray = None
    bc_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    bc_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lift: np.ndarray = None
    meta: dict = field(default_factory=dict)

    @cached_property
    def A(self):
        return csr(self.gamma * self.A0 + self.A1)

    @property
    def n(self):
        return self.A1.shape[0]

    def with_gamma(self, gamma):
        return replace(self, gamma=gamma, meta=dict(self.meta))

    def rhs(self, f=None):
        """Right-hand side after Dirichlet elimination; ``f`` defaults to the benchmark load
        (ones on the coupled-side block, zeros elsewhere)."""
        if f is None:
            f = np.zeros(self.n)
            f[self.partition.omega] = 1.0
        b = np.array(f, dtype=float)
        if len(self.bc_indices):
            b -= self.gamma * self.lift[0] + self.lift[1]
            b[self.bc_indices] = self.A.diagonal()[self.bc_indices] * self.bc_values
        return b

    def export(self, directory):
        from .mmio import write_mtx
        import os
        os.makedirs(directory, exist_ok=True)
        for name in ("A", "A0", "A1", "R"):
            write_mtx(os.path.join(directory, f"{name}.mtx"), getattr(self, name))


def apply_dirichlet(system, indices, values=0.0):
    """Symmetric elimination of Dirichlet DOFs.

    Rows and columns of ``A1`` are zeroed with the diagonal restored; the
    matching columns of ``R`` are zeroed so that ``A0 = R^T M R`` still holds.
    """
    indices = np.asarray(indices, dtype=np.int64).ravel()
    values = np.broadcast_to(np.asarray(values, dtype=float), indices.shape)
    if np.any(indices < 0) or np.any(indices >= system.n):
        raise IndexError("Dirichlet index out of range")
    order = np.argsort(indices, kind="stable")
    indices, values = indices[order], values[order]
    dup = np.flatnonzero(np.diff(indices) == 0)
    if np.any(values[dup] != values[dup + 1]):
        raise ValueError("duplicate Dirichlet index with conflicting values")
    keep = np.concatenate([[True], np.diff(indices) != 0]) if len(indices) else np.zeros(0, bool)
    indices, values = indices[keep], values[keep]
    g = np.zeros(system.n)
    g[indices] = values
    lift0 = system.A0 @ g
    lift1 = system.A1 @ g
    if system.lift is not None:
        lift0 += system.lift[0]
        lift1 += system.lift[1]
    all_idx = np.union1d(system.bc_indices, indices)
    all_val = np.zeros(system.n)
    all_val[system.bc_indices] = system.bc_values
    all_val[indices] = values
    mask = np.ones(system.n)
    mask[all_idx] = 0.0
    Dm = sp.diags(mask)
    diag1 = system.A1.diagonal()
    A1 = csr(Dm @ system.A1 @ Dm + sp.diags(np.where(mask == 0, diag1, 0.0)))
    R = csr(system.R @ Dm)
    R.eliminate_zeros()
    A0 = csr(R.T @ system.M_gamma @ R)
    lift0[all_idx] = 0.0
    lift1[all_idx] = 0.0
    return replace(system, A1=A1, A0=A0, R=R, bc_indices=all_idx, bc_values=all_val[all_idx],
                   lift=(lift0, lift1), meta=dict(system.meta))


def _finish(A1, R, M_gamma, gamma, partition, coords, meta):
    A0 = csr(R.T @ M_gamma @ R)
    return CoupledSystem(csr(A1), A0, float(gamma), csr(R), csr(M_gamma), partition, coords, meta=meta)


def build_bidomain(spec):
    """Two fields on one mesh coupled by ``gamma * M (u_e - u_i)``.

    DOFs ``0..N-1`` hold ``u_e`` and ``N..2N-1`` hold ``u_i``. By default
    ``u_e`` is grounded on the face ``x = 0``; ``bc="none"`` leaves the pure
    Neumann problem (singular along the constant pair).
    """
    mesh = unit_box_mesh(spec.dim, spec.n, spec.extents)
    K = assemble_stiffness(mesh)
    M = assemble_mass(mesh, lumped=spec.lumped)
    N = mesh.nvertices
    I = sp.identity(N, format="csr")
    A1 = sp.block_diag([spec.alpha_e * K, spec.alpha_i * K])
    R = sp.hstack([I, -I])
    partition = DofPartition(2 * N, np.arange(N), N + np.arange(N))
    coords = np.vstack([mesh.vertices, mesh.vertices])
    system = _finish(A1, R, M, spec.gamma, partition, coords,
                     {"model": "bidomain", "mesh": mesh, "N": N, "K": K, "M": M,
                       "alpha_e": spec.alpha_e, "alpha_i": spec.alpha_i})
    if spec.bc in ("default", "ground"):
        system = apply_dirichlet(system, mesh.vertex_tags["x0"], 0.0)
    elif spec.bc != "none":
        raise ValueError(f"unknown bc {spec.bc!r}")
    return system


def build_emi(spec):
    """Split box: ``e`` DOFs first, then ``i`` DOFs, each side with its own interface copy.

    ``R v = v_i - v_e`` on interface vertices; the interface mass is lumped by
    default. Dirichlet data sit on the faces parallel to the interface.
    """
    mesh, tag = split_box_mesh(spec.dim, spec.n, spec.extents)
    if tag not in mesh.facet_tags or len(mesh.facet_tags[tag]) == 0:
        raise ValueError("missing interface tags")
    me, pe = submesh(mesh, "e")
    mi, pi = submesh(mesh, "i")
    Ne, Ni = me.nvertices, mi.nvertices
    loc_e = np.full(mesh.nvertices, -1)
    loc_e[pe] = np.arange(Ne)
    loc_i = np.full(mesh.nvertices, -1)
    loc_i[pi] = np.arange(Ni)
    gamma_v = mesh.vertex_tags[tag]
    ng = len(gamma_v)
    Mfull = _facet_mass(mesh.vertices, mesh.facet_tags[tag], mesh.nvertices, lumped=spec.lumped)
    Mg = csr(Mfull[gamma_v][:, gamma_v])
    rows = np.concatenate([np.arange(ng), np.arange(ng)])
    cols = np.concatenate([loc_e[gamma_v], Ne + loc_i[gamma_v]])
    vals = np.concatenate([-np.ones(ng), np.ones(ng)])
    R = csr((vals, (rows, cols)), shape=(ng, Ne + Ni))
    A1 = sp.block_diag([spec.alpha_e * assemble_stiffness(me), spec.alpha_i * assemble_stiffness(mi)])
    gamma_dofs = Ne + loc_i[gamma_v]
    rest = np.setdiff1d(Ne + np.arange(Ni), gamma_dofs)
    partition = DofPartition(Ne + Ni, np.arange(Ne), gamma_dofs, rest)
    coords = np.vstack([me.vertices, mi.vertices])
    system = _finish(A1, R, Mg, spec.gamma, partition, coords,
                     {"model": "emi", "mesh": mesh, "mesh_e": me, "mesh_i": mi, "interface": gamma_v})
    if spec.bc == "default":
        axis = "xyz"[spec.dim - 1]
        bc = np.concatenate([me.vertex_tags[f"{axis}1"], Ne + mi.vertex_tags[f"{axis}0"]])
        system = apply_dirichlet(system, bc, 0.0)
    elif spec.bc != "none":
        raise ValueError(f"unknown bc {spec.bc!r}")
    return system


def build_reduced_emi(spec, mesh3d=None, curve=None):
    """3D field plus a field on a fitted curve, coupled through ``R = [-Pi, I]``.

    ``coupling="average"`` uses the circle average of radius ``rho``;
    ``coupling="trace"`` the element-local average. The 3D field is grounded
    on the box boundary by default.
    """
    if mesh3d is None:
        mesh3d = unit_box_mesh(3, spec.n, spec.extents)
    if curve is None:
        curve = embedded_curve(mesh3d, spec.curve, {"radius": spec.rho})
    rho = curve.radius
    n3, n1 = mesh3d.nvertices, curve.nvertices
    cmesh = curve.as_mesh()
    rho_cell = rho[curve.segments].mean(axis=1)
    K1 = assemble_stiffness(cmesh, np.pi * rho_cell ** 2)
    M1 = assemble_mass(Mesh(1, curve.vertices, curve.segments), lumped=spec.lumped)
    circumference = sp.diags(2 * np.pi * rho)
    Mg = csr(circumference @ M1) if spec.lumped else csr(sp.diags(np.sqrt(2 * np.pi * rho)) @ M1
                                                          @ sp.diags(np.sqrt(2 * np.pi * rho)))
    n_clamped = 0
    if spec.coupling == "average":
        Pi, n_clamped = averaging_operator(mesh3d, curve, spec.nquad)
    else:
        Pi = trace_operator(mesh3d, curve)
    R = sp.hstack([-Pi, sp.identity(n1)])
    A1 = sp.block_diag([spec.alpha_e * assemble_stiffness(mesh3d), spec.alpha_i * K1])
    partition = DofPartition(n3 + n1, np.arange(n3), n3 + np.arange(n1))
    coords = np.vstack([mesh3d.vertices, curve.vertices])
    system = _finish(A1, R, Mg, spec.gamma, partition, coords,
                     {"model": "reduced_emi", "mesh": mesh3d, "curve": curve, "Pi": Pi,
                      "n_clamped": n_clamped})
    if spec.bc == "default":
        system = apply_dirichlet(system, mesh3d.vertex_tags["boundary"], 0.0)
    elif spec.bc != "none":
        raise ValueError(f"unknown bc {spec.bc!r}")
    return system


def build_system(spec):
    builders = {"bidomain": build_bidomain, "emi": build_emi, "reduced_emi": build_reduced_emi}
    system = builders[spec.model](spec)
    assert is_symmetric(system.A1) and is_symmetric(system.A0)
    return system
