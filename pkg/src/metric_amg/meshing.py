"""Structured simplicial meshes, embedded curves and DOF partitions."""

import json
from dataclasses import dataclass, field
from itertools import permutations
from math import factorial

import numpy as np
from scipy.spatial import cKDTree

COORD_TOL = 1e-10


@dataclass
class Mesh:
    """Simplicial mesh; ``dim`` is the topological dimension.

    ``vertices`` may live in a higher-dimensional space than ``dim`` (a
    polyline in 3D is a ``dim=1`` mesh). ``facet_tags`` maps a label to an
    array of facets given by vertex indices; ``vertex_tags`` and
    ``cell_tags`` map labels to index arrays.
    """

    dim: int
    vertices: np.ndarray
    cells: np.ndarray
    facet_tags: dict = field(default_factory=dict)
    vertex_tags: dict = field(default_factory=dict)
    cell_tags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.ndim == 1:
            self.vertices = self.vertices[:, None]
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, self.dim + 1)

    @property
    def nvertices(self):
        return len(self.vertices)

    @property
    def ncells(self):
        return len(self.cells)

    def cell_volumes(self):
        return simplex_volumes(self.vertices, self.cells)

    def cell_diameters(self):
        X = self.vertices
        d = np.zeros(self.ncells)
        for a in range(self.dim + 1):
            for b in range(a + 1, self.dim + 1):
                d = np.maximum(d, np.linalg.norm(X[self.cells[:, a]] - X[self.cells[:, b]], axis=1))
        return d

    def edges(self):
        """Sorted unique vertex pairs ``(i, j)`` with ``j < i`` over all cells."""
        pairs = []
        for a in range(self.dim + 1):
            for b in range(a + 1, self.dim + 1):
                pairs.append(np.sort(self.cells[:, [a, b]], axis=1)[:, ::-1])
        return _unique_rows(np.concatenate(pairs), self.nvertices)[0]

    def facets(self):
        """Unique facets (sorted vertex tuples) and how many cells share each."""
        faces = np.concatenate([np.delete(self.cells, k, axis=1) for k in range(self.dim + 1)])
        faces = np.sort(faces, axis=1)
        return _unique_rows(faces, self.nvertices)

    def boundary_facets(self):
        faces, counts = self.facets()
        return faces[counts == 1]

    def to_json(self):
        return {
            "dim": self.dim,
            "vertices": self.vertices.tolist(),
            "cells": self.cells.tolist(),
            "tags": {
                "facets": {k: np.asarray(v).tolist() for k, v in self.facet_tags.items()},
                "vertices": {k: np.asarray(v).tolist() for k, v in self.vertex_tags.items()},
                "cells": {k: np.asarray(v).tolist() for k, v in self.cell_tags.items()},
            },
        }

    @classmethod
    def from_json(cls, data):
        tags = data.get("tags", {})
        dim = data["dim"]
        return cls(
            dim=dim,
            vertices=np.asarray(data["vertices"], dtype=float),
            cells=np.asarray(data["cells"], dtype=np.int64),
            facet_tags={k: np.asarray(v, dtype=np.int64).reshape(-1, dim) for k, v in tags.get("facets", {}).items()},
            vertex_tags={k: np.asarray(v, dtype=np.int64) for k, v in tags.get("vertices", {}).items()},
            cell_tags={k: np.asarray(v, dtype=np.int64) for k, v in tags.get("cells", {}).items()},
        )


def _unique_rows(rows, base):
    """``np.unique(rows, axis=0, return_counts=True)`` through one int64 key per row."""
    rows = np.asarray(rows, dtype=np.int64)
    k = rows.shape[1]
    if base ** k >= 2 ** 62:
        return np.unique(rows, axis=0, return_counts=True)
    key = np.zeros(len(rows), dtype=np.int64)
    for c in range(k):
        key = key * base + rows[:, c]
    _, first, counts = np.unique(key, return_index=True, return_counts=True)
    return rows[first], counts


def simplex_volumes(X, cells):
    """Unsigned volumes of (possibly embedded) simplices via the Gram determinant."""
    d = cells.shape[1] - 1
    E = X[cells[:, 1:]] - X[cells[:, :1]]
    G = np.einsum("cik,cjk->cij", E, E)
    return np.sqrt(np.maximum(np.linalg.det(G), 0.0)) / factorial(d)


def save_mesh(path, mesh):
    with open(path, "w") as fh:
        json.dump(mesh.to_json(), fh)


def load_mesh(path):
    with open(path) as fh:
        return Mesh.from_json(json.load(fh))


def _grid(dim, n, extents):
    n = np.broadcast_to(np.asarray(n, dtype=np.int64), (dim,))
    if np.any(n < 1):
        raise ValueError("need at least one cell per axis")
    extents = np.broadcast_to(np.asarray(1.0 if extents is None else extents, dtype=float), (dim,))
    axes = [np.linspace(0.0, extents[k], n[k] + 1) for k in range(dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    # x varies fastest
    X = np.column_stack([m.transpose(tuple(range(dim))[::-1]).ravel() for m in mesh])
    return n, extents, X


def unit_box_mesh(dim, n, extents=None):
    """Structured simplicial mesh of ``[0, L_1] x ... x [0, L_dim]``.

    Squares are cut into 2 triangles and cubes into the 6 tetrahedra of the
    Kuhn split along the main diagonal. Vertex ``(i, j, k)`` has index
    ``i + (n_x+1) * (j + (n_y+1) * k)``.
    """
    if dim not in (1, 2, 3):
        raise ValueError("dim must be 1, 2 or 3")
    n, extents, X = _grid(dim, n, extents)
    strides = np.cumprod(np.concatenate([[1], n[:-1] + 1]))
    corners = np.stack(np.meshgrid(*[np.arange(m) for m in n], indexing="ij"), axis=-1).reshape(-1, dim)
    base = corners @ strides
    if dim == 1:
        cells = np.column_stack([base, base + 1])
    else:
        cells = []
        for perm in permutations(range(dim)):
            verts = [base]
            cur = base
            for axis in perm:
                cur = cur + strides[axis]
                verts.append(cur)
            cells.append(np.column_stack(verts))
        cells = np.concatenate(cells)
    cells = _orient(X, cells)
    mesh = Mesh(dim, X, cells)
    _tag_box_boundary(mesh, extents)
    return mesh


def _orient(X, cells):
    d = cells.shape[1] - 1
    if X.shape[1] != d:
        return cells
    E = X[cells[:, 1:]] - X[cells[:, :1]]
    neg = np.linalg.det(E) < 0
    cells = cells.copy()
    if d == 1:
        cells[neg] = cells[neg][:, ::-1]
    else:
        cells[neg, -2:] = cells[neg][:, [-1, -2]]
    return cells


_AXES = "xyz"


def _tag_box_boundary(mesh, extents):
    faces = mesh.boundary_facets()
    X = mesh.vertices
    for k in range(mesh.dim):
        for side, value in (("0", 0.0), ("1", extents[k])):
            label = f"{_AXES[k]}{side}"
            on = np.abs(X[:, k] - value) <= COORD_TOL * max(1.0, extents[k])
            mesh.vertex_tags[label] = np.flatnonzero(on)
            mesh.facet_tags[label] = faces[np.all(on[faces], axis=1)]
    mesh.vertex_tags["boundary"] = np.unique(faces)


def split_box_mesh(dim, n, extents=None):
    """Unit box cut by the plane ``x_dim = L/2`` into subdomains ``i`` (below) and ``e``.

    Returns the mesh and the label of the interface facets. Cells carry tags
    ``"i"``/``"e"``; the interface facets are tagged ``"interface"``.
    """
    if dim not in (2, 3):
        raise ValueError("split meshes are 2D or 3D")
    if np.any(np.asarray(n) % 2):
        raise ValueError("n must be even so that the interface is resolved")
    mesh = unit_box_mesh(dim, n, extents)
    X = mesh.vertices
    top = X[:, -1].max()
    mid = 0.5 * top
    centroid = X[mesh.cells].mean(axis=1)[:, -1]
    mesh.cell_tags["i"] = np.flatnonzero(centroid < mid)
    mesh.cell_tags["e"] = np.flatnonzero(centroid > mid)
    on = np.abs(X[:, -1] - mid) <= COORD_TOL * max(1.0, top)
    faces, _ = mesh.facets()
    mesh.facet_tags["interface"] = faces[np.all(on[faces], axis=1)]
    mesh.vertex_tags["interface"] = np.flatnonzero(on)
    return mesh, "interface"


def submesh(mesh, cell_label):
    """Sub-mesh made of the cells with a given tag.

    Returns ``(sub, parent)`` where ``parent[k]`` is the index in ``mesh`` of
    vertex ``k`` of ``sub``. Facet and vertex tags are restricted.
    """
    cells = mesh.cells[mesh.cell_tags[cell_label]]
    parent = np.unique(cells)
    local = np.full(mesh.nvertices, -1, dtype=np.int64)
    local[parent] = np.arange(len(parent))
    sub = Mesh(mesh.dim, mesh.vertices[parent], local[cells])
    for label, faces in mesh.facet_tags.items():
        faces = np.asarray(faces)
        if faces.size == 0:
            sub.facet_tags[label] = faces.reshape(0, mesh.dim)
            continue
        keep = np.all(local[faces] >= 0, axis=1)
        sub.facet_tags[label] = local[faces[keep]]
    # boundary facets of the box restricted to this side; interface facets are all kept
    bnd = sub.boundary_facets()
    base = sub.nvertices
    for label in list(sub.facet_tags):
        if label == "interface":
            continue
        faces = sub.facet_tags[label]
        keep = np.isin(_unique_rows(np.sort(faces, axis=1), base)[0] @ base ** np.arange(mesh.dim)[::-1],
                       bnd @ base ** np.arange(mesh.dim)[::-1]) if len(faces) else np.zeros(0, bool)
        sub.facet_tags[label] = _unique_rows(np.sort(faces, axis=1), base)[0][keep] if len(faces) else faces
    for label, verts in mesh.vertex_tags.items():
        v = local[np.asarray(verts)]
        sub.vertex_tags[label] = np.sort(v[v >= 0])
    return sub, parent


@dataclass
class Curve1D:
    """Polyline in 3D: vertices, segments, arc length from the root and radius."""

    vertices: np.ndarray
    segments: np.ndarray
    radius: np.ndarray
    arclength: np.ndarray = None
    branches: list = field(default_factory=list)
    mesh_vertex: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        self.segments = np.asarray(self.segments, dtype=np.int64).reshape(-1, 2)
        self.radius = np.broadcast_to(np.asarray(self.radius, dtype=float), (len(self.vertices),)).copy()
        if np.any(self.radius <= 0):
            raise ValueError("radius must be positive")
        if self.arclength is None:
            self.arclength = _arclength(self.vertices, self.segments)

    @property
    def nvertices(self):
        return len(self.vertices)

    def as_mesh(self):
        return Mesh(1, self.vertices, self.segments)

    def tangents(self):
        """Unit tangent per vertex: mean of the adjacent segment directions."""
        T = np.zeros_like(self.vertices)
        d = self.vertices[self.segments[:, 1]] - self.vertices[self.segments[:, 0]]
        d /= np.linalg.norm(d, axis=1)[:, None]
        np.add.at(T, self.segments[:, 0], d)
        np.add.at(T, self.segments[:, 1], d)
        norm = np.linalg.norm(T, axis=1)
        # opposite directions cancel at a kink; fall back to the first segment
        bad = norm < 1e-12
        for v in np.flatnonzero(bad):
            s = np.flatnonzero((self.segments == v).any(axis=1))[0]
            T[v], norm[v] = d[s], 1.0
        return T / norm[:, None]

    def to_json(self):
        return {"dim": 1, "vertices": self.vertices.tolist(), "cells": self.segments.tolist(),
                "segments": self.segments.tolist(), "radius": self.radius.tolist(), "tags": {}}

    @classmethod
    def from_json(cls, data):
        return cls(np.asarray(data["vertices"]), np.asarray(data["segments"]), np.asarray(data["radius"]))


def _arclength(X, segments):
    n = len(X)
    s = np.full(n, np.inf)
    if n == 0:
        return s
    s[0] = 0.0
    adj = [[] for _ in range(n)]
    for a, b in segments:
        w = float(np.linalg.norm(X[a] - X[b]))
        adj[a].append((b, w))
        adj[b].append((a, w))
    stack = [0]
    while stack:
        v = stack.pop()
        for u, w in adj[v]:
            if s[u] == np.inf:
                s[u] = s[v] + w
                stack.append(u)
    return s


def embedded_curve(mesh3d, kind="straight", params=None):
    """Polyline made of edges of ``mesh3d`` (a fitted 1D network).

    ``kind="straight"``: axis-aligned line; params ``axis`` (default 2) and
    ``through`` (the other two coordinates, default the box centre).
    ``kind="branched"``: a Y made of a trunk along ``z`` from the bottom face
    to the box centre and two arms along the lattice directions ``(1,0,1)``
    and ``(0,1,1)``. ``radius`` (default 1.0) is stored per vertex.
    """
    params = dict(params or {})
    radius = params.get("radius", 1.0)
    X = mesh3d.vertices
    lo, hi = X.min(axis=0), X.max(axis=0)
    tree = cKDTree(X)
    scale = max(1.0, float(np.max(hi - lo)))

    def lookup(points):
        dist, idx = tree.query(points)
        if np.any(dist > COORD_TOL * scale):
            raise ValueError("requested curve is not representable on the mesh lattice")
        return idx

    if kind == "straight":
        axis = params.get("axis", 2)
        others = [k for k in range(3) if k != axis]
        through = params.get("through", [(lo[k] + hi[k]) / 2 for k in others])
        on = np.all(np.abs(X[:, others] - np.asarray(through)) <= COORD_TOL * scale, axis=1)
        idx = np.flatnonzero(on)
        if len(idx) < 2:
            raise ValueError("requested line is not representable on the mesh lattice")
        idx = idx[np.argsort(X[idx, axis])]
        branches = [np.arange(len(idx))]
        verts = idx
    elif kind == "branched":
        edges = {tuple(e) for e in mesh3d.edges().tolist()}
        spacing = np.array([np.min(np.diff(np.unique(X[:, k]))) for k in range(3)])
        centre = lookup(((lo + hi) / 2)[None])[0]
        c = X[centre]
        trunk_len = int(round((c[2] - lo[2]) / spacing[2]))
        arms = []
        for direction in ((1, 0, 1), (0, 1, 1)):
            step = np.asarray(direction) * spacing
            k = 1
            while np.all(c + (k + 1) * step <= hi + COORD_TOL * scale):
                k += 1
            arms.append(k)
        trunk_pts = np.array([c - (trunk_len - t) * np.array([0, 0, spacing[2]]) for t in range(trunk_len + 1)])
        pts = [trunk_pts]
        for direction, k in zip(((1, 0, 1), (0, 1, 1)), arms):
            step = np.asarray(direction) * spacing
            pts.append(np.array([c + t * step for t in range(1, k + 1)]))
        verts = lookup(np.concatenate(pts))
        jn = trunk_len
        b1 = np.arange(trunk_len + 1)
        b2 = np.concatenate([[jn], trunk_len + 1 + np.arange(arms[0])])
        b3 = np.concatenate([[jn], trunk_len + 1 + arms[0] + np.arange(arms[1])])
        branches = [b1, b2, b3]
        for br in branches:
            for a, b in zip(verts[br[:-1]], verts[br[1:]]):
                if (max(a, b), min(a, b)) not in edges:
                    raise ValueError("requested branch does not follow mesh edges")
    else:
        raise ValueError(f"unknown curve kind {kind!r}")
    segments = np.concatenate([np.column_stack([br[:-1], br[1:]]) for br in branches])
    return Curve1D(X[verts], segments, radius, branches=[np.asarray(b) for b in branches], mesh_vertex=np.asarray(verts))


@dataclass
class DofPartition:
    """Split of ``range(n_total)`` into coupled-side, interface and remaining DOFs."""

    n_total: int
    omega: np.ndarray
    gamma: np.ndarray
    rest: np.ndarray = None

    def __post_init__(self):
        self.omega = np.asarray(self.omega, dtype=np.int64)
        self.gamma = np.asarray(self.gamma, dtype=np.int64)
        self.rest = np.zeros(0, dtype=np.int64) if self.rest is None else np.asarray(self.rest, dtype=np.int64)
        allidx = np.concatenate([self.omega, self.gamma, self.rest])
        if len(allidx) != self.n_total or not np.array_equal(np.sort(allidx), np.arange(self.n_total)):
            raise ValueError("partition index lists must be disjoint and cover all DOFs")

    def labels(self):
        lab = np.empty(self.n_total, dtype="<U5")
        lab[self.omega], lab[self.gamma], lab[self.rest] = "omega", "gamma", "rest"
        return lab


def locate_points(mesh, points, k=32):
    """Containing cell and barycentric coordinates for points in a full-dimensional mesh.

    Returns ``(cells, bary)``; points outside the mesh get cell ``-1``.
    """
    X, C = mesh.vertices, mesh.cells
    points = np.atleast_2d(np.asarray(points, dtype=float))
    centroids = X[C].mean(axis=1)
    tree = cKDTree(centroids)
    k = min(k, len(C))
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), k)
    T = X[C[:, 1:]] - X[C[:, :1]]                      # (ncells, d, d) rows are edge vectors
    Tinv = np.linalg.inv(np.transpose(T, (0, 2, 1)))   # maps x - x0 to barycentric 1..d
    found = np.full(len(points), -1, dtype=np.int64)
    bary = np.zeros((len(points), mesh.dim + 1))
    for col in range(k):
        todo = np.flatnonzero(found < 0)
        if len(todo) == 0:
            break
        c = cand[todo, col]
        lam = np.einsum("pij,pj->pi", Tinv[c], points[todo] - X[C[c, 0]])
        lam = np.column_stack([1.0 - lam.sum(axis=1), lam])
        ok = np.all(lam >= -1e-10, axis=1)
        found[todo[ok]] = c[ok]
        bary[todo[ok]] = np.clip(lam[ok], 0.0, None) / np.clip(lam[ok], 0.0, None).sum(axis=1)[:, None]
    return found, bary
