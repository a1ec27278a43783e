"""Nested structured triangulations of the unit square.

Conventions
-----------
* Triangles are stored as counterclockwise vertex-index triples.
* The structured builder splits every subsquare along the same diagonal
  (lower-left to upper-right) so that dyadic refinement is nested.
* Vertices of the structured mesh are numbered lexicographically by
  (row, column), row being the x2-index.
* ``refine`` emits the four children of parent triangle ``t`` at indices
  ``4*t .. 4*t+3``; point location relies on this layout.

Meshes are immutable after construction (the backing arrays are marked
read-only) and safe to share between threads.
"""
from __future__ import annotations

import sys

import numpy as np

from .errors import MeshError, MeshSizeError

_INDEX_DTYPE = np.int32


class Mesh:
    """Conforming triangulation of a convex polygon.

    Parameters
    ----------
    vertices : (nv, 2) float array
        Vertex coordinates.
    triangles : (nt, 3) int array
        Counterclockwise vertex-index triples.
    boundary_edges : (ne, 4) int array
        Rows ``(v0, v1, owning_triangle, marker)``.
    level : int
        Refinement level ``j >= 0``.

    Attributes
    ----------
    h : float
        Longest triangle diameter.
    areas : (nt,) array
        Signed triangle areas (validated positive).
    grads : (nt, 3, 2) array
        Gradients of the three barycentric coordinate functions.
    parent : Mesh or None
        Mesh this one was refined from, if any.
    parent_elements : (nt,) int array or None
        For refined meshes, the parent triangle of each triangle.
    """

    def __init__(self, vertices, triangles, boundary_edges, level,
                 _structure=None, _parent=None, _parent_elements=None):
        self.vertices = np.ascontiguousarray(vertices, dtype=float)
        self.triangles = np.ascontiguousarray(triangles, dtype=_INDEX_DTYPE)
        self.boundary_edges = np.ascontiguousarray(boundary_edges,
                                                   dtype=_INDEX_DTYPE)
        self.level = int(level)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise MeshError("vertices must have shape (nv, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must have shape (nt, 3)")
        if self.boundary_edges.ndim != 2 or self.boundary_edges.shape[1] != 4:
            raise MeshError("boundary_edges must have shape (ne, 4)")
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index exceeds vertex count")

        p = self.vertices[self.triangles]          # (nt, 3, 2)
        e01 = p[:, 1] - p[:, 0]
        e02 = p[:, 2] - p[:, 0]
        self.areas = 0.5 * (e01[:, 0] * e02[:, 1] - e01[:, 1] * e02[:, 0])
        if np.any(self.areas <= 0.0):
            raise MeshError("all triangles must have positive signed area")
        # grad(lambda_i) = perp(opposite edge) / (2A), perp(d) = (-d_y, d_x)
        opp = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], e01], axis=1)
        self.grads = np.empty_like(opp)
        self.grads[:, :, 0] = -opp[:, :, 1]
        self.grads[:, :, 1] = opp[:, :, 0]
        self.grads /= (2.0 * self.areas)[:, None, None]

        edges = p - np.roll(p, 1, axis=1)
        self.h = float(np.sqrt(np.max(np.sum(edges ** 2, axis=2))))

        self._structure = _structure
        self.parent = _parent
        self.parent_elements = (None if _parent_elements is None else
                                np.ascontiguousarray(_parent_elements,
                                                     dtype=_INDEX_DTYPE))
        for arr in (self.vertices, self.triangles, self.boundary_edges,
                    self.areas, self.grads):
            arr.setflags(write=False)
        if self.parent_elements is not None:
            self.parent_elements.setflags(write=False)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def validate(self) -> None:
        """Run the full invariant battery; raise MeshError on violation."""
        sort = np.sort(np.concatenate([self.triangles[:, [0, 1]],
                                       self.triangles[:, [1, 2]],
                                       self.triangles[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(sort, axis=0, return_counts=True)
        if np.any(counts > 2):
            raise MeshError("non-conforming: an edge is shared by >2 triangles")
        n_boundary = int(np.sum(counts == 1))
        if n_boundary != len(self.boundary_edges):
            raise MeshError("boundary edge list does not match topology")
        bsort = np.sort(self.boundary_edges[:, :2], axis=1)
        interior = {tuple(e) for e in uniq[counts == 2]}
        for v0, v1 in bsort:
            if (v0, v1) in interior:
                raise MeshError("listed boundary edge is interior")
        for v0, v1, t, _ in self.boundary_edges:
            if {v0, v1} - set(self.triangles[t]):
                raise MeshError("boundary edge not an edge of its owner")

    def write_text(self, stream) -> None:
        """Dump the mesh in the plain-text exchange format.

        One header line ``nv nt ne`` followed by vertex coordinates,
        triangle triples, and boundary edge rows.
        """
        ne = len(self.boundary_edges)
        stream.write(f"{self.num_vertices} {self.num_triangles} {ne}\n")
        for x, y in self.vertices:
            stream.write(f"{float(x)!r} {float(y)!r}\n")
        for a, b, c in self.triangles:
            stream.write(f"{a} {b} {c}\n")
        for v0, v1, t, m in self.boundary_edges:
            stream.write(f"{v0} {v1} {t} {m}\n")


class ProlongationMap:
    """Exact interpolation data from a mesh to its red refinement.

    ``node_parents``/``node_weights`` give, for every child node, a two-node
    stencil over parent nodes (a vertex inherited from the parent carries
    weight (1, 0); an edge midpoint carries (1/2, 1/2)).  ``element_map``
    gives the parent triangle of every child triangle.
    """

    def __init__(self, parent: Mesh, child: Mesh, node_parents, node_weights,
                 element_map):
        self.parent = parent
        self.child = child
        self.node_parents = np.ascontiguousarray(node_parents,
                                                 dtype=_INDEX_DTYPE)
        self.node_weights = np.ascontiguousarray(node_weights, dtype=float)
        self.element_map = np.ascontiguousarray(element_map,
                                                dtype=_INDEX_DTYPE)
        for arr in (self.node_parents, self.node_weights, self.element_map):
            arr.setflags(write=False)

    def prolong_p1_values(self, values: np.ndarray) -> np.ndarray:
        """Prolong parent nodal values; exact at every child node."""
        values = np.asarray(values, dtype=float)
        if values.shape != (self.parent.num_vertices,):
            raise MeshError("nodal value length does not match parent mesh")
        return np.sum(values[self.node_parents] * self.node_weights, axis=1)

    def prolong_p0_values(self, values: np.ndarray) -> np.ndarray:
        """Prolong parent element values by exact injection."""
        values = np.asarray(values)
        if values.shape != (self.parent.num_triangles,):
            raise MeshError("element value length does not match parent mesh")
        return values[self.element_map]


def build_unit_square_mesh(level: int) -> Mesh:
    """Structured right-triangle mesh of (0,1)^2 at a dyadic level.

    Each of the ``4**level`` subsquares is split along its lower-left to
    upper-right diagonal, giving ``(2**level+1)**2`` vertices,
    ``2*4**level`` triangles and ``h = 2**-level * sqrt(2)``.
    """
    if level < 0:
        raise MeshError("level must be >= 0")
    n = 1 << level
    if (n + 1) ** 2 > np.iinfo(_INDEX_DTYPE).max:
        raise MeshSizeError(f"level {level} overflows the vertex index type")

    coords = np.arange(n + 1, dtype=float) / n
    xx, yy = np.meshgrid(coords, coords)            # row-major: row = x2-index
    vertices = np.column_stack([xx.ravel(), yy.ravel()])

    r, c = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    r, c = r.ravel(), c.ravel()
    ll = r * (n + 1) + c
    lr = ll + 1
    ul = ll + (n + 1)
    ur = ul + 1
    triangles = np.empty((2 * n * n, 3), dtype=_INDEX_DTYPE)
    triangles[0::2] = np.column_stack([ll, lr, ur])
    triangles[1::2] = np.column_stack([ll, ur, ul])

    def _square(rr, cc):
        return rr * n + cc

    idx = np.arange(n)
    bottom = np.column_stack([idx, idx + 1,
                              2 * _square(0, idx), np.zeros(n, dtype=int)])
    right = np.column_stack([idx * (n + 1) + n, (idx + 1) * (n + 1) + n,
                             2 * _square(idx, n - 1), np.zeros(n, dtype=int)])
    top = np.column_stack([n * (n + 1) + idx + 1, n * (n + 1) + idx,
                           2 * _square(n - 1, idx) + 1, np.zeros(n, dtype=int)])
    left = np.column_stack([(idx + 1) * (n + 1), idx * (n + 1),
                            2 * _square(idx, 0) + 1, np.zeros(n, dtype=int)])
    boundary_edges = np.concatenate([bottom, right, top, left])

    return Mesh(vertices, triangles, boundary_edges, level,
                _structure=("unit_square", n))


def refine(mesh: Mesh):
    """Red refinement: split every triangle into 4 congruent children.

    Returns
    -------
    (Mesh, ProlongationMap)
        The refined mesh (children of parent ``t`` at ``4t..4t+3``) and the
        exact prolongation data.
    """
    nv, nt = mesh.num_vertices, mesh.num_triangles
    if 4 * nt > sys.maxsize or nv + 3 * nt > np.iinfo(_INDEX_DTYPE).max:
        raise MeshSizeError("refined mesh overflows the vertex index type")
    tri = mesh.triangles
    raw = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    edges = np.sort(raw, axis=1)
    uniq, inverse = np.unique(edges, axis=0, return_inverse=True)
    mid = nv + inverse.reshape(3, nt)               # mid[0]=m01, mid[1]=m12, mid[2]=m20

    vertices = np.concatenate([
        mesh.vertices,
        0.5 * (mesh.vertices[uniq[:, 0]] + mesh.vertices[uniq[:, 1]]),
    ])
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    m01, m12, m20 = mid
    children = np.empty((4 * nt, 3), dtype=_INDEX_DTYPE)
    children[0::4] = np.column_stack([a, m01, m20])
    children[1::4] = np.column_stack([m01, b, m12])
    children[2::4] = np.column_stack([m20, m12, c])
    children[3::4] = np.column_stack([m01, m12, m20])
    element_map = np.repeat(np.arange(nt, dtype=_INDEX_DTYPE), 4)

    edge_to_mid = {}
    for k, (u, v) in enumerate(uniq):
        edge_to_mid[(int(u), int(v))] = nv + k

    bedges = []
    for v0, v1, t, marker in mesh.boundary_edges:
        v0, v1, t, marker = int(v0), int(v1), int(t), int(marker)
        m = edge_to_mid[(min(v0, v1), max(v0, v1))]
        corners = [int(a[t]), int(b[t]), int(c[t])]
        child_at = {corners[0]: 4 * t, corners[1]: 4 * t + 1,
                    corners[2]: 4 * t + 2}
        bedges.append((v0, m, child_at[v0], marker))
        bedges.append((m, v1, child_at[v1], marker))
    boundary_edges = np.array(bedges, dtype=_INDEX_DTYPE).reshape(-1, 4)

    node_parents = np.concatenate([
        np.column_stack([np.arange(nv), np.arange(nv)]),
        uniq,
    ])
    node_weights = np.concatenate([
        np.tile([1.0, 0.0], (nv, 1)),
        np.tile([0.5, 0.5], (len(uniq), 1)),
    ])

    child = Mesh(vertices, children, boundary_edges, mesh.level + 1,
                 _parent=mesh, _parent_elements=element_map)
    pmap = ProlongationMap(mesh, child, node_parents, node_weights,
                           element_map)
    return child, pmap


def barycenters(mesh: Mesh) -> np.ndarray:
    """Per-triangle arithmetic mean of the three vertices, shape (nt, 2)."""
    return mesh.vertices[mesh.triangles].mean(axis=1)


def barycentric_coordinates(mesh: Mesh, tri_idx, points) -> np.ndarray:
    """Barycentric coordinates of ``points`` w.r.t. the given triangles.

    ``tri_idx`` and ``points`` broadcast along the leading axis; the result
    has shape ``(..., 3)`` and rows sum to one.  Coordinates may be negative
    for points outside their triangle.
    """
    tri_idx = np.asarray(tri_idx, dtype=np.int64)
    points = np.asarray(points, dtype=float)
    p0 = mesh.vertices[mesh.triangles[tri_idx, 0]]
    g = mesh.grads[tri_idx]                          # (..., 3, 2)
    d = points - p0
    lam = np.einsum("...ij,...j->...i", g, d)
    lam[..., 0] += 1.0
    return lam


def locate(mesh: Mesh, points) -> np.ndarray:
    """Index of a triangle containing each point.

    Works for meshes with a structured unit-square ancestor: the root is
    located arithmetically and the refinement chain is descended through
    the 4-children-per-parent layout.  Points on shared edges resolve to
    the most interior candidate (deterministic).
    """
    points = np.asarray(points, dtype=float)
    squeeze = points.ndim == 1
    pts = np.atleast_2d(points)

    chain = []
    node = mesh
    while node._structure is None:
        if node.parent is None:
            raise MeshError("point location requires a structured ancestor")
        chain.append(node)
        node = node.parent
    n = node._structure[1]

    ij = np.clip(np.floor(pts * n).astype(np.int64), 0, n - 1)
    frac = pts * n - ij
    lower = frac[:, 0] >= frac[:, 1]
    t = 2 * (ij[:, 1] * n + ij[:, 0]) + np.where(lower, 0, 1)

    for child_mesh in reversed(chain):
        best = 4 * t
        best_q = barycentric_coordinates(child_mesh, best, pts).min(axis=1)
        for k in (1, 2, 3):
            cand = 4 * t + k
            q = barycentric_coordinates(child_mesh, cand, pts).min(axis=1)
            take = q > best_q
            best = np.where(take, cand, best)
            best_q = np.where(take, q, best_q)
        t = best
    return t[0] if squeeze else t
