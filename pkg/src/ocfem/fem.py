"""P1/P0 spaces, quadrature, assembly, L2 projection and norms.

Element conventions
-------------------
* P1 basis functions on a triangle are the barycentric coordinates; their
  gradients are constant per triangle and precomputed on the mesh.
* Integrals over a triangle use a symmetric quadrature rule stated in
  barycentric coordinates with weights summing to one, so that
  ``int_T f ~= |T| * sum_q w_q f(x_q)``.
* Products of two P1 factors (mass terms, elementwise means of y*phi) are
  integrated with the closed-form identity
  ``int_T y z = |T|/12 * (sum_i y_i z_i + (sum_i y_i)(sum_i z_i))``,
  which is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import MeshError, OcfemError
from .linalg import SparseSymOperator
from .mesh import Mesh, ProlongationMap, barycentric_coordinates, locate


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points/weights integrating polynomials exactly up to
    ``degree`` on the reference triangle; weights sum to one."""

    points: np.ndarray   # (nq, 3)
    weights: np.ndarray  # (nq,)
    degree: int

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, float))
        object.__setattr__(self, "weights", np.asarray(self.weights, float))
        if abs(self.weights.sum() - 1.0) > 1e-14:
            raise OcfemError("quadrature weights must sum to 1")


def _symmetric_rule(groups):
    pts, wts = [], []
    for w, a, b in groups:
        pts += [(a, b, b), (b, a, b), (b, b, a)]
        wts += [w, w, w]
    return QuadratureRule(np.array(pts), np.array(wts), degree=4)


# 6-point degree-4 symmetric rule (two orbits).
TRIANGLE_RULE = _symmetric_rule([
    (0.223381589678011, 0.108103018168070, 0.445948490915965),
    (0.109951743655322, 0.816847572980459, 0.091576213509771),
])

# 3-point Gauss rule on [0,1]: exact for polynomials up to degree 5.
_S35 = np.sqrt(0.6)
EDGE_RULE_POINTS = np.array([0.5 * (1.0 - _S35), 0.5, 0.5 * (1.0 + _S35)])
EDGE_RULE_WEIGHTS = np.array([5.0 / 18.0, 4.0 / 9.0, 5.0 / 18.0])
EDGE_RULE_DEGREE = 5


class P1Field:
    """Continuous piecewise-linear field given by nodal values."""

    def __init__(self, mesh: Mesh, values):
        self.mesh = mesh
        self.values = np.ascontiguousarray(values, dtype=float)
        if self.values.shape != (mesh.num_vertices,):
            raise MeshError("P1 field needs one value per vertex")

    @classmethod
    def zeros(cls, mesh: Mesh) -> "P1Field":
        return cls(mesh, np.zeros(mesh.num_vertices))

    @classmethod
    def from_function(cls, mesh: Mesh, f) -> "P1Field":
        return cls(mesh, np.asarray(f(mesh.vertices), dtype=float))

    def at_quadrature(self, rule: QuadratureRule = TRIANGLE_RULE) -> np.ndarray:
        """Values at all quadrature points, shape (nt, nq)."""
        return self.values[self.mesh.triangles] @ rule.points.T

    def eval_in_triangles(self, tri_idx, points) -> np.ndarray:
        """Evaluate at ``points`` known to lie in triangles ``tri_idx``."""
        lam = barycentric_coordinates(self.mesh, tri_idx, points)
        nodal = self.values[self.mesh.triangles[np.asarray(tri_idx, np.int64)]]
        return np.sum(nodal * lam, axis=-1)

    def evaluate(self, points) -> np.ndarray:
        """Evaluate at arbitrary points (uses mesh point location)."""
        return self.eval_in_triangles(locate(self.mesh, points), points)

    def write_text(self, stream) -> None:
        stream.write(f"p1 {len(self.values)}\n")
        for v in self.values:
            stream.write(f"{float(v)!r}\n")


class P0Field:
    """Elementwise-constant field given by one value per triangle."""

    def __init__(self, mesh: Mesh, values):
        self.mesh = mesh
        self.values = np.ascontiguousarray(values, dtype=float)
        if self.values.shape != (mesh.num_triangles,):
            raise MeshError("P0 field needs one value per triangle")

    @classmethod
    def zeros(cls, mesh: Mesh) -> "P0Field":
        return cls(mesh, np.zeros(mesh.num_triangles))

    @classmethod
    def constant(cls, mesh: Mesh, value: float) -> "P0Field":
        return cls(mesh, np.full(mesh.num_triangles, float(value)))

    def evaluate(self, points) -> np.ndarray:
        return self.values[locate(self.mesh, points)]

    def write_text(self, stream) -> None:
        stream.write(f"p0 {len(self.values)}\n")
        for v in self.values:
            stream.write(f"{float(v)!r}\n")


def quadrature_points(mesh: Mesh,
                      rule: QuadratureRule = TRIANGLE_RULE) -> np.ndarray:
    """Physical coordinates of all volume quadrature points, (nt, nq, 2)."""
    corners = mesh.vertices[mesh.triangles]          # (nt, 3, 2)
    return np.einsum("qk,tkd->tqd", rule.points, corners)


def _as_quad_values(mesh, source, rule):
    """Coerce a pointwise evaluator / field / array to values (nt, nq)."""
    nt, nq = mesh.num_triangles, len(rule.weights)
    if isinstance(source, P1Field):
        return source.at_quadrature(rule)
    if isinstance(source, P0Field):
        return np.broadcast_to(source.values[:, None], (nt, nq))
    if callable(source):
        pts = quadrature_points(mesh, rule)
        vals = np.asarray(source(pts.reshape(-1, 2)), dtype=float)
        return vals.reshape(nt, nq)
    vals = np.asarray(source, dtype=float)
    if vals.shape != (nt, nq):
        raise OcfemError(f"expected quadrature values of shape {(nt, nq)}")
    return vals


def _scatter_nodal(mesh: Mesh, contributions: np.ndarray) -> np.ndarray:
    """Accumulate per-triangle nodal contributions (nt, 3) into (nv,)."""
    return np.bincount(mesh.triangles.ravel(),
                       weights=contributions.ravel(),
                       minlength=mesh.num_vertices)


def assemble_stiffness(mesh: Mesh, diffusion=None,
                       rule: QuadratureRule = TRIANGLE_RULE) -> SparseSymOperator:
    """Stiffness operator of the diffusion bilinear form.

    ``diffusion`` is None for the identity matrix (Laplacian) or a callable
    mapping points (m, 2) to symmetric coefficient matrices (m, 2, 2).
    The result is symmetric positive semidefinite with constants in its
    kernel.
    """
    g = mesh.grads                                   # (nt, 3, 2)
    if diffusion is None:
        local = np.einsum("tid,tjd->tij", g, g)
    else:
        pts = quadrature_points(mesh, rule).reshape(-1, 2)
        coef = np.asarray(diffusion(pts), dtype=float)
        if coef.shape != (len(pts), 2, 2):
            raise OcfemError("diffusion evaluator must return (m, 2, 2)")
        if np.max(np.abs(coef - np.swapaxes(coef, 1, 2))) > \
                1e-12 * max(np.max(np.abs(coef)), 1.0):
            raise OcfemError("diffusion coefficient matrix is not symmetric")
        avg = np.einsum("q,tqab->tab",
                        rule.weights,
                        coef.reshape(mesh.num_triangles, -1, 2, 2))
        local = np.einsum("tia,tab,tjb->tij", g, avg, g)
    local *= mesh.areas[:, None, None]
    return _operator_from_local(mesh, local)


def assemble_weighted_mass(mesh: Mesh, weight=None,
                           rule: QuadratureRule = TRIANGLE_RULE) -> SparseSymOperator:
    """Mass operator of ``int w y z`` for a bounded weight.

    ``weight`` may be None (w = 1), a scalar, a P0Field (exact per-element
    constants), a pointwise evaluator, or precomputed quadrature values of
    shape (nt, nq).
    """
    nt = mesh.num_triangles
    if weight is None or np.isscalar(weight) or isinstance(weight, P0Field):
        w = (np.ones(nt) if weight is None else
             np.full(nt, float(weight)) if np.isscalar(weight) else
             weight.values)
        base = (np.ones((3, 3)) + np.eye(3)) / 12.0
        local = (w * mesh.areas)[:, None, None] * base
    else:
        vals = _as_quad_values(mesh, weight, rule)
        wq = vals * rule.weights                      # (nt, nq)
        local = np.einsum("tq,qi,qj->tij", wq, rule.points, rule.points)
        local *= mesh.areas[:, None, None]
    return _operator_from_local(mesh, local)


def _operator_from_local(mesh: Mesh, local: np.ndarray) -> SparseSymOperator:
    tri = mesh.triangles
    rows = np.repeat(tri, 3, axis=1).ravel()
    cols = np.tile(tri, (1, 3)).ravel()
    return SparseSymOperator.from_triplets(mesh.num_vertices, rows, cols,
                                           local.ravel())


def assemble_volume_load(mesh: Mesh, f,
                         rule: QuadratureRule = TRIANGLE_RULE) -> np.ndarray:
    """Load vector with entries ``int_Omega f phi_i`` by quadrature."""
    vals = _as_quad_values(mesh, f, rule)
    contrib = (vals * rule.weights) @ rule.points     # (nt, 3)
    contrib *= mesh.areas[:, None]
    return _scatter_nodal(mesh, contrib)


def assemble_boundary_load(mesh: Mesh, g) -> np.ndarray:
    """Load vector with entries ``int_Gamma g phi_i`` by edge quadrature."""
    out = np.zeros(mesh.num_vertices)
    edges = mesh.boundary_edges
    if len(edges) == 0:
        return out
    p0 = mesh.vertices[edges[:, 0]]
    p1 = mesh.vertices[edges[:, 1]]
    lengths = np.linalg.norm(p1 - p0, axis=1)
    for t, w in zip(EDGE_RULE_POINTS, EDGE_RULE_WEIGHTS):
        pts = (1.0 - t) * p0 + t * p1
        gv = np.asarray(g(pts), dtype=float) * w * lengths
        out += np.bincount(edges[:, 0], weights=gv * (1.0 - t),
                           minlength=mesh.num_vertices)
        out += np.bincount(edges[:, 1], weights=gv * t,
                           minlength=mesh.num_vertices)
    return out


def p0_weighted_p1_load(mesh: Mesh, v: P0Field, w: P1Field) -> np.ndarray:
    """Load vector with entries ``int v w phi_i``; exact for P0 v, P1 w.

    Uses the exact local mass action ``|T|/12 (w_loc + sum(w_loc))``.
    """
    w_loc = w.values[mesh.triangles]                  # (nt, 3)
    action = (w_loc + w_loc.sum(axis=1, keepdims=True)) / 12.0
    contrib = (v.values * mesh.areas)[:, None] * action
    return _scatter_nodal(mesh, contrib)


def elementwise_p1_product_mean(mesh: Mesh, a: P1Field, b: P1Field) -> np.ndarray:
    """Exact per-element mean ``(1/|T|) int_T a b`` for P1 factors, (nt,)."""
    av = a.values[mesh.triangles]
    bv = b.values[mesh.triangles]
    return (np.sum(av * bv, axis=1) + av.sum(axis=1) * bv.sum(axis=1)) / 12.0


def l2_project_p0(mesh: Mesh, source,
                  rule: QuadratureRule = TRIANGLE_RULE) -> P0Field:
    """L2-orthogonal projection onto elementwise constants.

    The element value is the elementwise mean of the source: exact for P0
    and P1 inputs, quadrature-evaluated for pointwise evaluators.
    """
    if isinstance(source, P0Field):
        return P0Field(mesh, source.values.copy())
    if isinstance(source, P1Field):
        return P0Field(mesh, source.values[mesh.triangles].mean(axis=1))
    vals = _as_quad_values(mesh, source, rule)
    return P0Field(mesh, vals @ rule.weights)


def integrate(mesh: Mesh, source,
              rule: QuadratureRule = TRIANGLE_RULE) -> float:
    """Quadrature value of ``int_Omega source``."""
    vals = _as_quad_values(mesh, source, rule)
    return float(mesh.areas @ (vals @ rule.weights))


def l2_norm_p0(field: P0Field) -> float:
    return float(np.sqrt(np.sum(field.mesh.areas * field.values ** 2)))


def l2_diff_p0(a: P0Field, b: P0Field) -> float:
    """Exact L2 norm of the difference of two P0 fields on one mesh."""
    _require_same_mesh(a, b)
    d = a.values - b.values
    return float(np.sqrt(np.sum(a.mesh.areas * d * d)))


def l2_diff_p1(a: P1Field, b: P1Field) -> float:
    """Exact L2 norm of the difference of two P1 fields on one mesh."""
    _require_same_mesh(a, b)
    d = (a.values - b.values)[a.mesh.triangles]
    per_t = np.sum(d * d, axis=1) + d.sum(axis=1) ** 2
    return float(np.sqrt(np.sum(a.mesh.areas / 12.0 * per_t)))


def l2_norm_p1(field: P1Field) -> float:
    return l2_diff_p1(field, P1Field.zeros(field.mesh))


def linf_diff_p1(a: P1Field, b: P1Field) -> float:
    _require_same_mesh(a, b)
    return float(np.max(np.abs(a.values - b.values))) if len(a.values) else 0.0


def linf_diff_p0(a: P0Field, b: P0Field) -> float:
    _require_same_mesh(a, b)
    return float(np.max(np.abs(a.values - b.values))) if len(a.values) else 0.0


def prolong_p1(pmap: ProlongationMap, field: P1Field) -> P1Field:
    if field.mesh is not pmap.parent:
        raise MeshError("field does not live on the map's parent mesh")
    return P1Field(pmap.child, pmap.prolong_p1_values(field.values))


def prolong_p0(pmap: ProlongationMap, field: P0Field) -> P0Field:
    if field.mesh is not pmap.parent:
        raise MeshError("field does not live on the map's parent mesh")
    return P0Field(pmap.child, pmap.prolong_p0_values(field.values))


def l2_diff_p1_cross(pmap: ProlongationMap, coarse: P1Field,
                     fine: P1Field) -> float:
    """Exact L2 difference across one refinement level (prolong, then norm)."""
    return l2_diff_p1(prolong_p1(pmap, coarse), fine)


def l2_diff_p0_cross(pmap: ProlongationMap, coarse: P0Field,
                     fine: P0Field) -> float:
    return l2_diff_p0(prolong_p0(pmap, coarse), fine)


def _require_same_mesh(a, b):
    if a.mesh is not b.mesh:
        raise MeshError("fields live on different meshes; "
                        "use a ProlongationMap-based cross-level norm")
