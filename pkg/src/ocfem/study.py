"""Convergence studies over nested mesh families and post-processing.

A study solves the discrete control problem on every level of a dyadic
mesh family (with coarse-to-fine continuation), measures consecutive-level
L2 differences through exact nested prolongation, and records experimental
orders of convergence together with the free-boundary diagnostics
(mixed-element classification and the barycenter-sampled comparison field).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import fem, optimizer, pde
from .errors import NonconvergenceError, OcfemError
from .fem import P0Field, P1Field
from .mesh import (Mesh, ProlongationMap, barycenters,
                   build_unit_square_mesh, locate, refine)
from .optimizer import Bounds, OcpSolution


@dataclass
class StudyRecord:
    """Per-level errors, orders and diagnostics of one study row."""

    level: int
    h: float
    e_u: float
    e_y: float
    e_phi: float
    e_upost: float
    eoc_u: Optional[float]
    eoc_y: Optional[float]
    eoc_phi: Optional[float]
    eoc_upost: Optional[float]
    kkt_residual: float
    outer_iterations: int
    measure_t1: Optional[float]


def eoc(e_prev: float, e_cur: float) -> Optional[float]:
    """Experimental order of convergence; None when undefined."""
    if e_prev > 0.0 and e_cur > 0.0:
        return math.log2(e_prev) - math.log2(e_cur)
    return None


class PostprocessedControl:
    """Pointwise projected control ``clamp(y(x) phi(x) / nu)``."""

    def __init__(self, mesh: Mesh, state: P1Field, adjoint: P1Field,
                 bounds: Bounds, nu: float):
        self.mesh = mesh
        self.state = state
        self.adjoint = adjoint
        self.bounds = bounds
        self.nu = float(nu)

    def eval_in_triangles(self, tri_idx, points) -> np.ndarray:
        raw = (self.state.eval_in_triangles(tri_idx, points) *
               self.adjoint.eval_in_triangles(tri_idx, points)) / self.nu
        return self.bounds.clamp(raw)

    def __call__(self, points) -> np.ndarray:
        return self.eval_in_triangles(locate(self.mesh, points), points)


def postprocess_control(mesh: Mesh, state: P1Field, adjoint: P1Field,
                        bounds: Bounds, nu: float) -> PostprocessedControl:
    """Second-order recovered control from converged solution fields."""
    return PostprocessedControl(mesh, state, adjoint, bounds, nu)


def postprocess_error_cross(pmap: ProlongationMap,
                            coarse: PostprocessedControl,
                            fine: PostprocessedControl) -> float:
    """L2 distance of post-processed controls across one refinement level.

    Integrated with the standard volume rule on the finer mesh; the clamp
    kinks are not split (their set has vanishing measure under the
    free-boundary assumption, keeping the quadrature error below the
    measured second-order signal).
    """
    if coarse.mesh is not pmap.parent or fine.mesh is not pmap.child:
        raise OcfemError("post-processed fields do not match the map")
    rule = fem.TRIANGLE_RULE
    mesh = fine.mesh
    fine_vals = fine.bounds.clamp(
        fine.state.at_quadrature(rule) * fine.adjoint.at_quadrature(rule)
        / fine.nu)
    pts = fem.quadrature_points(mesh, rule)          # (nt, nq, 2)
    parents = pmap.element_map[:, None] * np.ones(pts.shape[1], dtype=int)
    coarse_vals = coarse.eval_in_triangles(parents, pts)
    d2 = (fine_vals - coarse_vals) ** 2
    return float(np.sqrt(np.sum(mesh.areas * (d2 @ rule.weights))))


@dataclass
class Classification:
    """Element split by mixed active/inactive control samples.

    ``sample_points`` holds the comparison point of every element: the
    barycenter for pure elements, the first active sample for mixed ones.
    """

    t1: np.ndarray            # indices of mixed elements
    t2: np.ndarray            # indices of the rest
    measure_t1: float
    sample_points: np.ndarray  # (nt, 2)
    tol_active: float


def _control_samples(mesh, control, points):
    if isinstance(control, P0Field):
        if control.mesh is not mesh:
            raise OcfemError("P0 control lives on a different mesh")
        return np.broadcast_to(control.values[:, None],
                               points.shape[:2]).copy()
    flat = points.reshape(-1, 2)
    vals = np.asarray(control(flat), dtype=float)
    return vals.reshape(points.shape[:2])


def classify_elements(mesh: Mesh, control, bounds: Bounds,
                      tol_active: Optional[float] = None) -> Classification:
    """Split elements into mixed (active and inactive samples) and pure.

    Samples each element at its vertices and barycenter.  ``control`` is a
    pointwise evaluator or a P0Field (which always classifies as pure).
    """
    if tol_active is None:
        if math.isfinite(bounds.beta):
            tol_active = 1e-6 * (bounds.beta - bounds.alpha)
        else:
            tol_active = 1e-6 * max(1.0, abs(bounds.alpha))
    verts = mesh.vertices[mesh.triangles]            # (nt, 3, 2)
    centers = barycenters(mesh)[:, None, :]
    points = np.concatenate([verts, centers], axis=1)  # (nt, 4, 2)
    vals = _control_samples(mesh, control, points)

    active = np.abs(vals - bounds.alpha) <= tol_active
    if math.isfinite(bounds.beta):
        active |= np.abs(vals - bounds.beta) <= tol_active
    mixed = active.any(axis=1) & (~active).any(axis=1)

    sample_points = centers[:, 0, :].copy()
    if mixed.any():
        first_active = np.argmax(active[mixed], axis=1)
        sample_points[mixed] = points[mixed, first_active]
    t1 = np.flatnonzero(mixed)
    t2 = np.flatnonzero(~mixed)
    return Classification(t1=t1, t2=t2,
                          measure_t1=float(mesh.areas[t1].sum()),
                          sample_points=sample_points,
                          tol_active=float(tol_active))


def build_wh(mesh: Mesh, control, classification: Classification) -> P0Field:
    """Comparison field: control sampled at the classification points."""
    pts = classification.sample_points
    if isinstance(control, P0Field):
        vals = _control_samples(mesh, control, pts[:, None, :])[:, 0]
    else:
        vals = np.asarray(control(pts), dtype=float)
    return P0Field(mesh, vals)


def run_study(spec: pde.ProblemSpec, j_min: int, j_max: int, *,
              tol: float = 1e-9, newton_tol: float = 1e-11,
              linear_tol: float = 1e-12, classify: bool = True,
              progress: Optional[Callable] = None) -> List[StudyRecord]:
    """Solve the control problem on levels ``j_min..j_max`` and tabulate.

    Consecutive-level differences are measured by exact prolongation; rows
    are produced for ``j_min..j_max-1``.  Nonconvergence at any level
    aborts with the rows computed so far attached to the error.
    """
    if not (0 <= j_min < j_max):
        raise OcfemError("levels must satisfy 0 <= j_min < j_max")
    meshes = [build_unit_square_mesh(j_min)]
    maps: List[ProlongationMap] = []
    for _ in range(j_min, j_max):
        child, pmap = refine(meshes[-1])
        meshes.append(child)
        maps.append(pmap)

    bounds = Bounds(spec.alpha, spec.beta)
    solutions: List[OcpSolution] = []
    u_init: Optional[P0Field] = None
    y_init: Optional[P1Field] = None
    for idx, mesh in enumerate(meshes):
        level = j_min + idx
        try:
            sol = optimizer.solve_ocp(spec, mesh, init=u_init,
                                      state_init=y_init, tol=tol,
                                      newton_tol=newton_tol,
                                      linear_tol=linear_tol)
        except NonconvergenceError as err:
            partial = _build_records(spec, bounds, meshes, maps, solutions,
                                     j_min, classify=classify)
            raise NonconvergenceError(
                f"study aborted: level {level} did not converge ({err})",
                report=partial) from err
        solutions.append(sol)
        if progress is not None:
            progress(level, sol)
        if idx < len(maps):
            u_init = fem.prolong_p0(maps[idx], sol.control)
            y_init = fem.prolong_p1(maps[idx], sol.state)
    return _build_records(spec, bounds, meshes, maps, solutions, j_min,
                          classify=classify)


def _build_records(spec, bounds, meshes, maps, solutions, j_min, *,
                   classify=True):
    rows: List[StudyRecord] = []
    n_pairs = max(len(solutions) - 1, 0)
    reference = None
    if classify and solutions:
        last = solutions[-1]
        reference = postprocess_control(meshes[len(solutions) - 1],
                                        last.state, last.adjoint, bounds,
                                        spec.nu)
    for i in range(n_pairs):
        coarse, fine = solutions[i], solutions[i + 1]
        pmap = maps[i]
        e_u = fem.l2_diff_p0_cross(pmap, coarse.control, fine.control)
        e_y = fem.l2_diff_p1_cross(pmap, coarse.state, fine.state)
        e_phi = fem.l2_diff_p1_cross(pmap, coarse.adjoint, fine.adjoint)
        pp_coarse = postprocess_control(meshes[i], coarse.state,
                                        coarse.adjoint, bounds, spec.nu)
        pp_fine = postprocess_control(meshes[i + 1], fine.state,
                                      fine.adjoint, bounds, spec.nu)
        e_upost = postprocess_error_cross(pmap, pp_coarse, pp_fine)
        measure = None
        if reference is not None:
            measure = classify_elements(meshes[i], reference,
                                        bounds).measure_t1
        prev = rows[-1] if rows else None
        rows.append(StudyRecord(
            level=j_min + i, h=meshes[i].h,
            e_u=e_u, e_y=e_y, e_phi=e_phi, e_upost=e_upost,
            eoc_u=eoc(prev.e_u, e_u) if prev else None,
            eoc_y=eoc(prev.e_y, e_y) if prev else None,
            eoc_phi=eoc(prev.e_phi, e_phi) if prev else None,
            eoc_upost=eoc(prev.e_upost, e_upost) if prev else None,
            kkt_residual=coarse.kkt_residual,
            outer_iterations=coarse.outer_iterations,
            measure_t1=measure))
    return rows
