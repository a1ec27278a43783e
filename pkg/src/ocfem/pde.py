"""Nonlinear state solve and the linear solves of the derivative machinery.

All four solves share one bilinear form: the diffusion form plus a reaction
term whose weight is ``da/dy(x, y_h) + u``.  The operator is assembled once
per state and its factorization is reused by the adjoint, linearized-state
and second-order solves.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import fem
from .errors import AdmissibilityError, NonconvergenceError
from .fem import P0Field, P1Field, TRIANGLE_RULE
from .linalg import SparseSymOperator
from .mesh import Mesh


@dataclass(frozen=True)
class ProblemSpec:
    """All data of the control problem.

    Evaluator conventions: point arguments are arrays of shape (..., 2),
    state arguments arrays of shape (...); results broadcast to (...).
    ``objective`` may be None for a vanishing tracking term (pure Tikhonov
    cost).  ``beta`` may be ``math.inf`` for controls unbounded above.
    """

    nonlinearity: Callable          # a(x, y)
    nonlinearity_dy: Callable       # da/dy(x, y)
    nonlinearity_dyy: Callable      # d2a/dy2(x, y)
    reaction_floor: Callable        # a0(x), lower bound for da/dy
    boundary_flux: Callable         # g on the boundary
    nu: float
    alpha: float
    beta: float
    objective: Optional[Callable] = None       # L(x, y)
    objective_dy: Optional[Callable] = None
    objective_dyy: Optional[Callable] = None
    diffusion: Optional[Callable] = None       # None: identity coefficients
    name: str = ""

    def __post_init__(self):
        if not self.nu > 0.0:
            raise AdmissibilityError("nu must be positive")
        if not self.alpha < self.beta:
            raise AdmissibilityError("bounds must satisfy alpha < beta")

    def with_overrides(self, **changes) -> "ProblemSpec":
        return replace(self, **changes)

    def validate(self, mesh: Mesh) -> None:
        """Sampled admissibility checks on the given mesh.

        Verifies a0(x) + alpha >= 0 at every volume quadrature point, that
        a0 + alpha is not identically zero, and spot-checks the
        monotonicity bound da/dy(x, y) >= a0(x).
        """
        pts = fem.quadrature_points(mesh).reshape(-1, 2)
        a0 = np.broadcast_to(np.asarray(self.reaction_floor(pts), float),
                             (len(pts),))
        worst = float(np.min(a0) + self.alpha)
        if worst < -1e-12:
            raise AdmissibilityError(
                f"a0(x) + alpha = {worst:.6e} < 0: coercivity is lost")
        if np.max(a0) + self.alpha <= 0.0:
            raise AdmissibilityError("a0 + alpha vanishes identically")
        sample = pts[:: max(1, len(pts) // 64)]
        a0s = np.broadcast_to(np.asarray(self.reaction_floor(sample), float),
                              (len(sample),))
        for y_val in (-3.0, -1.0, 0.0, 0.5, 2.0):
            dy = np.broadcast_to(
                np.asarray(self.nonlinearity_dy(
                    sample, np.full(len(sample), y_val)), float),
                (len(sample),))
            gap = float(np.min(dy - a0s))
            if gap < -1e-10:
                raise AdmissibilityError(
                    f"da/dy(x, {y_val}) < a0(x) by {-gap:.3e}: "
                    "reaction floor is not a lower bound")

    def check_control(self, mesh: Mesh, u: P0Field) -> None:
        """Check membership of u in the admissible monotonicity class."""
        pts = fem.quadrature_points(mesh)            # (nt, nq, 2)
        nt, nq = pts.shape[0], pts.shape[1]
        a0 = np.broadcast_to(
            np.asarray(self.reaction_floor(pts.reshape(-1, 2)), float),
            (nt * nq,)).reshape(nt, nq)
        total = a0 + u.values[:, None]
        if float(total.min()) < -1e-12:
            raise AdmissibilityError(
                "control leaves the admissible class: a0 + u < 0 somewhere")
        if float(total.max()) <= 0.0:
            raise AdmissibilityError("a0 + u vanishes identically")


@dataclass
class SolveReport:
    """Diagnostics of one nonlinear state solve."""

    iterations: int = 0
    residual: float = math.inf
    damping_events: int = 0
    converged: bool = False


def _objective_dy_values(spec, yq, pts_flat, shape):
    if spec.objective_dy is None:
        return np.zeros(shape)
    vals = np.asarray(spec.objective_dy(pts_flat, yq.reshape(-1)), float)
    return np.broadcast_to(vals, (shape[0] * shape[1],)).reshape(shape)


def second_order_weight(spec: ProblemSpec, mesh: Mesh, y: P1Field,
                        phi: P1Field) -> np.ndarray:
    """Quadrature values of ``d2L/dy2(x,y) - phi * d2a/dy2(x,y)``, (nt, nq).

    Shared by the second-order solve and the quadratic-form evaluation so
    that both sides of the cross-check integrate the same function.
    """
    pts = fem.quadrature_points(mesh)
    flat = pts.reshape(-1, 2)
    yq = y.at_quadrature()
    shape = yq.shape
    d2a = np.broadcast_to(
        np.asarray(spec.nonlinearity_dyy(flat, yq.reshape(-1)), float),
        (shape[0] * shape[1],)).reshape(shape)
    if spec.objective_dyy is None:
        d2l = np.zeros(shape)
    else:
        d2l = np.broadcast_to(
            np.asarray(spec.objective_dyy(flat, yq.reshape(-1)), float),
            (shape[0] * shape[1],)).reshape(shape)
    return d2l - phi.at_quadrature() * d2a


def linearized_operator(spec: ProblemSpec, mesh: Mesh, u: P0Field,
                        y: P1Field,
                        stiffness: SparseSymOperator = None) -> SparseSymOperator:
    """Operator of the linearized form: diffusion + reaction da/dy + u."""
    if stiffness is None:
        stiffness = fem.assemble_stiffness(mesh, spec.diffusion)
    pts = fem.quadrature_points(mesh)
    yq = y.at_quadrature()
    da = np.broadcast_to(
        np.asarray(spec.nonlinearity_dy(pts.reshape(-1, 2),
                                        yq.reshape(-1)), float),
        (yq.size,)).reshape(yq.shape)
    weight = da + u.values[:, None]
    return stiffness + fem.assemble_weighted_mass(mesh, weight)


def solve_state(spec: ProblemSpec, mesh: Mesh, u: P0Field,
                init: P1Field = None, *, tol: float = 1e-11,
                max_iterations: int = 50, linear_tol: float = 1e-12,
                stiffness: SparseSymOperator = None,
                check_admissible: bool = True):
    """Damped Newton solve of the discrete semilinear state equation.

    Returns ``(P1Field, SolveReport)``.  The residual is driven below
    ``tol * (1 + ||boundary load||)``; the Newton direction uses the exact
    tangent (stiffness plus reaction mass with weight da/dy + u).
    """
    if check_admissible:
        spec.check_control(mesh, u)
    if stiffness is None:
        stiffness = fem.assemble_stiffness(mesh, spec.diffusion)
    load = fem.assemble_boundary_load(mesh, spec.boundary_flux)
    scale = 1.0 + float(np.linalg.norm(load))
    pts = fem.quadrature_points(mesh)
    flat = pts.reshape(-1, 2)
    nt, nq = pts.shape[0], pts.shape[1]

    def residual(values):
        yq = (values[mesh.triangles] @ TRIANGLE_RULE.points.T)
        a_vals = np.broadcast_to(
            np.asarray(spec.nonlinearity(flat, yq.reshape(-1)), float),
            (nt * nq,)).reshape(nt, nq)
        res = stiffness.matvec(values)
        res += fem.assemble_volume_load(mesh, a_vals)
        res += fem.p0_weighted_p1_load(mesh, u, P1Field(mesh, values))
        res -= load
        return res

    y = np.zeros(mesh.num_vertices) if init is None else init.values.copy()
    report = SolveReport()
    f = residual(y)
    norm_f = float(np.linalg.norm(f))
    for it in range(max_iterations):
        if norm_f <= tol * scale:
            report.converged = True
            break
        operator = linearized_operator(spec, mesh, u, P1Field(mesh, y),
                                       stiffness=stiffness)
        delta = operator.solve_spd(-f, tol=linear_tol)
        step = 1.0
        for _ in range(30):
            y_trial = y + step * delta
            f_trial = residual(y_trial)
            norm_trial = float(np.linalg.norm(f_trial))
            if norm_trial < norm_f or norm_trial <= tol * scale:
                break
            step *= 0.5
            report.damping_events += 1
        else:
            report.iterations = it + 1
            report.residual = norm_f
            raise NonconvergenceError(
                "Newton damping failed to reduce the state residual",
                report=report)
        y, f, norm_f = y_trial, f_trial, norm_trial
        report.iterations = it + 1
    else:
        report.residual = norm_f
        raise NonconvergenceError(
            f"state Newton did not converge in {max_iterations} iterations "
            f"(residual {norm_f:.3e})", report=report)
    report.residual = norm_f
    report.converged = True
    return P1Field(mesh, y), report


def solve_adjoint(spec: ProblemSpec, mesh: Mesh, u: P0Field, y: P1Field, *,
                  operator: SparseSymOperator = None,
                  linear_tol: float = 1e-12) -> P1Field:
    """Discrete adjoint state for the current state and control."""
    if spec.objective_dy is None:
        return P1Field.zeros(mesh)
    if operator is None:
        operator = linearized_operator(spec, mesh, u, y)
    pts = fem.quadrature_points(mesh)
    yq = y.at_quadrature()
    rhs_vals = _objective_dy_values(spec, yq, pts.reshape(-1, 2), yq.shape)
    rhs = fem.assemble_volume_load(mesh, rhs_vals)
    return P1Field(mesh, operator.solve_spd(rhs, tol=linear_tol))


def solve_linearized(spec: ProblemSpec, mesh: Mesh, u: P0Field, y: P1Field,
                     v: P0Field, *, operator: SparseSymOperator = None,
                     linear_tol: float = 1e-12) -> P1Field:
    """Derivative of the control-to-state map in direction v (P0)."""
    if operator is None:
        operator = linearized_operator(spec, mesh, u, y)
    rhs = -fem.p0_weighted_p1_load(mesh, v, y)
    return P1Field(mesh, operator.solve_spd(rhs, tol=linear_tol))


def solve_eta(spec: ProblemSpec, mesh: Mesh, u: P0Field, y: P1Field,
              phi: P1Field, z: P1Field, v: P0Field, *,
              operator: SparseSymOperator = None,
              curvature: np.ndarray = None,
              linear_tol: float = 1e-12) -> P1Field:
    """Second-order auxiliary solve feeding the Hessian representation."""
    if operator is None:
        operator = linearized_operator(spec, mesh, u, y)
    if curvature is None:
        curvature = second_order_weight(spec, mesh, y, phi)
    rhs = fem.assemble_volume_load(mesh, curvature * z.at_quadrature())
    rhs -= fem.p0_weighted_p1_load(mesh, v, phi)
    return P1Field(mesh, operator.solve_spd(rhs, tol=linear_tol))
