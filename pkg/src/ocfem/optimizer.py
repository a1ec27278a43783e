"""Discrete cost, derivatives, projection formula, and the outer solver.

The outer solver is a primal-dual active-set (semismooth Newton) method on
the projection-formula residual ``u - Proj((1/nu) * elementwise_mean(y*phi))``:
elements are classified by the current multiplier, active values are fixed
at their bound, and the reduced Newton system on the inactive elements is
solved by conjugate gradients in the elementwise L2 inner product with
matrix-free Hessian products (one linearized solve plus one second-order
solve per product, reusing the factorized state operator).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import fem, pde
from .errors import NonconvergenceError, OcfemError
from .fem import P0Field, P1Field
from .mesh import Mesh


@dataclass(frozen=True)
class Bounds:
    """Box constraints [alpha, beta]; beta may be ``math.inf``."""

    alpha: float
    beta: float

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise OcfemError("bounds must satisfy alpha < beta")

    def clamp(self, values: np.ndarray) -> np.ndarray:
        out = np.maximum(values, self.alpha)
        if math.isfinite(self.beta):
            out = np.minimum(out, self.beta)
        return out


@dataclass
class OcpSolution:
    """Converged (or best) solution of the discrete control problem."""

    control: P0Field
    state: P1Field
    adjoint: P1Field
    cost: float
    kkt_residual: float
    outer_iterations: int
    converged: bool
    state_report: pde.SolveReport


def _bounds_of(spec: pde.ProblemSpec) -> Bounds:
    return Bounds(spec.alpha, spec.beta)


class _LinearizedProblem:
    """State, adjoint and the shared factorized operator at a control."""

    def __init__(self, spec, mesh, u, state_init=None, *, stiffness=None,
                 newton_tol=1e-11, linear_tol=1e-12):
        self.spec = spec
        self.mesh = mesh
        self.u = u
        if stiffness is None:
            stiffness = fem.assemble_stiffness(mesh, spec.diffusion)
        self.stiffness = stiffness
        self.state, self.report = pde.solve_state(
            spec, mesh, u, init=state_init, tol=newton_tol,
            linear_tol=linear_tol, stiffness=stiffness)
        self.operator = pde.linearized_operator(spec, mesh, u, self.state,
                                                stiffness=stiffness)
        self.adjoint = pde.solve_adjoint(spec, mesh, u, self.state,
                                         operator=self.operator,
                                         linear_tol=linear_tol)
        self.linear_tol = linear_tol
        self._curvature = None
        self.product_mean = fem.elementwise_p1_product_mean(
            mesh, self.state, self.adjoint)

    @property
    def curvature(self):
        if self._curvature is None:
            self._curvature = pde.second_order_weight(
                self.spec, self.mesh, self.state, self.adjoint)
        return self._curvature

    def solve_z(self, v: P0Field) -> P1Field:
        return pde.solve_linearized(self.spec, self.mesh, self.u, self.state,
                                    v, operator=self.operator,
                                    linear_tol=self.linear_tol)

    def hessian_apply_values(self, v_values: np.ndarray) -> np.ndarray:
        """Elementwise values of the Hessian image of a P0 direction.

        Second-derivative representation through the auxiliary solve:
        ``(Hv)_T = nu v_T - mean_T(phi z_v + y eta_v)``.
        """
        v = P0Field(self.mesh, v_values)
        z = self.solve_z(v)
        eta = pde.solve_eta(self.spec, self.mesh, self.u, self.state,
                            self.adjoint, z, v, operator=self.operator,
                            curvature=self.curvature,
                            linear_tol=self.linear_tol)
        mean = fem.elementwise_p1_product_mean(self.mesh, self.adjoint, z)
        mean += fem.elementwise_p1_product_mean(self.mesh, self.state, eta)
        return self.spec.nu * v_values - mean


def cost(spec: pde.ProblemSpec, mesh: Mesh, u: P0Field, *,
         state: P1Field = None, **solve_kwargs) -> float:
    """Value of the discrete objective at a control (state solved if absent)."""
    if state is None:
        state, _ = pde.solve_state(spec, mesh, u, **solve_kwargs)
    tracking = 0.0
    if spec.objective is not None:
        pts = fem.quadrature_points(mesh)
        yq = state.at_quadrature()
        vals = np.broadcast_to(
            np.asarray(spec.objective(pts.reshape(-1, 2),
                                      yq.reshape(-1)), float),
            (yq.size,)).reshape(yq.shape)
        tracking = fem.integrate(mesh, vals)
    tikhonov = 0.5 * spec.nu * float(np.sum(mesh.areas * u.values ** 2))
    return tracking + tikhonov


def gradient_field(spec: pde.ProblemSpec, mesh: Mesh, u: P0Field, *,
                   state: P1Field = None, adjoint: P1Field = None,
                   **solve_kwargs) -> P0Field:
    """Elementwise gradient ``nu u_T - mean_T(y phi)`` (exact means).

    The directional derivative in a P0 direction v is exactly
    ``sum_T grad_T v_T |T|``.
    """
    if state is None or adjoint is None:
        state, _ = pde.solve_state(spec, mesh, u, **solve_kwargs)
        adjoint = pde.solve_adjoint(spec, mesh, u, state)
    mean = fem.elementwise_p1_product_mean(mesh, state, adjoint)
    return P0Field(mesh, spec.nu * u.values - mean)


def project_control(mesh: Mesh, state: P1Field, adjoint: P1Field,
                    bounds: Bounds, nu: float) -> P0Field:
    """Projection formula: clamp of the elementwise mean of y*phi / nu."""
    mean = fem.elementwise_p1_product_mean(mesh, state, adjoint)
    return P0Field(mesh, bounds.clamp(mean / nu))


def kkt_residual(mesh: Mesh, u: P0Field, state: P1Field, adjoint: P1Field,
                 bounds: Bounds, nu: float) -> float:
    """L2 distance between u and its projection-formula image."""
    return fem.l2_diff_p0(u, project_control(mesh, state, adjoint, bounds, nu))


def hessian_bilinear(spec: pde.ProblemSpec, mesh: Mesh, u: P0Field,
                     v1: P0Field, v2: P0Field, *, form: str = "z",
                     problem: Optional[_LinearizedProblem] = None) -> float:
    """Second derivative of the discrete cost in two P0 directions.

    ``form="z"`` evaluates the symmetric two-solve expression;
    ``form="eta"`` evaluates the representation through the auxiliary
    second-order solve (with the Tikhonov factor nu on the leading term).
    Both agree to solver tolerance.
    """
    if problem is None:
        problem = _LinearizedProblem(spec, mesh, u)
    if form == "eta":
        hv = problem.hessian_apply_values(v1.values)
        return float(np.sum(mesh.areas * hv * v2.values))
    if form != "z":
        raise OcfemError("form must be 'z' or 'eta'")
    z1 = problem.solve_z(v1)
    z2 = z1 if v2 is v1 else problem.solve_z(v2)
    current = fem.integrate(
        mesh, problem.curvature * z1.at_quadrature() * z2.at_quadrature())
    phi = problem.adjoint
    cross = fem.elementwise_p1_product_mean(mesh, z2, phi) * v1.values
    cross += fem.elementwise_p1_product_mean(mesh, z1, phi) * v2.values
    current -= float(np.sum(mesh.areas * cross))
    current += spec.nu * float(np.sum(mesh.areas * v1.values * v2.values))
    return current


def _reduced_cg(problem, rhs, inactive, areas, tol, max_iterations):
    """CG on the inactive block of the Hessian in the elementwise L2 inner
    product, preconditioned by 1/nu.  Truncated on indefiniteness."""
    nu = problem.spec.nu
    x = np.zeros_like(rhs)
    r = np.where(inactive, rhs, 0.0)
    rhs_norm = math.sqrt(float(np.sum(areas * r * r)))
    if rhs_norm == 0.0:
        return x
    z = r / nu
    p = z.copy()
    rz = float(np.sum(areas * r * z))
    for _ in range(max_iterations):
        hp = problem.hessian_apply_values(p)
        hp = np.where(inactive, hp, 0.0)
        php = float(np.sum(areas * p * hp))
        if php <= 0.0:
            # Negative curvature: fall back to the best descent information
            # gathered so far (steepest direction on the first pass).
            return x if np.any(x) else z
        alpha = rz / php
        x += alpha * p
        r -= alpha * hp
        res = math.sqrt(float(np.sum(areas * r * r)))
        if res <= tol * rhs_norm:
            break
        z = r / nu
        rz_new = float(np.sum(areas * r * z))
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def solve_ocp(spec: pde.ProblemSpec, mesh: Mesh, init: P0Field = None, *,
              tol: float = 1e-9, max_outer: int = 50,
              newton_tol: float = 1e-11, linear_tol: float = 1e-12,
              cg_tol: float = 1e-10, cg_max_iterations: int = 200,
              state_init: P1Field = None) -> OcpSolution:
    """Solve the discrete control problem to a KKT residual below ``tol``.

    Raises NonconvergenceError (carrying the best iterate) if the outer
    budget is exhausted, which signals possible loss of second-order
    sufficiency at the computed point.
    """
    spec.validate(mesh)
    bounds = _bounds_of(spec)
    areas = mesh.areas
    stiffness = fem.assemble_stiffness(mesh, spec.diffusion)
    u_values = (bounds.clamp(np.zeros(mesh.num_triangles)) if init is None
                else bounds.clamp(init.values))
    y_guess = state_init
    best: Optional[OcpSolution] = None
    last_kkt = math.inf
    stall = 0

    for it in range(1, max_outer + 1):
        problem = _LinearizedProblem(spec, mesh, P0Field(mesh, u_values),
                                     state_init=y_guess, stiffness=stiffness,
                                     newton_tol=newton_tol,
                                     linear_tol=linear_tol)
        y_guess = problem.state
        q = problem.product_mean / spec.nu
        projected = bounds.clamp(q)
        diff = u_values - projected
        kkt = math.sqrt(float(np.sum(areas * diff * diff)))
        if best is None or kkt < best.kkt_residual:
            best = OcpSolution(control=P0Field(mesh, u_values.copy()),
                               state=problem.state, adjoint=problem.adjoint,
                               cost=math.nan, kkt_residual=kkt,
                               outer_iterations=it, converged=False,
                               state_report=problem.report)
        if kkt <= tol:
            best = OcpSolution(control=P0Field(mesh, u_values.copy()),
                               state=problem.state, adjoint=problem.adjoint,
                               cost=cost(spec, mesh, P0Field(mesh, u_values),
                                         state=problem.state),
                               kkt_residual=kkt, outer_iterations=it,
                               converged=True, state_report=problem.report)
            return best

        stall = stall + 1 if kkt >= last_kkt else 0
        last_kkt = kkt
        if stall >= 3:
            # Damped fixed-point safeguard against local nonconvexity.
            u_values = 0.5 * u_values + 0.5 * projected
            stall = 0
            continue

        multiplier = spec.nu * u_values - problem.product_mean
        active_low = q < spec.alpha
        active_high = (q > spec.beta) if math.isfinite(spec.beta) else \
            np.zeros_like(active_low)
        inactive = ~(active_low | active_high)
        delta = np.zeros_like(u_values)
        delta[active_low] = spec.alpha - u_values[active_low]
        if math.isfinite(spec.beta):
            delta[active_high] = spec.beta - u_values[active_high]

        rhs = -multiplier
        if np.any(~inactive):
            h_active = problem.hessian_apply_values(
                np.where(inactive, 0.0, delta))
            rhs -= h_active
        step = _reduced_cg(problem, np.where(inactive, rhs, 0.0), inactive,
                           areas, cg_tol, cg_max_iterations)
        u_values = bounds.clamp(u_values + delta + step)

    best.cost = cost(spec, mesh, best.control, state=best.state)
    raise NonconvergenceError(
        f"outer solver did not reach KKT tolerance {tol:.3e} in "
        f"{max_outer} iterations (best residual {best.kkt_residual:.3e}); "
        "possible loss of second-order sufficiency", report=best)
