"""Command-line interface: solve, study and check subcommands.

Configuration is a preset name plus scalar overrides, given as flags or as
a flat ``key=value`` text file (flags win).  The study command emits the
convergence table as CSV with LF line endings; two runs with identical
configuration produce byte-identical output.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from . import fem, optimizer, pde, presets, study
from .errors import AdmissibilityError, NonconvergenceError, OcfemError
from .fem import P0Field, P1Field
from .mesh import Mesh, build_unit_square_mesh

CSV_HEADER = ("j,h,e_u,eoc_u,e_y,eoc_y,e_phi,eoc_phi,"
              "e_upost,eoc_upost,measure_T1,kkt,iters")


@dataclass
class RunConfig:
    """Resolved run configuration (preset plus scalar overrides)."""

    preset: str
    nu: Optional[float] = None
    alpha: Optional[float] = None
    beta: Optional[float] = None
    level: int = 4
    j_min: int = 3
    j_max: int = 8
    tol_kkt: float = 1e-9
    tol_newton: float = 1e-11
    tol_linear: float = 1e-12
    out: Optional[str] = None
    emit_fields: bool = False

    def build_spec(self) -> pde.ProblemSpec:
        spec = presets.get_preset(self.preset)
        overrides = {}
        if self.nu is not None:
            overrides["nu"] = self.nu
        if self.alpha is not None:
            overrides["alpha"] = self.alpha
        if self.beta is not None:
            overrides["beta"] = self.beta
        return spec.with_overrides(**overrides) if overrides else spec


def parse_levels(text: str) -> Tuple[int, int]:
    """Parse a level range of the form ``A..B`` with A < B."""
    parts = text.split("..")
    if len(parts) != 2:
        raise ValueError(f"levels must look like 3..8, got {text!r}")
    a, b = int(parts[0]), int(parts[1])
    if not (0 <= a < b):
        raise ValueError(f"levels must satisfy 0 <= A < B, got {text!r}")
    return a, b


def load_config_file(path: str) -> dict:
    """Flat ``key=value`` configuration; '#' starts a comment line."""
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()
    return values


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig(preset=args.preset or "paper-sec6")
    file_values = load_config_file(args.config) if args.config else {}
    for key, val in file_values.items():
        if key == "preset":
            cfg.preset = val
        elif key in ("nu", "alpha", "beta", "tol_kkt", "tol_newton",
                     "tol_linear"):
            setattr(cfg, key, float(val))   # float("inf") handles beta=inf
        elif key == "level":
            cfg.level = int(val)
        elif key == "levels":
            cfg.j_min, cfg.j_max = parse_levels(val)
        elif key == "out":
            cfg.out = val
        elif key == "emit_fields":
            cfg.emit_fields = val.lower() in ("1", "true", "yes")
        else:
            raise ValueError(f"unknown config key {key!r}")
    if args.preset:
        cfg.preset = args.preset
    for key in ("nu", "alpha", "beta"):
        flag = getattr(args, key, None)
        if flag is not None:
            setattr(cfg, key, flag)
    if getattr(args, "level", None) is not None:
        cfg.level = args.level
    if getattr(args, "levels", None):
        cfg.j_min, cfg.j_max = parse_levels(args.levels)
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "emit_fields", False):
        cfg.emit_fields = True
    return cfg


def _sci(value) -> str:
    return "" if value is None else f"{value:.6e}"


def format_csv_rows(records: List[study.StudyRecord]) -> List[str]:
    rows = [CSV_HEADER]
    for r in records:
        rows.append(",".join([
            str(r.level), _sci(r.h),
            _sci(r.e_u), _sci(r.eoc_u),
            _sci(r.e_y), _sci(r.eoc_y),
            _sci(r.e_phi), _sci(r.eoc_phi),
            _sci(r.e_upost), _sci(r.eoc_upost),
            _sci(r.measure_t1), _sci(r.kkt_residual),
            str(r.outer_iterations),
        ]))
    return rows


def _write_lines(lines: List[str], out: Optional[str]) -> None:
    text = "\n".join(lines) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", newline="\n") as handle:
            handle.write(text)


def cmd_solve(cfg: RunConfig) -> int:
    spec = cfg.build_spec()
    mesh = build_unit_square_mesh(cfg.level)
    try:
        spec.validate(mesh)
        solution = optimizer.solve_ocp(spec, mesh, tol=cfg.tol_kkt,
                                       newton_tol=cfg.tol_newton,
                                       linear_tol=cfg.tol_linear)
    except (AdmissibilityError, NonconvergenceError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    summary = [
        f"preset={spec.name or cfg.preset}",
        f"level={cfg.level}",
        f"vertices={mesh.num_vertices}",
        f"triangles={mesh.num_triangles}",
        f"cost={solution.cost!r}",
        f"kkt_residual={solution.kkt_residual!r}",
        f"outer_iterations={solution.outer_iterations}",
        f"converged={solution.converged}",
        f"state_newton_iterations={solution.state_report.iterations}",
        f"state_residual={solution.state_report.residual!r}",
    ]
    if cfg.out:
        out_dir = Path(cfg.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_lines(summary, str(out_dir / "summary.txt"))
        if cfg.emit_fields:
            with open(out_dir / "mesh.txt", "w", newline="\n") as handle:
                mesh.write_text(handle)
            for name, field in (("control", solution.control),
                                ("state", solution.state),
                                ("adjoint", solution.adjoint)):
                with open(out_dir / f"{name}.txt", "w",
                          newline="\n") as handle:
                    field.write_text(handle)
    for line in summary:
        print(line)
    return 0


def cmd_study(cfg: RunConfig) -> int:
    spec = cfg.build_spec()
    try:
        spec.validate(build_unit_square_mesh(min(cfg.j_min, 3)))
    except AdmissibilityError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1

    def progress(level, sol):
        print(f"level {level}: kkt={sol.kkt_residual:.3e} "
              f"iters={sol.outer_iterations}", file=sys.stderr)

    try:
        records = study.run_study(spec, cfg.j_min, cfg.j_max,
                                  tol=cfg.tol_kkt,
                                  newton_tol=cfg.tol_newton,
                                  linear_tol=cfg.tol_linear,
                                  progress=progress)
    except NonconvergenceError as err:
        partial = err.report or []
        _write_lines(format_csv_rows(partial), cfg.out)
        print(f"error: {err}", file=sys.stderr)
        return 1
    _write_lines(format_csv_rows(records), cfg.out)
    return 0


def _reference_triangle_mesh() -> Mesh:
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    triangles = np.array([[0, 1, 2]])
    boundary = np.array([[0, 1, 0, 0], [1, 2, 0, 0], [2, 0, 0, 0]])
    return Mesh(vertices, triangles, boundary, level=0)


def _factorial(k: int) -> int:
    return math.factorial(k)


def _check_quadrature() -> str:
    rule = fem.TRIANGLE_RULE
    xy = rule.points[:, 1:3]                          # reference coordinates
    worst = 0.0
    for a in range(rule.degree + 1):
        for b in range(rule.degree + 1 - a):
            approx = 0.5 * float(rule.weights @ (xy[:, 0] ** a *
                                                 xy[:, 1] ** b))
            exact = _factorial(a) * _factorial(b) / _factorial(a + b + 2)
            worst = max(worst, abs(approx - exact) / exact)
    for k in range(fem.EDGE_RULE_DEGREE + 1):
        approx = float(fem.EDGE_RULE_WEIGHTS @ fem.EDGE_RULE_POINTS ** k)
        worst = max(worst, abs(approx - 1.0 / (k + 1)) * (k + 1))
    if worst > 5e-14:
        raise OcfemError(f"quadrature exactness violated: {worst:.3e}")
    return f"max relative defect {worst:.2e}"


def _check_stiffness_reference() -> str:
    mesh = _reference_triangle_mesh()
    matrix = fem.assemble_stiffness(mesh).to_dense()
    exact = np.array([[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]])
    gap = float(np.max(np.abs(matrix - exact)))
    if gap > 1e-14:
        raise OcfemError(f"reference stiffness defect {gap:.3e}")
    return f"entrywise defect {gap:.2e}"


def _check_projection(level: int) -> str:
    mesh = build_unit_square_mesh(min(level, 5))

    def source(x):
        return x[..., 0] ** 2 + 0.5 * x[..., 0] * x[..., 1]

    projected = fem.l2_project_p0(mesh, source)
    vals = fem._as_quad_values(mesh, source, fem.TRIANGLE_RULE)
    defect = vals - projected.values[:, None]
    per_t = mesh.areas * (defect @ fem.TRIANGLE_RULE.weights)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(3):
        v = rng.standard_normal(mesh.num_triangles)
        worst = max(worst, abs(float(per_t @ v)) / np.linalg.norm(v))
    if worst > 1e-12:
        raise OcfemError(f"projection orthogonality defect {worst:.3e}")
    return f"orthogonality defect {worst:.2e}"


def _check_manufactured(level: int) -> str:
    spec = presets.get_preset("manufactured-constant")
    mesh = build_unit_square_mesh(level)
    u = P0Field.zeros(mesh)
    state, report = pde.solve_state(spec, mesh, u, tol=1e-13)
    err = fem.linf_diff_p1(state, P1Field(mesh, np.ones(mesh.num_vertices)))
    if report.residual > 1e-12 or err > 1e-12:
        raise OcfemError(
            f"residual {report.residual:.3e}, field error {err:.3e}")
    return f"residual {report.residual:.2e}, field error {err:.2e}"


def _battery_fields(spec, mesh):
    def profile(x):
        return 0.3 + 0.2 * np.sin(2.0 * np.pi * x[..., 0]) * \
            np.cos(np.pi * x[..., 1])

    def dir1(x):
        return np.cos(np.pi * x[..., 0]) * np.cos(np.pi * x[..., 1])

    def dir2(x):
        return x[..., 0] - x[..., 1] + 0.25

    u = fem.l2_project_p0(mesh, profile)
    u = P0Field(mesh, optimizer.Bounds(spec.alpha, spec.beta).clamp(u.values))
    return u, fem.l2_project_p0(mesh, dir1), fem.l2_project_p0(mesh, dir2)


def _check_gradient_fd(spec, level: int) -> str:
    mesh = build_unit_square_mesh(level)
    u, v, _ = _battery_fields(spec, mesh)
    state, _ = pde.solve_state(spec, mesh, u)
    adjoint = pde.solve_adjoint(spec, mesh, u, state)
    grad = optimizer.gradient_field(spec, mesh, u, state=state,
                                    adjoint=adjoint)
    derivative = float(np.sum(mesh.areas * grad.values * v.values))
    t = 1e-4
    plus = optimizer.cost(spec, mesh, P0Field(mesh, u.values + t * v.values),
                          init=state)
    minus = optimizer.cost(spec, mesh, P0Field(mesh, u.values - t * v.values),
                           init=state)
    fd = (plus - minus) / (2.0 * t)
    rel = abs(derivative - fd) / (1.0 + abs(derivative))
    if rel > 1e-5:
        raise OcfemError(f"gradient vs FD relative error {rel:.3e}")
    return f"relative error {rel:.2e} at t={t:g}"


def _check_hessian_symmetry(spec, level: int) -> str:
    mesh = build_unit_square_mesh(level)
    u, v1, v2 = _battery_fields(spec, mesh)
    problem = optimizer._LinearizedProblem(spec, mesh, u)
    h12 = optimizer.hessian_bilinear(spec, mesh, u, v1, v2, problem=problem)
    h21 = optimizer.hessian_bilinear(spec, mesh, u, v2, v1, problem=problem)
    gap = abs(h12 - h21) / (1.0 + abs(h12))
    if gap > 1e-10:
        raise OcfemError(f"Hessian symmetry defect {gap:.3e}")
    return f"symmetry defect {gap:.2e}"


def _check_z_eta(spec, level: int) -> str:
    mesh = build_unit_square_mesh(level)
    u, v1, v2 = _battery_fields(spec, mesh)
    problem = optimizer._LinearizedProblem(spec, mesh, u)
    hz = optimizer.hessian_bilinear(spec, mesh, u, v1, v2, form="z",
                                    problem=problem)
    he = optimizer.hessian_bilinear(spec, mesh, u, v1, v2, form="eta",
                                    problem=problem)
    gap = abs(hz - he) / (1.0 + abs(hz))
    if gap > 1e-8:
        raise OcfemError(f"z-form vs eta-form gap {gap:.3e}")
    return f"agreement gap {gap:.2e}"


def cmd_check(cfg: RunConfig) -> int:
    spec = cfg.build_spec()
    mesh = build_unit_square_mesh(min(cfg.level, 6))
    results = []
    admissible = True
    try:
        spec.validate(mesh)
        results.append(("admissibility", "PASS", "data admissible"))
    except AdmissibilityError as err:
        admissible = False
        results.append(("admissibility", "FAIL", str(err)))

    independent = [
        ("quadrature-exactness", _check_quadrature),
        ("stiffness-reference", _check_stiffness_reference),
        ("projection-orthogonality", lambda: _check_projection(cfg.level)),
        ("manufactured-constant", lambda: _check_manufactured(cfg.level)),
    ]
    dependent = [
        ("gradient-fd", lambda: _check_gradient_fd(spec, cfg.level)),
        ("hessian-symmetry", lambda: _check_hessian_symmetry(spec, cfg.level)),
        ("z-eta-agreement", lambda: _check_z_eta(spec, cfg.level)),
    ]
    for name, fn in independent:
        try:
            results.append((name, "PASS", fn()))
        except Exception as err:  # report, do not crash the battery
            results.append((name, "FAIL", str(err)))
    for name, fn in dependent:
        if not admissible:
            results.append((name, "SKIP", "requires admissible data"))
            continue
        try:
            results.append((name, "PASS", fn()))
        except Exception as err:
            results.append((name, "FAIL", str(err)))

    failed = any(status == "FAIL" for _, status, _ in results)
    for name, status, detail in results:
        print(f"{status} {name}: {detail}")
    return 1 if failed else 0


def _apply_thread_cap() -> None:
    cap = os.environ.get("OCFEM_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ocfem",
        description="Finite element solver for bilinear optimal control "
                    "of semilinear elliptic equations")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--preset", default=None,
                       help=f"problem preset ({', '.join(presets.PRESET_NAMES)})")
        p.add_argument("--config", default=None,
                       help="key=value configuration file")
        p.add_argument("--nu", type=float, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--beta", type=float, default=None)

    p_solve = sub.add_parser("solve", help="solve one level")
    common(p_solve)
    p_solve.add_argument("--level", type=int, default=None)
    p_solve.add_argument("--out", default=None, help="output directory")
    p_solve.add_argument("--emit-fields", dest="emit_fields",
                         action="store_true")

    p_study = sub.add_parser("study", help="convergence study over levels")
    common(p_study)
    p_study.add_argument("--levels", default=None, help="range A..B")
    p_study.add_argument("--out", default=None, help="CSV output file")

    p_check = sub.add_parser("check", help="verification battery")
    common(p_check)
    p_check.add_argument("--level", type=int, default=None)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _config_from_args(args)
    except (ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    try:
        cfg.build_spec()
    except KeyError as err:
        print(f"error: {err.args[0]}", file=sys.stderr)
        return 2
    if args.command == "solve":
        return cmd_solve(cfg)
    if args.command == "study":
        return cmd_study(cfg)
    if args.command == "check":
        return cmd_check(cfg)
    return 2


if __name__ == "__main__":
    sys.exit(main())
