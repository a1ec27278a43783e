"""Built-in problem definitions for the CLI and the test batteries.

Presets are compiled in: configuration files may override scalar data
(nu, bounds, tolerances) but not the coefficient functions.
"""
from __future__ import annotations

import numpy as np

from .pde import ProblemSpec


def _flagship() -> ProblemSpec:
    """Bilinear control of a monotone quartic reaction on the unit square.

    State equation: -Laplace(y) + y^3|y| + 2y - 100 sin(2 pi x1) sin(pi x2)
    + u y = 0 with homogeneous Neumann data; tracking target
    y_d = -64 x1 (1-x1) x2 (1-x2); nu = 0.05; bounds [-1, 1].
    """
    def nonlinearity(x, y):
        return y ** 3 * np.abs(y) + 2.0 * y - \
            100.0 * np.sin(2.0 * np.pi * x[..., 0]) * np.sin(np.pi * x[..., 1])

    def nonlinearity_dy(x, y):
        return 4.0 * np.abs(y) ** 3 + 2.0

    def nonlinearity_dyy(x, y):
        return 12.0 * y * np.abs(y)

    def target(x):
        return -64.0 * x[..., 0] * (1.0 - x[..., 0]) * \
            x[..., 1] * (1.0 - x[..., 1])

    return ProblemSpec(
        nonlinearity=nonlinearity,
        nonlinearity_dy=nonlinearity_dy,
        nonlinearity_dyy=nonlinearity_dyy,
        reaction_floor=lambda x: np.full(x.shape[:-1], 2.0),
        boundary_flux=lambda x: np.zeros(x.shape[:-1]),
        nu=0.05,
        alpha=-1.0,
        beta=1.0,
        objective=lambda x, y: 0.5 * (y - target(x)) ** 2,
        objective_dy=lambda x, y: y - target(x),
        objective_dyy=lambda x, y: np.ones(np.broadcast(x[..., 0], y).shape),
        name="paper-sec6",
    )


def _tikhonov_only() -> ProblemSpec:
    """Flagship state equation with a vanishing tracking term.

    The unique optimal control is zero (pure Tikhonov cost).
    """
    spec = _flagship()
    return spec.with_overrides(objective=None, objective_dy=None,
                               objective_dyy=None, name="tikhonov-only")


def _manufactured_constant() -> ProblemSpec:
    """Linear reaction with constant exact solution y = 1 at u = 0.

    -Laplace(y) + (y - 1) = 0 with zero Neumann data; the constant one is
    an exact member of the discrete space, so every level solves it to
    round-off.  The tracking target is the same constant, which makes the
    zero control optimal with a vanishing adjoint.
    """
    return ProblemSpec(
        nonlinearity=lambda x, y: y - 1.0,
        nonlinearity_dy=lambda x, y: np.ones(np.broadcast(x[..., 0], y).shape),
        nonlinearity_dyy=lambda x, y: np.zeros(np.broadcast(x[..., 0], y).shape),
        reaction_floor=lambda x: np.ones(x.shape[:-1]),
        boundary_flux=lambda x: np.zeros(x.shape[:-1]),
        nu=0.05,
        alpha=-0.5,
        beta=0.5,
        objective=lambda x, y: 0.5 * (y - 1.0) ** 2,
        objective_dy=lambda x, y: y - 1.0,
        objective_dyy=lambda x, y: np.ones(np.broadcast(x[..., 0], y).shape),
        name="manufactured-constant",
    )


_BUILDERS = {
    "paper-sec6": _flagship,
    "tikhonov-only": _tikhonov_only,
    "manufactured-constant": _manufactured_constant,
}

PRESET_NAMES = tuple(sorted(_BUILDERS))


def get_preset(name: str) -> ProblemSpec:
    """Named problem definition; raises KeyError for unknown names."""
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; "
                       f"available: {', '.join(PRESET_NAMES)}") from None
