"""Displacement extension: a nonlinear elliptic operator that carries a
scalar control on the obstacle boundary into a domain displacement, with a
nodal coefficient field steering the convective term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import P1V, FemContext, build_dofmap, velocity_dirichlet
from .flow import NewtonResult, SolverConfig, newton_loop
from .forms import (
    extension_jacobian,
    extension_residual,
    extension_stiffness,
)
from .mesh import INFLOW, OUTFLOW, WALL
from .solvers import LUFactorization, bicgstab


@dataclass
class ControlState:
    """Optimization variables: boundary control u (P1 trace coefficients,
    zero off the obstacle) and the convection coefficient field eta."""

    u: np.ndarray
    eta: np.ndarray

    def copy(self):
        return ControlState(self.u.copy(), self.eta.copy())


def initial_control(ctx, eta_init=0.5):
    nv = ctx.mesh.num_vertices
    return ControlState(np.zeros(nv), np.full(nv, float(eta_init)))


def project_eta(eta, lower, upper):
    return np.clip(eta, lower, upper)


def _zero_values(points):
    return np.zeros((np.atleast_2d(points).shape[0], 2))


def extension_dirichlet(ctx):
    """Constrained displacement dofs: every vertex owned by the inflow,
    outflow, or outer wall boundary is pinned to zero."""
    dofmap = build_dofmap(ctx.mesh, P1V)
    dofs, vals = velocity_dirichlet(ctx, dofmap, {
        INFLOW: _zero_values,
        WALL: _zero_values,
        OUTFLOW: _zero_values,
    })
    return dofmap, dofs, vals


@dataclass
class ExtensionSolution:
    w: np.ndarray
    free_dofs: np.ndarray
    newton: NewtonResult


def solve_extension(ctx, u, eta, config=None, stiffness=None,
                    initial_guess=None, mg_builder=None):
    """Newton solve of the extension system for the displacement w.

    With eta identically zero the system is linear and converges in one
    iteration. mg_builder, when given, is a callable w -> preconditioner for
    the linearized free-dof system; otherwise sparse LU below
    config.direct_threshold unknowns (and everywhere without a builder).
    """
    config = config or SolverConfig()
    if stiffness is None:
        stiffness = extension_stiffness(ctx)
    dofmap, bc_dofs, _ = extension_dirichlet(ctx)
    free = np.setdiff1d(np.arange(dofmap.num_dofs), bc_dofs)

    if initial_guess is None:
        w0 = np.zeros(ctx.mesh.num_vertices * 2)
    else:
        w0 = np.asarray(initial_guess, dtype=float).reshape(-1).copy()
    w0[bc_dofs] = 0.0

    def embed(wf):
        w = np.zeros(dofmap.num_dofs)
        w[free] = wf
        return w

    def residual_free(wf):
        w = embed(wf).reshape(-1, 2)
        return extension_residual(ctx, stiffness, w, eta, u)[free]

    def solve_linearized(wf, r):
        w = embed(wf).reshape(-1, 2)
        jac = extension_jacobian(ctx, stiffness, w, eta)
        jff = jac.tocsr()[free][:, free]
        if mg_builder is not None and len(free) >= config.direct_threshold:
            pre = mg_builder(embed(wf))
            res = bicgstab(jff, -r, preconditioner=pre,
                           rel_tol=config.linear_rel_tol,
                           abs_tol=config.linear_abs_tol,
                           max_iter=config.linear_max_iter)
            return res.x, res.iterations
        return LUFactorization(jff).solve(-r), 1

    newton = newton_loop(
        w0[free],
        residual_free,
        solve_linearized,
        abs_tol=config.newton_abs_tol,
        rel_tol=config.newton_rel_tol,
        max_iter=config.newton_max_iter,
        damping=config.damping,
        stall_tol=max(config.newton_abs_tol, 10.0 * config.linear_abs_tol),
    )
    return ExtensionSolution(embed(newton.x), free, newton)
