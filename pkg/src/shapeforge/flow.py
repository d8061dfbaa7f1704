"""Stationary incompressible flow on the transformed domain: inflow profile,
Newton solve of the pulled-back Taylor-Hood system, and flux diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import quadrature
from .fem import TAYLOR_HOOD, FemContext, build_dofmap, velocity_dirichlet
from .forms import flow_jacobian, flow_residual
from .mesh import INFLOW, OBSTACLE, WALL
from .solvers import LUFactorization, SolverError, bicgstab


class NonlinearSolveError(SolverError):
    def __init__(self, message, residual_norms=None):
        super().__init__(message)
        self.residual_norms = residual_norms or []


class InvalidTransformError(ValueError):
    """The displacement inverts at least one element."""


@dataclass(frozen=True)
class InflowSpec:
    """Tunnel inflow: a capped cosine profile across the tunnel diameter,
    aligned with the x-axis."""

    diameter: float = 6.0
    scale: float = 1.0
    center_y: float = 0.0

    def profile(self, y):
        dy = np.abs(np.asarray(y, dtype=float) - self.center_y)
        vals = self.scale * np.cos(np.pi * dy / self.diameter)
        # outside the tunnel diameter the profile is identically zero; the
        # bare cosine would turn positive again one period out
        return np.where(dy <= 0.5 * self.diameter, np.maximum(vals, 0.0), 0.0)

    def velocity(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros_like(pts)
        out[:, 0] = self.profile(pts[:, 1])
        return out

    def profile_integral(self, y0, y1):
        """Closed-form integral of the profile over [y0, y1]."""
        half = 0.5 * self.diameter
        a = max(y0, self.center_y - half)
        b = min(y1, self.center_y + half)
        if b <= a:
            return 0.0
        k = np.pi / self.diameter
        return self.scale / k * (
            np.sin(k * (b - self.center_y)) - np.sin(k * (a - self.center_y))
        )

    def flux_on_marker(self, ctx, marker=INFLOW, order=8):
        """Quadrature flux of the profile through a marker boundary with the
        outward domain normal, using a high-order per-edge Gauss rule."""
        bnd = ctx.boundary(marker)
        t, wg = quadrature.edge_rule(order)
        a = ctx.mesh.vertices[bnd["ends"][:, 0]]
        b = ctx.mesh.vertices[bnd["ends"][:, 1]]
        pts = a[:, None, :] * (1 - t)[None, :, None] + b[:, None, :] * t[None, :, None]
        v = self.velocity(pts.reshape(-1, 2)).reshape(pts.shape)
        outward = -bnd["normal_in"]
        dots = np.einsum("egi,ei->eg", v, outward)
        return float(np.einsum("eg,g,e->", dots, wg, bnd["length"]))


@dataclass
class NewtonResult:
    x: np.ndarray
    converged: bool
    iterations: int
    residual_norms: list
    linear_iterations: int = 0


def newton_loop(x0, residual, solve_linearized, abs_tol=1e-14, rel_tol=1e-8,
                max_iter=50, damping=False, max_backtracks=8, stall_tol=0.0):
    """Newton iteration with optional Armijo backtracking on the residual
    norm (halving factor). solve_linearized(x, r) must return (delta,
    linear_iterations) with J(x) delta = -r.

    stall_tol accepts an iterate whose residual no longer improves but is
    already below that bound. Warm starts over inexact linear solves need
    this: the update accuracy is capped by the linear solver floor, which
    can sit above abs_tol."""
    x = np.array(x0, dtype=float)
    r = residual(x)
    norms = [float(np.linalg.norm(r))]
    target = max(abs_tol, rel_tol * norms[0])
    lin_total = 0
    if norms[0] <= target:
        return NewtonResult(x, True, 0, norms, 0)
    for it in range(1, max_iter + 1):
        delta, lin_its = solve_linearized(x, r)
        lin_total += lin_its
        step = 1.0
        x_new = x + delta
        r_new = residual(x_new)
        n_new = float(np.linalg.norm(r_new))
        if damping:
            backtracks = 0
            while (not np.isfinite(n_new) or n_new > (1.0 - 1e-4 * step) * norms[-1]) \
                    and backtracks < max_backtracks:
                step *= 0.5
                backtracks += 1
                x_new = x + step * delta
                r_new = residual(x_new)
                n_new = float(np.linalg.norm(r_new))
        if n_new >= 0.5 * norms[-1] and norms[-1] <= stall_tol:
            # the update brings nothing; the previous iterate is converged
            # to the accuracy the linear solves can deliver
            return NewtonResult(x, True, it - 1, norms, lin_total)
        x, r = x_new, r_new
        norms.append(n_new)
        if not np.isfinite(n_new):
            raise NonlinearSolveError("Newton residual is not finite", norms)
        if n_new <= target:
            return NewtonResult(x, True, it, norms, lin_total)
    raise NonlinearSolveError(
        f"Newton did not converge in {max_iter} iterations "
        f"(last residual {norms[-1]:.3e})", norms)


@dataclass
class SolverConfig:
    """Tolerances and solver choices shared by the flow and extension solves."""

    newton_abs_tol: float = 1e-14
    newton_rel_tol: float = 1e-8
    newton_max_iter: int = 50
    damping: bool = False
    linear_rel_tol: float = 1e-3
    linear_abs_tol: float = 1e-12
    adjoint_abs_tol: float = 1e-12  # 1e-16 target capped at 1e-12
    linear_max_iter: int = 500
    direct_threshold: int = 50000
    smoother_flow: str = "ilu0"
    smoother_extension: str = "jacobi"
    jacobi_omega: float = 0.66
    pre_smooth: int = 3
    post_smooth: int = 3


@dataclass
class FlowSolution:
    """Converged mixed coefficients plus the data adjoint solves need."""

    x: np.ndarray
    dofmap: object
    dirichlet_dofs: np.ndarray
    dirichlet_values: np.ndarray
    free_dofs: np.ndarray
    newton: NewtonResult
    convection: bool = True

    @property
    def velocity_nodal(self):
        n2 = self.dofmap.num_p2_nodes
        return self.x[: 2 * n2].reshape(n2, 2)

    @property
    def pressure(self):
        return self.x[2 * self.dofmap.num_p2_nodes:]


def _zero_values(points):
    return np.zeros((np.atleast_2d(points).shape[0], 2))


def flow_dirichlet(ctx, dofmap, inflow):
    return velocity_dirichlet(ctx, dofmap, {
        INFLOW: inflow.velocity,
        WALL: _zero_values,
        OBSTACLE: _zero_values,
    })


def solve_state(ctx, transform, inflow, nu, config=None, initial_guess=None,
                convection=True, body_force=None, mg_builder=None):
    """Newton solve of the pulled-back flow system on the reference mesh.

    mg_builder, when given, is a callable (x, transform) -> preconditioner
    for the linearized free-dof system; otherwise systems below
    config.direct_threshold unknowns (and all others without a builder) are
    solved by sparse LU.
    """
    config = config or SolverConfig()
    if transform.min_det <= 0.0:
        raise InvalidTransformError(
            f"transform inverts elements (min det {transform.min_det:.3e})")
    dofmap = build_dofmap(ctx.mesh, TAYLOR_HOOD)
    bc_dofs, bc_vals = flow_dirichlet(ctx, dofmap, inflow)
    free = np.setdiff1d(np.arange(dofmap.num_dofs), bc_dofs)

    x0 = np.zeros(dofmap.num_dofs) if initial_guess is None \
        else np.array(initial_guess, dtype=float)
    x0[bc_dofs] = bc_vals

    def embed(xf):
        x = np.zeros(dofmap.num_dofs)
        x[bc_dofs] = bc_vals
        x[free] = xf
        return x

    def residual_free(xf):
        x = embed(xf)
        return flow_residual(ctx, x, transform, nu, convection, body_force)[free]

    def solve_linearized(xf, r):
        x = embed(xf)
        jac = flow_jacobian(ctx, x, transform, nu, convection)
        jff = jac.tocsr()[free][:, free]
        if mg_builder is not None and len(free) >= config.direct_threshold:
            pre = mg_builder(x, transform)
            res = bicgstab(jff, -r, preconditioner=pre,
                           rel_tol=config.linear_rel_tol,
                           abs_tol=config.linear_abs_tol,
                           max_iter=config.linear_max_iter)
            return res.x, res.iterations
        return LUFactorization(jff).solve(-r), 1

    newton = newton_loop(
        x0[free],
        residual_free,
        solve_linearized,
        abs_tol=config.newton_abs_tol,
        rel_tol=config.newton_rel_tol,
        max_iter=config.newton_max_iter,
        damping=config.damping,
        stall_tol=max(config.newton_abs_tol, 10.0 * config.linear_abs_tol),
    )
    x = embed(newton.x)
    return FlowSolution(x, dofmap, bc_dofs, bc_vals, free, newton, convection)


def boundary_velocity_flux(ctx, flow, marker):
    """Flux of the discrete P2 velocity through a marker boundary with the
    outward domain normal (edge trace uses the two endpoint and the midpoint
    dofs)."""
    bnd = ctx.boundary(marker)
    if bnd["ends"].shape[0] == 0:
        return 0.0
    vn = flow.velocity_nodal
    va = vn[bnd["ends"][:, 0]]
    vb = vn[bnd["ends"][:, 1]]
    vm = vn[bnd["p2_node"]]
    t = quadrature.EDGE_POINTS
    wg = quadrature.EDGE_WEIGHTS
    sh_a = (1.0 - t) * (1.0 - 2.0 * t)
    sh_b = t * (2.0 * t - 1.0)
    sh_m = 4.0 * t * (1.0 - t)
    v = (va[:, None, :] * sh_a[None, :, None]
         + vb[:, None, :] * sh_b[None, :, None]
         + vm[:, None, :] * sh_m[None, :, None])
    outward = -bnd["normal_in"]
    dots = np.einsum("egi,ei->eg", v, outward)
    return float(np.einsum("eg,g,e->", dots, wg, bnd["length"]))
