"""Adjoint solves and reduced gradients for the two controls: the boundary
control on the obstacle and the extension coefficient field.

The forward chain is control -> displacement -> transformed flow ->
augmented objective. Gradients come from one adjoint flow solve (transposed
flow Jacobian), one adjoint displacement solve (transposed extension
Jacobian), and two mass-matrix inversions that turn duals into nodal
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .extension import solve_extension
from .fem import (
    boundary_mass_matrix,
    compute_transform,
    mass_matrix_p1,
)
from .flow import InvalidTransformError, SolverConfig, solve_state
from .forms import (
    ALL_GROUPS,
    GROUP_AUGMENTATION,
    GROUP_EXTENSION,
    GROUP_MULTIPLIER,
    GROUP_OBJECTIVE,
    GROUP_PENALTY,
    LagrangianState,
    det_penalty,
    dissipation,
    dissipation_velocity_derivative,
    eta_derivative_load,
    extension_jacobian,
    extension_stiffness,
    flow_jacobian,
    geometric_moments,
    lagrangian_w_derivative,
    obstacle_normal_load,
    quadratic_form,
)
from .mesh import OBSTACLE, boundary_vertices
from .solvers import LUFactorization, bicgstab


@dataclass
class ObjectiveBreakdown:
    """Value of the augmented objective and its additive parts."""

    j_aug: float
    j: float
    control_term: float
    coefficient_term: float
    penalty: float
    multiplier_term: float
    augmentation_term: float
    g: np.ndarray
    g_def: np.ndarray


def objective_breakdown(ctx, params, x, ts, u, eta, lam_g, tau, g_ref,
                        mass_obstacle=None, mass_domain=None):
    mg = mass_obstacle if mass_obstacle is not None \
        else boundary_mass_matrix(ctx, OBSTACLE)
    m = mass_domain if mass_domain is not None else mass_matrix_p1(ctx)
    j = dissipation(ctx, x, ts, params.nu)
    cu = 0.5 * params.alpha * quadratic_form(mg, u)
    de = eta - params.eta_mid
    ce = 0.5 * params.theta * quadratic_form(m, de)
    pen = det_penalty(ctx, ts, params.beta, params.det_floor)
    g = geometric_moments(ctx, ts)
    g_def = g - np.asarray(g_ref, dtype=float)
    mult = float(np.asarray(lam_g, dtype=float) @ g_def)
    aug = float(tau) * float(g_def @ g_def)
    total = j + cu + ce + pen + mult + aug
    return ObjectiveBreakdown(total, j, cu, ce, pen, mult, aug, g, g_def)


def evaluate_forward(ctx, params, inflow, u, eta, config=None, stiffness=None,
                     warm_w=None, warm_x=None, ext_mg=None, flow_mg=None):
    """Solve the extension then the flow at a given control pair. Raises
    InvalidTransformError when the resulting displacement inverts elements."""
    config = config or SolverConfig()
    ext = solve_extension(ctx, u, eta, config, stiffness=stiffness,
                          initial_guess=warm_w, mg_builder=ext_mg)
    ts = compute_transform(ctx, ext.w.reshape(-1, 2))
    if ts.min_det <= 0.0:
        raise InvalidTransformError(
            f"extension inverts elements (min det {ts.min_det:.3e})")
    flow = solve_state(ctx, ts, inflow, params.nu, config,
                       initial_guess=warm_x, mg_builder=flow_mg)
    return ext, flow, ts


def solve_adjoint_flow(ctx, flow, ts, nu, config=None, stack=None, w=None):
    """Transposed-Jacobian solve for the flow adjoint. The right-hand side
    is minus the velocity derivative of the dissipation functional."""
    config = config or SolverConfig()
    jac = flow_jacobian(ctx, flow.x, ts, nu, flow.convection).tocsr()
    rhs = -dissipation_velocity_derivative(ctx, flow.x, ts, nu)
    free = flow.free_dofs
    jff = jac[free][:, free]
    lam = np.zeros(flow.x.shape[0])
    if stack is not None and len(free) >= config.direct_threshold:
        pre = stack.flow_preconditioner(flow.x, w, nu, config,
                                        transpose=True)
        res = bicgstab(jff.T.tocsr(), rhs[free], preconditioner=pre,
                       rel_tol=0.0, abs_tol=config.adjoint_abs_tol,
                       max_iter=config.linear_max_iter)
        lam[free] = res.x
    else:
        lam[free] = LUFactorization(jff).solve(rhs[free], transpose=True)
    return lam


def displacement_rhs(ctx, params, state, stiffness=None):
    """Right-hand side of the adjoint displacement system: minus the
    displacement derivative of every Lagrangian term except the extension
    constraint itself."""
    groups = set(ALL_GROUPS) - {GROUP_EXTENSION}
    return -lagrangian_w_derivative(ctx, params, state, groups,
                                    stiffness=stiffness)


def solve_adjoint_displacement(ctx, w, eta, rhs, config=None, stiffness=None,
                               free=None, stack=None):
    """Transposed extension-Jacobian solve; the adjoint displacement is zero
    on the constrained outer boundary."""
    config = config or SolverConfig()
    if stiffness is None:
        stiffness = extension_stiffness(ctx)
    if free is None:
        from .extension import extension_dirichlet
        dofmap, bc_dofs, _ = extension_dirichlet(ctx)
        free = np.setdiff1d(np.arange(dofmap.num_dofs), bc_dofs)
    kext = extension_jacobian(ctx, stiffness, np.asarray(w).reshape(-1, 2), eta)
    kff = kext.tocsr()[free][:, free]
    lam = np.zeros(2 * ctx.mesh.num_vertices)
    if stack is not None and len(free) >= config.direct_threshold:
        pre = stack.extension_preconditioner(
            np.asarray(w).reshape(-1), eta, config, transpose=True)
        res = bicgstab(kff.T.tocsr(), rhs[free], preconditioner=pre,
                       rel_tol=0.0, abs_tol=config.adjoint_abs_tol,
                       max_iter=config.linear_max_iter)
        lam[free] = res.x
    else:
        lam[free] = LUFactorization(kff).solve(rhs[free], transpose=True)
    return lam


def reduced_gradient(ctx, params, u, eta, w, lam_w, mass_obstacle=None,
                     mass_domain=None):
    """Nodal gradients for both controls plus the raw duals.

    The duals are the Euclidean partial derivatives of the Lagrangian with
    respect to the control coefficients; the gradients are their Riesz
    representatives under the obstacle-trace and domain mass matrices.
    """
    mg = mass_obstacle if mass_obstacle is not None \
        else boundary_mass_matrix(ctx, OBSTACLE)
    m = mass_domain if mass_domain is not None else mass_matrix_p1(ctx)
    trace = boundary_vertices(ctx.mesh, OBSTACLE)

    dual_u = params.alpha * (mg @ u) - obstacle_normal_load(ctx, lam_w)
    grad_u = np.zeros_like(u)
    mg_tt = mg.tocsr()[trace][:, trace]
    grad_u[trace] = LUFactorization(mg_tt).solve(dual_u[trace])

    dual_eta = params.theta * (m @ (eta - params.eta_mid)) \
        + eta_derivative_load(ctx, w, lam_w)
    grad_eta = LUFactorization(m.tocsr()).solve(dual_eta)
    return grad_u, grad_eta, dual_u, dual_eta


@dataclass
class GradientBundle:
    """Everything one gradient evaluation produces."""

    w: np.ndarray
    ext: object
    flow: object
    transform: object
    lam_flow: np.ndarray
    lam_w: np.ndarray
    grad_u: np.ndarray
    grad_eta: np.ndarray
    dual_u: np.ndarray
    dual_eta: np.ndarray
    breakdown: ObjectiveBreakdown
    newton_iterations: tuple = (0, 0)

    @property
    def g_def(self):
        return self.breakdown.g_def

    @property
    def min_det(self):
        return self.transform.min_det


class GradientEvaluator:
    """Caches mesh-level objects (stiffness, mass matrices, free dofs) and
    runs the forward-adjoint chain at a control pair."""

    def __init__(self, ctx, params, inflow, config=None, stack=None):
        self.ctx = ctx
        self.params = params
        self.inflow = inflow
        self.config = config or SolverConfig()
        self.stack = stack
        self.stiffness = extension_stiffness(ctx)
        self.mass_obstacle = boundary_mass_matrix(ctx, OBSTACLE)
        self.mass_domain = mass_matrix_p1(ctx)
        from .extension import extension_dirichlet
        _, bc_dofs, _ = extension_dirichlet(ctx)
        self.ext_free = np.setdiff1d(
            np.arange(2 * ctx.mesh.num_vertices), bc_dofs)
        self.g_ref = geometric_moments(ctx, compute_transform(
            ctx, np.zeros((ctx.mesh.num_vertices, 2))))

    def _mg_builders(self):
        if self.stack is None:
            return None, None
        def ext_mg(w):
            return self.stack.extension_preconditioner(w, self._eta_now,
                                                       self.config)
        def flow_mg(x, ts):
            return self.stack.flow_preconditioner(x, self._w_now,
                                                  self.params.nu, self.config)
        return ext_mg, flow_mg

    def forward(self, u, eta, lam_g, tau, warm_w=None, warm_x=None):
        """Forward solves plus the objective breakdown, no adjoints."""
        self._eta_now = eta
        ext_mg, flow_mg = self._mg_builders()
        ext = solve_extension(self.ctx, u, eta, self.config,
                              stiffness=self.stiffness,
                              initial_guess=warm_w, mg_builder=ext_mg)
        self._w_now = ext.w
        ts = compute_transform(self.ctx, ext.w.reshape(-1, 2))
        if ts.min_det <= 0.0:
            raise InvalidTransformError(
                f"extension inverts elements (min det {ts.min_det:.3e})")
        flow = solve_state(self.ctx, ts, self.inflow, self.params.nu,
                           self.config, initial_guess=warm_x,
                           mg_builder=flow_mg)
        bd = objective_breakdown(self.ctx, self.params, flow.x, ts, u, eta,
                                 lam_g, tau, self.g_ref,
                                 self.mass_obstacle, self.mass_domain)
        return ext, flow, ts, bd

    def evaluate(self, u, eta, lam_g, tau, warm_w=None, warm_x=None,
                 forward_state=None):
        """Full chain: forward solves, both adjoints, reduced gradients.

        forward_state, when given, must hold (ext, flow, ts) from a forward
        solve at exactly this (u, eta); the state solves are then skipped
        and only the objective terms, the adjoints, and the gradients are
        recomputed. The optimizer uses this to avoid re-solving a state it
        just vetted during the line search and to re-price an unchanged
        state under updated multiplier values.
        """
        if forward_state is None:
            ext, flow, ts, bd = self.forward(u, eta, lam_g, tau,
                                             warm_w, warm_x)
        else:
            ext, flow, ts = forward_state[:3]
            self._eta_now = eta
            self._w_now = ext.w
            bd = objective_breakdown(self.ctx, self.params, flow.x, ts, u,
                                     eta, lam_g, tau, self.g_ref,
                                     self.mass_obstacle, self.mass_domain)
        lam_flow = solve_adjoint_flow(self.ctx, flow, ts, self.params.nu,
                                      self.config, self.stack, ext.w)
        state = LagrangianState(
            x_flow=flow.x, w=ext.w.reshape(-1, 2), eta=eta, u=u,
            lam_flow=lam_flow, lam_w=np.zeros(2 * self.ctx.mesh.num_vertices),
            lam_g=np.asarray(lam_g, dtype=float), tau=float(tau),
            g_ref=self.g_ref)
        rhs = displacement_rhs(self.ctx, self.params, state, self.stiffness)
        lam_w = solve_adjoint_displacement(
            self.ctx, ext.w, eta, rhs, self.config, self.stiffness,
            self.ext_free, self.stack)
        grad_u, grad_eta, dual_u, dual_eta = reduced_gradient(
            self.ctx, self.params, u, eta, ext.w, lam_w,
            self.mass_obstacle, self.mass_domain)
        return GradientBundle(
            w=ext.w, ext=ext, flow=flow, transform=ts, lam_flow=lam_flow,
            lam_w=lam_w, grad_u=grad_u, grad_eta=grad_eta, dual_u=dual_u,
            dual_eta=dual_eta, breakdown=bd,
            newton_iterations=(ext.newton.iterations, flow.newton.iterations))

    def fd_partial(self, u, eta, lam_g, tau, which, index, h=1e-6):
        """Central finite difference of the augmented objective in one
        control coefficient, with cold starts for determinism."""
        up, um = u.copy(), u.copy()
        ep, em = eta.copy(), eta.copy()
        if which == "u":
            up[index] += h
            um[index] -= h
        elif which == "eta":
            ep[index] += h
            em[index] -= h
        else:
            raise ValueError(f"unknown control {which!r}")
        plus = self.forward(up, ep, lam_g, tau)[3].j_aug
        minus = self.forward(um, em, lam_g, tau)[3].j_aug
        return (plus - minus) / (2.0 * h)
