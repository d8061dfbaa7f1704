"""Variational forms on the fixed reference mesh.

Every integral is pulled back through the transform F = id + w with P1
displacement w, so DF = I + Dw, its inverse A and det(DF) are constant per
element. The flow momentum/continuity residuals carry det(DF) on the
pressure/divergence terms only; the dissipation functional carries it
everywhere. The Lagrangian implemented here pairs the flow and extension
residuals exactly as solved, so its w-derivative (assembled by
`lagrangian_w_derivative`) is finite-difference consistent term by term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import quadrature as quad
from .fem import boundary_mass_matrix, compute_transform, mass_matrix_p1
from .mesh import OBSTACLE

GROUP_OBJECTIVE = "objective"
GROUP_PENALTY = "penalty"
GROUP_MULTIPLIER = "multiplier"
GROUP_AUGMENTATION = "augmentation"
GROUP_FLOW = "flow_constraint"
GROUP_EXTENSION = "extension_constraint"
ALL_GROUPS = (
    GROUP_OBJECTIVE,
    GROUP_PENALTY,
    GROUP_MULTIPLIER,
    GROUP_AUGMENTATION,
    GROUP_FLOW,
    GROUP_EXTENSION,
)


@dataclass(frozen=True)
class ObjectiveParams:
    """Physical and penalty parameters of the objective."""

    nu: float = 0.03
    alpha: float = 1e-2
    beta: float = 100.0
    theta: float = 1e-3
    det_floor: float = 0.001
    eta_lb: float = 0.0
    eta_ub: float = 1.0

    @property
    def eta_mid(self):
        return 0.5 * (self.eta_lb + self.eta_ub)


@dataclass
class LagrangianState:
    """All fields the Lagrangian depends on; none need solve anything."""

    x_flow: np.ndarray
    w: np.ndarray
    eta: np.ndarray
    u: np.ndarray
    lam_flow: np.ndarray
    lam_w: np.ndarray
    lam_g: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tau: float = 0.0
    g_ref: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _mixed_split(ctx, x):
    n2 = ctx.mesh.num_vertices + ctx.mesh.num_edges
    return x[: 2 * n2].reshape(n2, 2), x[2 * n2:]


def _mixed_local_dofs(ctx):
    """(ne, 15) global dofs: 12 velocity (node-major, comp minor) + 3 pressure."""
    _, _, nodes = ctx.p2_tables()
    ne = nodes.shape[0]
    n2 = ctx.mesh.num_vertices + ctx.mesh.num_edges
    vd = (2 * nodes[:, :, None] + np.array([0, 1])[None, None, :]).reshape(ne, 12)
    pd = 2 * n2 + ctx.mesh.triangles
    return np.concatenate([vd, pd], axis=1)


def _scatter_vector(dofs, local, n):
    return np.bincount(dofs.reshape(-1), weights=local.reshape(-1), minlength=n)


def _scatter_matrix(dofs, local, n):
    k = dofs.shape[1]
    rows = np.repeat(dofs, k, axis=1).reshape(-1)
    cols = np.tile(dofs, (1, k)).reshape(-1)
    return sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(n, n)).tocsr()


# ---------------------------------------------------------------------------
# flow (Taylor-Hood velocity/pressure)
# ---------------------------------------------------------------------------

def _flow_fields(ctx, x, ts):
    vals2, grads2, nodes = ctx.p2_tables()
    v, p = _mixed_split(ctx, x)
    vloc = v[nodes]
    vq = np.einsum("eai,aq->eqi", vloc, vals2)
    dv = np.einsum("eai,eaqk->eqik", vloc, grads2)
    dva = np.einsum("eqik,ekl->eqil", dv, ts.inv)
    pq = np.einsum("ea,aq->eq", p[ctx.mesh.triangles], ctx.p1_vals)
    atg = np.einsum("elk,eaql->eaqk", ts.inv, grads2)
    return vals2, nodes, vq, dva, pq, atg


def flow_residual(ctx, x, ts, nu, convection=True, body_force=None):
    """Pulled-back stationary flow residual over all mixed dofs."""
    vals2, nodes, vq, dva, pq, atg = _flow_fields(ctx, x, ts)
    qw = ctx.qweights
    det = ts.det

    rows_v = nu * np.einsum("eqjk,ebqk,eq->ebj", dva, atg, qw)
    if convection:
        dvav = np.einsum("eqjl,eql->eqj", dva, vq)
        rows_v += np.einsum("eqj,bq,eq->ebj", dvav, vals2, qw)
    rows_v -= np.einsum("eq,e,ebqj,eq->ebj", pq, det, atg, qw)
    if body_force is not None:
        f = body_force(ctx.qpoints.reshape(-1, 2)).reshape(ctx.qpoints.shape)
        rows_v -= np.einsum("eqj,bq,eq->ebj", f, vals2, qw)

    tr_dva = np.einsum("eqkk->eq", dva)
    rows_p = -np.einsum("eq,e,cq,eq->ec", tr_dva, det, ctx.p1_vals, qw)

    dofs = _mixed_local_dofs(ctx)
    n2 = ctx.mesh.num_vertices + ctx.mesh.num_edges
    n = 2 * n2 + ctx.mesh.num_vertices
    local = np.concatenate([rows_v.reshape(-1, 12), rows_p], axis=1)
    return _scatter_vector(dofs, local, n)


def flow_jacobian(ctx, x, ts, nu, convection=True):
    """Newton matrix of `flow_residual` at x."""
    vals2, nodes, vq, dva, pq, atg = _flow_fields(ctx, x, ts)
    qw = ctx.qweights
    det = ts.det
    ne = nodes.shape[0]

    kv = np.zeros((ne, 12, 12))
    mvisc = nu * np.einsum("eaqk,ebqk,eq->eba", atg, atg, qw)
    kv[:, 0::2, 0::2] += mvisc
    kv[:, 1::2, 1::2] += mvisc
    if convection:
        c1 = np.einsum("eaqk,eqk,bq,eq->eba", atg, vq, vals2, qw)
        kv[:, 0::2, 0::2] += c1
        kv[:, 1::2, 1::2] += c1
        kv += np.einsum("eqji,aq,bq,eq->ebjai", dva, vals2, vals2, qw).reshape(ne, 12, 12)

    pb = -np.einsum("cq,e,ebqj,eq->ebjc", ctx.p1_vals, det, atg, qw).reshape(ne, 12, 3)
    cb = -np.einsum("cq,e,eaqi,eq->ecai", ctx.p1_vals, det, atg, qw).reshape(ne, 3, 12)

    local = np.zeros((ne, 15, 15))
    local[:, :12, :12] = kv
    local[:, :12, 12:] = pb
    local[:, 12:, :12] = cb

    dofs = _mixed_local_dofs(ctx)
    n = 2 * (ctx.mesh.num_vertices + ctx.mesh.num_edges) + ctx.mesh.num_vertices
    return _scatter_matrix(dofs, local, n)


def dissipation(ctx, x, ts, nu):
    """Energy dissipation of the transported flow field."""
    _, _, _, dva, _, _ = _flow_fields(ctx, x, ts)
    dd = np.einsum("eqik,eqik->eq", dva, dva)
    return float(nu * np.einsum("eq,eq,e->", dd, ctx.qweights, ts.det))


def dissipation_velocity_derivative(ctx, x, ts, nu):
    """d(dissipation)/d(mixed dofs); pressure rows are zero."""
    vals2, nodes, vq, dva, pq, atg = _flow_fields(ctx, x, ts)
    rows_v = 2.0 * nu * np.einsum("eqjk,ebqk,eq,e->ebj", dva, atg, ctx.qweights, ts.det)
    dofs = _mixed_local_dofs(ctx)
    n = 2 * (ctx.mesh.num_vertices + ctx.mesh.num_edges) + ctx.mesh.num_vertices
    local = np.concatenate([rows_v.reshape(-1, 12), np.zeros((nodes.shape[0], 3))], axis=1)
    return _scatter_vector(dofs, local, n)


# ---------------------------------------------------------------------------
# nonlinear extension operator (P1 vector displacement)
# ---------------------------------------------------------------------------

def _p1v_local_dofs(ctx):
    t = ctx.mesh.triangles
    return (2 * t[:, :, None] + np.array([0, 1])[None, None, :]).reshape(-1, 6)


def extension_stiffness(ctx):
    """Bilinear part: integral of (Dw + Dw^T) : D w_hat."""
    g = ctx.p1_grads
    area = 0.5 * ctx.det_j
    gg = np.einsum("eak,ebk,e->eba", g, g, area)
    ne = g.shape[0]
    loc = np.zeros((ne, 6, 6))
    loc[:, 0::2, 0::2] += gg
    loc[:, 1::2, 1::2] += gg
    outer = np.einsum("eaj,ebi,e->ebjai", g, g, area).reshape(ne, 6, 6)
    loc += outer
    return _scatter_matrix(_p1v_local_dofs(ctx), loc, 2 * ctx.mesh.num_vertices)


def _eta_weights(ctx, eta):
    etaq = np.einsum("ea,aq->eq", eta[ctx.mesh.triangles], ctx.p1_vals)
    return etaq * ctx.qweights


def extension_convection_residual(ctx, w, eta):
    """Rows of the nonlinear term eta (Dw w) . w_hat."""
    wloc = np.asarray(w, dtype=float).reshape(-1, 2)[ctx.mesh.triangles]
    dw = np.einsum("eai,eak->eik", wloc, ctx.p1_grads)
    wq = np.einsum("eai,aq->eqi", wloc, ctx.p1_vals)
    dwwq = np.einsum("ejk,eqk->eqj", dw, wq)
    rows = np.einsum("eqj,bq,eq->ebj", dwwq, ctx.p1_vals, _eta_weights(ctx, eta))
    return _scatter_vector(_p1v_local_dofs(ctx), rows.reshape(-1, 6), 2 * ctx.mesh.num_vertices)


def extension_convection_jacobian(ctx, w, eta):
    wloc = np.asarray(w, dtype=float).reshape(-1, 2)[ctx.mesh.triangles]
    dw = np.einsum("eai,eak->eik", wloc, ctx.p1_grads)
    wq = np.einsum("eai,aq->eqi", wloc, ctx.p1_vals)
    wgt = _eta_weights(ctx, eta)
    ne = wloc.shape[0]
    gaw = np.einsum("eak,eqk->eaq", ctx.p1_grads, wq)
    c1 = np.einsum("eaq,bq,eq->eba", gaw, ctx.p1_vals, wgt)
    loc = np.zeros((ne, 6, 6))
    loc[:, 0::2, 0::2] += c1
    loc[:, 1::2, 1::2] += c1
    phiphi = np.einsum("aq,bq,eq->eab", ctx.p1_vals, ctx.p1_vals, wgt)
    loc += np.einsum("eji,eba->ebjai", dw, phiphi).reshape(ne, 6, 6)
    return _scatter_matrix(_p1v_local_dofs(ctx), loc, 2 * ctx.mesh.num_vertices)


def extension_boundary_load(ctx, u):
    """Normal traction integral of the scalar control over the obstacle:
    rows of integral u (n . w_hat) ds with the per-edge reference normal."""
    bnd = ctx.boundary(OBSTACLE)
    ends, normal = bnd["ends"], bnd["normal_in"]
    out = np.zeros(2 * ctx.mesh.num_vertices)
    if ends.shape[0] == 0:
        return out
    t, wg = bnd["qcoord"], quad.EDGE_WEIGHTS
    uq = u[ends[:, 0]][:, None] * (1.0 - t)[None, :] + u[ends[:, 1]][:, None] * t[None, :]
    base = bnd["length"][:, None] * wg[None, :] * uq
    for k, shape in ((0, 1.0 - t), (1, t)):
        coeff = (base * shape[None, :]).sum(axis=1)
        for j in range(2):
            np.add.at(out, 2 * ends[:, k] + j, coeff * normal[:, j])
    return out


def extension_residual(ctx, stiffness, w, eta, u):
    """Full extension residual over all P1 vector dofs."""
    r = stiffness @ w.reshape(-1)
    r += extension_convection_residual(ctx, w, eta)
    r -= extension_boundary_load(ctx, u)
    return r


def extension_jacobian(ctx, stiffness, w, eta):
    return stiffness + extension_convection_jacobian(ctx, w, eta)


# ---------------------------------------------------------------------------
# functionals
# ---------------------------------------------------------------------------

def geometric_moments(ctx, ts):
    """g(w) = (volume defect, barycenter moment): integrals of det(DF) - 1
    and F(x) det(DF) over the reference domain."""
    area = 0.5 * ctx.det_j
    vol = float(np.sum((ts.det - 1.0) * area))
    wq = np.einsum("eai,aq->eqi", ts.displacement[ctx.mesh.triangles], ctx.p1_vals)
    fq = ctx.qpoints + wq
    bc = np.einsum("eqi,eq,e->i", fq, ctx.qweights, ts.det)
    return np.array([vol, bc[0], bc[1]])


def det_penalty(ctx, ts, beta, det_floor):
    """beta/2 * || (det_floor - det DF)^+ ||^2."""
    area = 0.5 * ctx.det_j
    gap = np.maximum(det_floor - ts.det, 0.0)
    return float(0.5 * beta * np.sum(gap * gap * area))


def quadratic_form(matrix, x):
    return float(x @ (matrix @ x))


# ---------------------------------------------------------------------------
# Lagrangian: value and its derivative with respect to the displacement
# ---------------------------------------------------------------------------

def lagrangian_value(ctx, params, state, groups=ALL_GROUPS, stiffness=None):
    """Scalar Lagrangian restricted to the requested term groups."""
    ts = compute_transform(ctx, state.w)
    total = 0.0
    if GROUP_OBJECTIVE in groups:
        total += dissipation(ctx, state.x_flow, ts, params.nu)
        mg = boundary_mass_matrix(ctx, OBSTACLE)
        total += 0.5 * params.alpha * quadratic_form(mg, state.u)
        m = mass_matrix_p1(ctx)
        total += 0.5 * params.theta * quadratic_form(m, state.eta - params.eta_mid)
    if GROUP_PENALTY in groups:
        total += det_penalty(ctx, ts, params.beta, params.det_floor)
    if GROUP_MULTIPLIER in groups or GROUP_AUGMENTATION in groups:
        gdef = geometric_moments(ctx, ts) - state.g_ref
        if GROUP_MULTIPLIER in groups:
            total += float(state.lam_g @ gdef)
        if GROUP_AUGMENTATION in groups:
            total += state.tau * float(gdef @ gdef)
    if GROUP_FLOW in groups:
        r = flow_residual(ctx, state.x_flow, ts, params.nu)
        total += float(r @ state.lam_flow)
    if GROUP_EXTENSION in groups:
        k0 = stiffness if stiffness is not None else extension_stiffness(ctx)
        r = extension_residual(ctx, k0, state.w, state.eta, state.u)
        total += float(r @ np.asarray(state.lam_w).reshape(-1))
    return total


def _scatter_shape_gradient(ctx, s, c=None):
    """Assemble the P1 vector dual of w_hat -> S : D w_hat + c . w_hat where
    s is the already-integrated per-element 2x2 density and c a per-element
    vector density still to be weighted with the P1 basis integral."""
    contrib = np.einsum("eik,eak->eai", s, ctx.p1_grads)
    if c is not None:
        contrib = contrib + c[:, None, :] * (ctx.det_j / 6.0)[:, None, None]
    dofs = (2 * ctx.mesh.triangles[:, :, None] + np.array([0, 1])[None, None, :])
    return _scatter_vector(dofs.reshape(-1, 6), contrib.reshape(-1, 6),
                           2 * ctx.mesh.num_vertices)


def lagrangian_w_derivative(ctx, params, state, groups=ALL_GROUPS, stiffness=None):
    """dL/dw as a vector over all P1 vector dofs, term group by term group.

    Uses d(det DF)[dw] = det DF tr(A Ddw) and dA[dw] = -A Ddw A with
    A = DF^{-1} constant per element.
    """
    ts = compute_transform(ctx, state.w)
    area = 0.5 * ctx.det_j
    at = np.swapaxes(ts.inv, 1, 2)
    qw = ctx.qweights
    det = ts.det
    n = 2 * ctx.mesh.num_vertices
    out = np.zeros(n)

    s = np.zeros((ts.inv.shape[0], 2, 2))
    c = np.zeros((ts.inv.shape[0], 2))

    need_flow = GROUP_OBJECTIVE in groups or GROUP_FLOW in groups
    if need_flow:
        vals2, nodes, vq, dva, pq, atg = _flow_fields(ctx, state.x_flow, ts)

    if GROUP_OBJECTIVE in groups:
        # dissipation only; the u/eta regularizers do not depend on w
        btb = np.einsum("eqik,eqil->eqkl", dva, dva)
        s += -2.0 * params.nu * np.einsum("eqkl,elm,eq,e->ekm", btb, at, qw, det)
        dd = np.einsum("eqik,eqik,eq->e", dva, dva, qw)
        s += params.nu * (dd * det)[:, None, None] * at

    if GROUP_PENALTY in groups:
        gap = np.maximum(params.det_floor - det, 0.0)
        s += (-params.beta * gap * det * area)[:, None, None] * at

    if GROUP_MULTIPLIER in groups or GROUP_AUGMENTATION in groups:
        gdef = geometric_moments(ctx, ts) - state.g_ref
        coeff = np.zeros(3)
        if GROUP_MULTIPLIER in groups:
            coeff += state.lam_g
        if GROUP_AUGMENTATION in groups:
            coeff += 2.0 * state.tau * gdef
        s += (coeff[0] * det * area)[:, None, None] * at
        wq = np.einsum("eai,aq->eqi", ts.displacement[ctx.mesh.triangles], ctx.p1_vals)
        fq = ctx.qpoints + wq
        cf = np.einsum("i,eqi,eq->e", coeff[1:], fq, qw)
        s += (cf * det)[:, None, None] * at
        c += coeff[None, 1:] * det[:, None]

    if GROUP_FLOW in groups:
        lv, lp = _mixed_split(ctx, state.lam_flow)
        lvloc = lv[nodes]
        lvq = np.einsum("eai,aq->eqi", lvloc, vals2)
        _, grads2, _ = ctx.p2_tables()
        dlv = np.einsum("eai,eaqk->eqik", lvloc, grads2)
        bl = np.einsum("eqik,ekl->eqil", dlv, ts.inv)
        lpq = np.einsum("ea,aq->eq", lp[ctx.mesh.triangles], ctx.p1_vals)

        # viscous: no det weight, matching the solved momentum form
        cross = np.einsum("eqik,eqil->eqkl", dva, bl)
        sym = cross + np.swapaxes(cross, 2, 3)
        s += -params.nu * np.einsum("eqkl,elm,eq->ekm", sym, at, qw)
        # convective: -(A^T Dv^T lam_v) outer (A v)
        av = np.einsum("ekl,eql->eqk", ts.inv, vq)
        adl = np.einsum("eqik,eqi->eqk", dva, lvq)  # (DvA)^T lam_v
        s += -np.einsum("eqk,eql,eq->ekl", adl, av, qw)
        # pressure and continuity terms carry det
        trbl = np.einsum("eqkk->eq", bl)
        blt_at = np.einsum("eqik,eil->eqkl", bl, at)
        s += np.einsum("eq,e,eqkl,eq->ekl", pq, det, blt_at, qw)
        s += -(np.einsum("eq,eq,eq->e", pq, trbl, qw) * det)[:, None, None] * at
        trb = np.einsum("eqkk->eq", dva)
        bt_at = np.einsum("eqik,eil->eqkl", dva, at)
        s += np.einsum("eq,e,eqkl,eq->ekl", lpq, det, bt_at, qw)
        s += -(np.einsum("eq,eq,eq->e", lpq, trb, qw) * det)[:, None, None] * at

    out += _scatter_shape_gradient(ctx, s, c)

    if GROUP_EXTENSION in groups:
        k0 = stiffness if stiffness is not None else extension_stiffness(ctx)
        kext = extension_jacobian(ctx, k0, state.w, state.eta)
        out += kext.T @ np.asarray(state.lam_w).reshape(-1)

    return out


def eta_derivative_load(ctx, w, lam_w):
    """Rows of (Dw w) . lam_w against P1 scalar tests (the eta-derivative of
    the extension pairing)."""
    wloc = np.asarray(w, dtype=float).reshape(-1, 2)[ctx.mesh.triangles]
    dw = np.einsum("eai,eak->eik", wloc, ctx.p1_grads)
    wq = np.einsum("eai,aq->eqi", wloc, ctx.p1_vals)
    dwwq = np.einsum("ejk,eqk->eqj", dw, wq)
    lq = np.einsum("eai,aq->eqi", lam_w.reshape(-1, 2)[ctx.mesh.triangles], ctx.p1_vals)
    dot = np.einsum("eqi,eqi->eq", dwwq, lq)
    rows = np.einsum("eq,cq,eq->ec", dot, ctx.p1_vals, ctx.qweights)
    return np.bincount(ctx.mesh.triangles.reshape(-1), weights=rows.reshape(-1),
                       minlength=ctx.mesh.num_vertices)


def obstacle_normal_load(ctx, lam_w):
    """Rows of (lam_w . n) against P1 scalar tests on the obstacle trace."""
    bnd = ctx.boundary(OBSTACLE)
    ends, normal = bnd["ends"], bnd["normal_in"]
    out = np.zeros(ctx.mesh.num_vertices)
    if ends.shape[0] == 0:
        return out
    t, wg = bnd["qcoord"], quad.EDGE_WEIGHTS
    lw = lam_w.reshape(-1, 2)
    lq = lw[ends[:, 0]][:, None, :] * (1.0 - t)[None, :, None] \
        + lw[ends[:, 1]][:, None, :] * t[None, :, None]
    dotn = np.einsum("egi,ei->eg", lq, normal)
    base = bnd["length"][:, None] * wg[None, :] * dotn
    for k, shape in ((0, 1.0 - t), (1, t)):
        np.add.at(out, ends[:, k], (base * shape[None, :]).sum(axis=1))
    return out
