"""Oracles for the variational forms.

The reference assemblies here are deliberately written as slow per-element
python loops with their own basis-function formulas, so they share nothing
with the vectorized einsum code paths beyond the mesh and the dof layout.
"""

import numpy as np
import pytest

from shapeforge.fem import (
    FemContext,
    boundary_mass_matrix,
    compute_transform,
    identity_transform,
    mass_matrix_p1,
)
from shapeforge.forms import (
    ALL_GROUPS,
    GROUP_AUGMENTATION,
    GROUP_EXTENSION,
    GROUP_FLOW,
    GROUP_MULTIPLIER,
    GROUP_OBJECTIVE,
    GROUP_PENALTY,
    LagrangianState,
    ObjectiveParams,
    det_penalty,
    dissipation,
    dissipation_velocity_derivative,
    eta_derivative_load,
    extension_boundary_load,
    extension_convection_residual,
    extension_jacobian,
    extension_residual,
    extension_stiffness,
    flow_jacobian,
    flow_residual,
    geometric_moments,
    lagrangian_value,
    lagrangian_w_derivative,
    obstacle_normal_load,
)
from shapeforge.mesh import OBSTACLE

rng = np.random.default_rng(512)

# 6-point rule, exact through degree 4 (barycentric points and weights that
# sum to one; multiply by the triangle area)
W1, A1, B1 = 0.223381589678011, 0.108103018168070, 0.445948490915965
W2, A2, B2 = 0.109951743655322, 0.816847572980459, 0.091576213509771
OWN_RULE = [
    (np.array([A1, B1, B1]), W1), (np.array([B1, A1, B1]), W1),
    (np.array([B1, B1, A1]), W1), (np.array([A2, B2, B2]), W2),
    (np.array([B2, A2, B2]), W2), (np.array([B2, B2, A2]), W2),
]


def element_geometry(mesh, e):
    vs = mesh.vertices[mesh.triangles[e]]
    jac = np.column_stack([vs[1] - vs[0], vs[2] - vs[0]])
    det = abs(np.linalg.det(jac))
    bary_grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]) @ np.linalg.inv(jac)
    return det, bary_grads


def p2_basis(lam, bary_grads, pairs):
    """Values and gradients of the six quadratic basis functions at one
    barycentric point; pairs names the vertex pair behind each edge node."""
    phi = np.empty(6)
    grad = np.empty((6, 2))
    for a in range(3):
        phi[a] = lam[a] * (2.0 * lam[a] - 1.0)
        grad[a] = (4.0 * lam[a] - 1.0) * bary_grads[a]
    for k, (ia, ib) in enumerate(pairs):
        phi[3 + k] = 4.0 * lam[ia] * lam[ib]
        grad[3 + k] = 4.0 * (lam[ia] * bary_grads[ib] + lam[ib] * bary_grads[ia])
    return phi, grad


def edge_pairs(mesh, nodes, e):
    tri = mesh.triangles[e].tolist()
    pairs = []
    for k in range(3, 6):
        a, b = mesh.edges[nodes[e, k] - mesh.num_vertices]
        pairs.append((tri.index(a), tri.index(b)))
    return pairs


def plain_ns_residual(ctx, x, nu, convection, rule=None):
    """Loop-based Taylor-Hood Navier-Stokes residual on the plain mesh.

    rule=None takes each element's points and weights from the context so
    that inexactly integrated terms are compared at identical points.
    """
    mesh = ctx.mesh
    _, _, nodes = ctx.p2_tables()
    n2 = mesh.num_vertices + mesh.num_edges
    v = x[: 2 * n2].reshape(n2, 2)
    p = x[2 * n2:]
    r = np.zeros_like(x)
    for e in range(mesh.num_triangles):
        det, bary_grads = element_geometry(mesh, e)
        pairs = edge_pairs(mesh, nodes, e)
        en = nodes[e]
        tri = mesh.triangles[e]
        if rule is None:
            points = [(ctx.p1_vals[:, q], ctx.qweights[e, q])
                      for q in range(ctx.p1_vals.shape[1])]
        else:
            points = [(lam, w * 0.5 * det) for lam, w in rule]
        for lam, wgt in points:
            phi, grad = p2_basis(lam, bary_grads, pairs)
            vq = phi @ v[en]
            dv = v[en].T @ grad
            pq = float(lam @ p[tri])
            for b in range(6):
                for j in range(2):
                    val = nu * (dv[j] @ grad[b])
                    if convection:
                        val += (dv[j] @ vq) * phi[b]
                    val -= pq * grad[b, j]
                    r[2 * en[b] + j] += wgt * val
            divv = dv[0, 0] + dv[1, 1]
            for c in range(3):
                r[2 * n2 + tri[c]] -= wgt * divv * lam[c]
    return r


@pytest.fixture(scope="module")
def ctx(small_ctx):
    return small_ctx


@pytest.fixture(scope="module")
def mixed_size(ctx):
    return 2 * (ctx.mesh.num_vertices + ctx.mesh.num_edges) + ctx.mesh.num_vertices


def test_pullback_reduces_to_plain_stokes(ctx, mixed_size):
    # with zero displacement the transported operator must agree with a
    # textbook assembly; the viscous, pressure and divergence integrands are
    # low degree, so any exact rule gives matching values
    x = rng.standard_normal(mixed_size)
    ts = identity_transform(ctx)
    ours = flow_residual(ctx, x, ts, nu=0.7, convection=False)
    plain = plain_ns_residual(ctx, x, nu=0.7, convection=False, rule=OWN_RULE)
    assert np.abs(ours - plain).max() < 1e-12 * max(1.0, np.abs(plain).max())


def test_pullback_reduces_to_plain_navier_stokes(ctx, mixed_size):
    # the quadratic transport term is integrated inexactly, so compare the
    # loop assembly at the context's own points
    x = rng.standard_normal(mixed_size)
    ts = identity_transform(ctx)
    ours = flow_residual(ctx, x, ts, nu=0.7, convection=True)
    plain = plain_ns_residual(ctx, x, nu=0.7, convection=True, rule=None)
    assert np.abs(ours - plain).max() < 1e-12 * max(1.0, np.abs(plain).max())


def fd_direction(fun, x, d, h):
    return (fun(x + h * d) - fun(x - h * d)) / (2.0 * h)


def test_flow_jacobian_matches_fd(ctx, mixed_size):
    w = 0.05 * rng.standard_normal((ctx.mesh.num_vertices, 2))
    ts = compute_transform(ctx, w)
    x = rng.standard_normal(mixed_size)
    jac = flow_jacobian(ctx, x, ts, nu=0.3)
    for _ in range(4):
        d = rng.standard_normal(mixed_size)
        fd = fd_direction(lambda y: flow_residual(ctx, y, ts, nu=0.3), x, d, 1e-6)
        err = np.abs(jac @ d - fd).max() / max(1.0, np.abs(fd).max())
        assert err < 1e-6


def test_extension_jacobian_matches_fd(ctx):
    nv = ctx.mesh.num_vertices
    k0 = extension_stiffness(ctx)
    eta = rng.uniform(0.0, 1.0, nv)
    u = rng.standard_normal(nv)
    w = 0.1 * rng.standard_normal(2 * nv)
    jac = extension_jacobian(ctx, k0, w, eta)
    for _ in range(4):
        d = rng.standard_normal(2 * nv)
        fd = fd_direction(lambda y: extension_residual(ctx, k0, y, eta, u), w, d, 1e-6)
        err = np.abs(jac @ d - fd).max() / max(1.0, np.abs(fd).max())
        assert err < 1e-6


def test_extension_stiffness_against_loops(ctx):
    mesh = ctx.mesh
    n = 2 * mesh.num_vertices
    ref = np.zeros((n, n))
    for e in range(mesh.num_triangles):
        det, g = element_geometry(mesh, e)
        area = 0.5 * det
        tri = mesh.triangles[e]
        for a in range(3):
            for i in range(2):
                for b in range(3):
                    for j in range(2):
                        val = (i == j) * (g[a] @ g[b]) + g[b][i] * g[a][j]
                        ref[2 * tri[a] + i, 2 * tri[b] + j] += area * val
    k0 = extension_stiffness(ctx).toarray()
    assert np.abs(k0 - ref).max() < 1e-12
    assert np.abs(k0 - k0.T).max() < 1e-14


def test_extension_stiffness_kernel_is_rigid_motion(ctx):
    k0 = extension_stiffness(ctx)
    verts = ctx.mesh.vertices
    const = np.tile([1.0, -2.0], ctx.mesh.num_vertices)
    rot = np.column_stack([verts[:, 1], -verts[:, 0]]).reshape(-1)
    scale = max(1.0, abs(k0).max())
    assert np.abs(k0 @ const).max() < 1e-12 * scale
    assert np.abs(k0 @ rot).max() < 1e-12 * scale
    # pure shear is not rigid, so it must not be in the kernel
    shear = np.column_stack([verts[:, 1], np.zeros(len(verts))]).reshape(-1)
    assert np.abs(k0 @ shear).max() > 1e-6


def test_dissipation_derivative_matches_fd(ctx, mixed_size):
    w = 0.05 * rng.standard_normal((ctx.mesh.num_vertices, 2))
    ts = compute_transform(ctx, w)
    x = rng.standard_normal(mixed_size)
    grad = dissipation_velocity_derivative(ctx, x, ts, nu=0.2)
    n2 = ctx.mesh.num_vertices + ctx.mesh.num_edges
    assert np.abs(grad[2 * n2:]).max() == 0.0
    for _ in range(4):
        d = rng.standard_normal(mixed_size)
        fd = fd_direction(lambda y: dissipation(ctx, y, ts, nu=0.2), x, d, 1e-6)
        assert abs(grad @ d - fd) < 1e-6 * max(1.0, abs(fd))


def test_geometric_moments_identity(ctx):
    # symmetric channel: zero volume defect and zero barycenter moment
    g = geometric_moments(ctx, identity_transform(ctx))
    assert np.abs(g).max() < 1e-10


def test_geometric_moments_translation(base_ctx):
    c = np.array([0.3, -0.7])
    w = np.tile(c, (base_ctx.mesh.num_vertices, 1))
    g = geometric_moments(base_ctx, compute_transform(base_ctx, w))
    area = float(np.sum(0.5 * base_ctx.det_j))
    assert g[0] == pytest.approx(0.0, abs=1e-10)
    assert g[1] == pytest.approx(area * c[0], rel=1e-12)
    assert g[2] == pytest.approx(area * c[1], rel=1e-12)


def test_geometric_moments_scaling(base_ctx):
    eps = 0.05
    w = eps * base_ctx.mesh.vertices
    g = geometric_moments(base_ctx, compute_transform(base_ctx, w))
    area = float(np.sum(0.5 * base_ctx.det_j))
    assert g[0] == pytest.approx(area * ((1 + eps) ** 2 - 1.0), rel=1e-12)
    assert np.abs(g[1:]).max() < 1e-9


def test_det_penalty_values(ctx):
    ts = identity_transform(ctx)
    assert det_penalty(ctx, ts, beta=100.0, det_floor=0.001) == 0.0
    area = float(np.sum(0.5 * ctx.det_j))
    # det is one everywhere, so the gap to a floor of 1.5 is exactly 0.5
    expect = 0.5 * 2.0 * 0.25 * area
    assert det_penalty(ctx, ts, beta=2.0, det_floor=1.5) == pytest.approx(expect, rel=1e-12)


def test_obstacle_load_closed_loop_identities(base_ctx):
    nv = base_ctx.mesh.num_vertices
    load = extension_boundary_load(base_ctx, np.ones(nv))
    # constant test functions see the integral of the normal over a closed
    # loop, which vanishes componentwise
    assert abs(load[0::2].sum()) < 1e-12
    assert abs(load[1::2].sum()) < 1e-12
    # testing with the position field gives twice the enclosed area of the
    # unit square obstacle
    pos = base_ctx.mesh.vertices.reshape(-1)
    assert load @ pos == pytest.approx(2.0, rel=1e-12)


def test_obstacle_normal_load_is_transpose(base_ctx):
    nv = base_ctx.mesh.num_vertices
    lam_w = rng.standard_normal(2 * nv)
    dual = obstacle_normal_load(base_ctx, lam_w)
    for _ in range(3):
        du = rng.standard_normal(nv)
        direct = extension_boundary_load(base_ctx, du) @ lam_w
        assert dual @ du == pytest.approx(direct, rel=1e-12, abs=1e-12)


def test_eta_derivative_load_is_transpose(ctx):
    nv = ctx.mesh.num_vertices
    w = 0.2 * rng.standard_normal(2 * nv)
    lam_w = rng.standard_normal(2 * nv)
    dual = eta_derivative_load(ctx, w, lam_w)
    for _ in range(3):
        de = rng.standard_normal(nv)
        direct = extension_convection_residual(ctx, w, de) @ lam_w
        assert dual @ de == pytest.approx(direct, rel=1e-12, abs=1e-12)


def random_state(ctx, mixed_size, activate_penalty=False):
    nv = ctx.mesh.num_vertices
    return LagrangianState(
        x_flow=0.5 * rng.standard_normal(mixed_size),
        w=0.05 * rng.standard_normal((nv, 2)),
        eta=rng.uniform(0.05, 0.95, nv),
        u=rng.standard_normal(nv),
        lam_flow=rng.standard_normal(mixed_size),
        lam_w=rng.standard_normal(2 * nv),
        lam_g=np.array([0.4, -1.2, 0.8]),
        tau=3.0,
        g_ref=np.array([0.1, -0.2, 0.05]),
    )


@pytest.mark.parametrize("groups", [
    (GROUP_OBJECTIVE,),
    (GROUP_PENALTY,),
    (GROUP_MULTIPLIER,),
    (GROUP_AUGMENTATION,),
    (GROUP_FLOW,),
    (GROUP_EXTENSION,),
    ALL_GROUPS,
], ids=lambda g: "+".join(g) if len(g) < 6 else "all")
def test_lagrangian_shape_derivative_matches_fd(ctx, mixed_size, groups):
    # the floor of 1.5 keeps the determinant penalty active and away from
    # its kink for the small displacements used here
    params = ObjectiveParams(nu=0.3, alpha=1e-2, beta=10.0, theta=1e-3,
                             det_floor=1.5 if GROUP_PENALTY in groups else 0.001)
    state = random_state(ctx, mixed_size)
    k0 = extension_stiffness(ctx)
    grad = lagrangian_w_derivative(ctx, params, state, groups=groups, stiffness=k0)

    def value(wflat):
        st = LagrangianState(
            x_flow=state.x_flow, w=wflat.reshape(-1, 2), eta=state.eta,
            u=state.u, lam_flow=state.lam_flow, lam_w=state.lam_w,
            lam_g=state.lam_g, tau=state.tau, g_ref=state.g_ref)
        return lagrangian_value(ctx, params, st, groups=groups, stiffness=k0)

    w0 = state.w.reshape(-1)
    worst = 0.0
    for _ in range(4):
        d = rng.standard_normal(w0.size)
        fd = fd_direction(value, w0, d, 1e-6)
        worst = max(worst, abs(grad @ d - fd) / max(1.0, abs(fd)))
    assert worst < 1e-6


def test_lagrangian_value_group_additivity(ctx, mixed_size):
    params = ObjectiveParams(nu=0.3, det_floor=1.5)
    state = random_state(ctx, mixed_size)
    k0 = extension_stiffness(ctx)
    total = lagrangian_value(ctx, params, state, groups=ALL_GROUPS, stiffness=k0)
    parts = sum(lagrangian_value(ctx, params, state, groups=(g,), stiffness=k0)
                for g in ALL_GROUPS)
    assert total == pytest.approx(parts, rel=1e-12)


def test_mass_matrices_spd(ctx):
    m = mass_matrix_p1(ctx)
    mg = boundary_mass_matrix(ctx, OBSTACLE)
    v = rng.standard_normal(ctx.mesh.num_vertices)
    assert v @ (m @ v) > 0.0
    assert np.abs((m - m.T)).max() < 1e-14
    # the boundary mass matrix is only semidefinite off the marked edges
    assert v @ (mg @ v) >= 0.0
