"""End-to-end acceptance gate for the assembled package.

Each test checks one headline property: gradient correctness against finite
differences, constraint satisfaction with the documented update rule, mesh
independence of the optimized shape, level independence of the multigrid
solver, mesh validity along the way, localization of the coefficient
control, solver-stack basics, and monotone descent between constraint
updates. The two long optimization runs are shared through module-scoped
fixtures; expect the module to take tens of minutes wall clock.
"""

import time
from dataclasses import replace
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest

from shapeforge.adjoint import GradientEvaluator
from shapeforge.config import RunConfig, load_config
from shapeforge.extension import extension_dirichlet
from shapeforge.fem import FemContext, compute_transform, identity_transform
from shapeforge.flow import SolverConfig
from shapeforge.forms import (
    ALL_GROUPS,
    LagrangianState,
    extension_boundary_load,
    extension_jacobian,
    extension_residual,
    extension_stiffness,
    flow_jacobian,
    flow_residual,
    lagrangian_value,
    lagrangian_w_derivative,
)
from shapeforge.levels import LevelStack
from shapeforge.mesh import (
    OBSTACLE,
    boundary_vertices,
    hierarchy_from_base,
    load_base_fixture,
)
from shapeforge.optimizer import OptimizationDriver
from shapeforge.report import hausdorff_distance, obstacle_polyline
from shapeforge.solvers import bicgstab, p1_prolongation, p2_prolongation

from test_forms import plain_ns_residual

REPO = Path(__file__).resolve().parents[1]


def random_control(ctx, seed=0):
    """Deterministic nonzero control pair on the base fixture."""
    rng = np.random.default_rng(seed)
    nv = ctx.mesh.num_vertices
    obs = boundary_vertices(ctx.mesh, OBSTACLE)
    u = np.zeros(nv)
    u[obs] = 0.2 * rng.standard_normal(obs.size)
    eta = np.clip(0.5 + 0.2 * rng.standard_normal(nv), 0.0, 1.0)
    return u, eta


def fd_worst_error(ev, u, eta, lam_g, tau, h_u=1e-6, h_eta=1e-4, seed=0):
    """Worst |fd - dual| over the max dual magnitude, 10 dofs per control.

    The boundary control is sampled on the obstacle trace first; on coarse
    meshes with fewer than 10 trace vertices the sample is padded with
    interior dofs, whose derivative must come out as zero.
    """
    bundle = ev.evaluate(u, eta, lam_g, tau)
    rng = np.random.default_rng(seed)
    nv = ev.ctx.mesh.num_vertices
    obs = boundary_vertices(ev.ctx.mesh, OBSTACLE)
    take = min(10, obs.size)
    u_idx = rng.choice(obs, size=take, replace=False)
    if take < 10:
        rest = np.setdiff1d(np.arange(nv), obs)
        u_idx = np.concatenate([u_idx,
                                rng.choice(rest, size=10 - take, replace=False)])
    worst = 0.0
    for which, indices, dual, h in (
            ("u", u_idx, bundle.dual_u, h_u),
            ("eta", rng.choice(nv, size=10, replace=False), bundle.dual_eta, h_eta)):
        scale = float(np.abs(dual).max())
        for idx in indices:
            fd = ev.fd_partial(u, eta, lam_g, tau, which, int(idx), h)
            worst = max(worst, abs(fd - dual[idx]) / scale)
    return worst, bundle


def optimize(cfg, refinements):
    assert cfg.mesh_source == "fixture"
    stack = LevelStack(hierarchy_from_base(load_base_fixture(),
                                           refinements=refinements))
    ev = GradientEvaluator(stack.finest, cfg.objective_params(), cfg.inflow(),
                           cfg.solver_config(), stack=stack)
    driver = OptimizationDriver(ev, cfg.optimizer_settings())
    t0 = time.perf_counter()
    result = driver.run()
    return SimpleNamespace(result=result, stack=stack,
                           seconds=time.perf_counter() - t0)


def point_to_polyline(pt, poly):
    a, b = poly[:-1], poly[1:]
    d = b - a
    t = np.clip(((pt - a) * d).sum(1) / (d * d).sum(1), 0.0, 1.0)
    return float(np.linalg.norm(a + t[:, None] * d - pt, axis=1).min())


@pytest.fixture(scope="module")
def study_cfg():
    cfg = load_config(REPO / "studies" / "gridstudy.cfg")
    # the expectations below are calibrated against this exact setup
    assert cfg.viscosity == 0.1
    assert cfg.steps == 100
    assert cfg.mesh_refinements == 2
    return cfg


@pytest.fixture(scope="module")
def run_level2(study_cfg):
    return optimize(study_cfg, 2)


@pytest.fixture(scope="module")
def run_level3(study_cfg):
    return optimize(study_cfg, 3)


@pytest.fixture(scope="module")
def low_viscosity_run():
    cfg = load_config(REPO / "studies" / "square2d.cfg")
    return SimpleNamespace(cfg=cfg, run=optimize(cfg, cfg.mesh_refinements))


def test_adjoint_gradient_matches_fd(base_ctx):
    """Reduced gradients agree with central differences of the objective,
    at stock solver tolerances and again with everything tightened."""
    t0 = time.perf_counter()
    cfg = RunConfig()
    u, eta = random_control(base_ctx)
    lam_g = np.array([0.3, -0.1, 0.2])

    ev = GradientEvaluator(base_ctx, cfg.objective_params(), cfg.inflow(),
                           cfg.solver_config())
    worst, _ = fd_worst_error(ev, u, eta, lam_g, tau=1.0)
    assert worst <= 1e-3

    tight = SolverConfig(newton_rel_tol=1e-12, newton_abs_tol=1e-14,
                         linear_rel_tol=1e-12, adjoint_abs_tol=1e-12)
    ev_tight = GradientEvaluator(base_ctx, cfg.objective_params(),
                                 cfg.inflow(), tight)
    worst_tight, _ = fd_worst_error(ev_tight, u, eta, lam_g, tau=1.0)
    assert worst_tight <= 1e-5

    assert time.perf_counter() - t0 <= 300.0


def test_lagrangian_w_derivative_matches_fd(base_ctx):
    """The assembled derivative of the coupled Lagrangian in the
    displacement agrees with finite differences along random directions,
    with each term group exercised on its own and all together.

    The determinant penalty is inactive at a healthy solved state, so that
    group is checked with the activation floor raised above the current
    determinants; a clamped-off penalty would differentiate to zero and
    prove nothing.
    """
    t0 = time.perf_counter()
    cfg = RunConfig()
    params = cfg.objective_params()
    u, eta = random_control(base_ctx)
    lam_g = np.array([0.3, -0.1, 0.2])
    tau = 1.0

    ev = GradientEvaluator(base_ctx, params, cfg.inflow(), cfg.solver_config())
    bundle = ev.evaluate(u, eta, lam_g, tau)
    stiff = extension_stiffness(base_ctx)
    state = LagrangianState(
        x_flow=bundle.flow.x, w=bundle.w.reshape(-1, 2), eta=eta, u=u,
        lam_flow=bundle.lam_flow, lam_w=bundle.lam_w, lam_g=lam_g, tau=tau,
        g_ref=ev.g_ref)
    params_pen = replace(params, det_floor=1.5)

    rng = np.random.default_rng(7)
    h = 1e-6
    nv = base_ctx.mesh.num_vertices
    for groups, p in ((("objective",), params),
                      (("penalty",), params_pen),
                      (("multiplier",), params),
                      (ALL_GROUPS, params)):
        deriv = lagrangian_w_derivative(base_ctx, p, state, groups,
                                        stiffness=stiff)
        for _ in range(5):
            dw = rng.standard_normal((nv, 2))
            sp = replace(state, w=state.w + h * dw)
            sm = replace(state, w=state.w - h * dw)
            fd = (lagrangian_value(base_ctx, p, sp, groups, stiffness=stiff)
                  - lagrangian_value(base_ctx, p, sm, groups,
                                     stiffness=stiff)) / (2.0 * h)
            an = float(deriv.reshape(-1) @ dw.reshape(-1))
            assert abs(an - fd) / max(abs(fd), 1e-14) <= 1e-5, groups

    assert time.perf_counter() - t0 <= 120.0


@pytest.mark.slow
def test_constraints_met_and_update_branches(run_level2, study_cfg):
    """The long run drives the volume and barycenter defect below 1e-3 and
    every recorded multiplier/penalty update took the branch its own defect
    value dictates."""
    result = run_level2.result
    assert not result.failed
    recs = result.records
    assert recs[-1].g_def_norm <= 1e-3

    eps_g = study_cfg.optimizer_settings().eps_g
    outer_rows = 0
    for i, rec in enumerate(recs):
        has_tau = "tau" in rec.event
        has_lam = "lambda" in rec.event
        assert not (has_tau and has_lam)
        if has_tau:
            assert rec.g_def_norm < eps_g
        if has_lam:
            assert rec.g_def_norm >= eps_g
        outer_rows += has_tau + has_lam
        if i + 1 < len(recs):
            nxt = recs[i + 1]
            if has_tau:
                # penalty doubles, multiplier untouched
                assert nxt.tau == 2.0 * rec.tau
                assert nxt.lambda_norm == rec.lambda_norm
            elif has_lam:
                assert nxt.tau == rec.tau
            else:
                assert nxt.tau == rec.tau
                assert nxt.lambda_norm == rec.lambda_norm
    assert outer_rows == result.outer_iterations


@pytest.mark.slow
def test_optimized_shape_grid_independent(run_level2, run_level3, study_cfg):
    """Rerunning the identical configuration one refinement level up moves
    the final obstacle outline by less than a couple of coarse boundary
    edges, and the front/back extremities stay put."""
    assert not run_level2.result.failed
    assert not run_level3.result.failed
    for run in (run_level2, run_level3):
        assert (run.result.total_steps == study_cfg.steps
                or run.result.converged)

    poly2 = obstacle_polyline(run_level2.stack.finest.mesh,
                              run_level2.result.bundle.w.reshape(-1, 2))
    poly3 = obstacle_polyline(run_level3.stack.finest.mesh,
                              run_level3.result.bundle.w.reshape(-1, 2))
    h_coarse = float(np.linalg.norm(np.diff(poly2, axis=0), axis=1).max())

    dist = hausdorff_distance(poly2, poly3)
    assert dist <= 2.0 * h_coarse

    # extremities along the flow axis
    assert abs(poly2[:, 0].min() - poly3[:, 0].min()) <= h_coarse
    assert abs(poly2[:, 0].max() - poly3[:, 0].max()) <= h_coarse

    assert run_level2.seconds + run_level3.seconds <= 1800.0


def test_extension_mg_iterations_level_independent():
    """V-cycle preconditioned BiCGStab on the displacement system takes an
    essentially flat iteration count as the hierarchy deepens (measured
    8/9/10 for 3/4/5 levels)."""
    base = load_base_fixture()
    counts = []
    for refs in (2, 3, 4):
        stack = LevelStack(hierarchy_from_base(base, refinements=refs))
        ctx = stack.finest
        nv = ctx.mesh.num_vertices
        free = stack.extension_free(-1)
        kff = stack.ext_stiffness(-1).tocsr()[free][:, free]
        obs = boundary_vertices(ctx.mesh, OBSTACLE)
        load = extension_boundary_load(
            ctx, np.where(np.isin(np.arange(nv), obs), 0.2, 0.0))[free]
        pre = stack.extension_preconditioner(np.zeros(2 * nv),
                                             0.5 * np.ones(nv))
        res = bicgstab(kff, load, preconditioner=pre, rel_tol=1e-8,
                       max_iter=200)
        rel = np.linalg.norm(kff @ res.x - load) / np.linalg.norm(load)
        assert rel <= 1e-7
        counts.append(res.iterations)
    assert max(counts) - min(counts) <= 3, counts


@pytest.mark.slow
def test_mesh_stays_valid_throughout(run_level2):
    """No accepted step ever inverts an element and the final deformed mesh
    is clean."""
    result = run_level2.result
    assert not result.failed
    assert all(rec.min_det > 0.0 for rec in result.records)
    ts = result.bundle.transform
    assert ts.min_det > 0.0
    assert int((ts.det <= 0.0).sum()) == 0


@pytest.mark.slow
def test_eta_concentrates_near_obstacle(low_viscosity_run):
    """After a short low-viscosity run the extension coefficient deviates
    from its initial value most strongly right at the obstacle."""
    cfg = low_viscosity_run.cfg
    run = low_viscosity_run.run
    assert not run.result.failed

    mesh = run.stack.finest.mesh
    dev = np.abs(run.result.control.eta - cfg.eta_init)
    pt = mesh.vertices[int(np.argmax(dev))]
    poly = obstacle_polyline(mesh)
    h_edge = float(np.linalg.norm(np.diff(poly, axis=0), axis=1).max())
    assert point_to_polyline(pt, poly) <= 2.0 * h_edge


def test_solver_stack_basics(base_ctx):
    """Iterative solve against dense LU, interpolation exactness, both
    hand-assembled Jacobians against finite differences, and the transformed
    residual collapsing to the plain one at zero displacement."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    nv = base_ctx.mesh.num_vertices

    stiff = extension_stiffness(base_ctx)
    _, bc_dofs, _ = extension_dirichlet(base_ctx)
    free = np.setdiff1d(np.arange(2 * nv), bc_dofs)
    kff = stiff.tocsr()[free][:, free]
    assert kff.shape[0] <= 2000
    obs = boundary_vertices(base_ctx.mesh, OBSTACLE)
    b = extension_boundary_load(
        base_ctx, np.where(np.isin(np.arange(nv), obs), 0.2, 0.0))[free]
    dense = np.linalg.solve(kff.toarray(), b)
    res = bicgstab(kff, b, rel_tol=1e-12, max_iter=2000)
    assert np.abs(res.x - dense).max() / np.abs(dense).max() <= 1e-8

    hierarchy = hierarchy_from_base(load_base_fixture(), refinements=1)
    coarse, fine = hierarchy.levels

    def affine(v):
        return 2.0 * v[:, 0] - 3.0 * v[:, 1] + 1.0

    p1 = p1_prolongation(hierarchy, 1)
    assert np.abs(p1 @ affine(coarse.vertices) - affine(fine.vertices)).max() <= 1e-13
    p2 = p2_prolongation(hierarchy, 1)
    cc, cf = FemContext(coarse), FemContext(fine)
    assert np.abs(p2 @ affine(cc.p2_node_coords())
                  - affine(cf.p2_node_coords())).max() <= 1e-13

    x = rng.standard_normal(2 * (nv + base_ctx.mesh.num_edges) + nv)
    w = 0.01 * rng.standard_normal(2 * nv)
    ts = compute_transform(base_ctx, w.reshape(-1, 2))
    jac = flow_jacobian(base_ctx, x, ts, 0.1)
    for _ in range(3):
        dx = rng.standard_normal(x.size)
        h = 1e-7
        fd = (flow_residual(base_ctx, x + h * dx, ts, 0.1)
              - flow_residual(base_ctx, x - h * dx, ts, 0.1)) / (2.0 * h)
        assert np.abs(jac @ dx - fd).max() / np.abs(fd).max() <= 1e-6

    u, eta = random_control(base_ctx, seed=3)
    jac_e = extension_jacobian(base_ctx, stiff, w, eta)
    for _ in range(3):
        dw = rng.standard_normal(2 * nv)
        h = 1e-6
        fd = (extension_residual(base_ctx, stiff, w + h * dw, eta, u)
              - extension_residual(base_ctx, stiff, w - h * dw, eta, u)) / (2.0 * h)
        assert np.abs(jac_e @ dw - fd).max() / np.abs(fd).max() <= 1e-6

    r_pull = flow_residual(base_ctx, x, identity_transform(base_ctx), 0.1)
    r_plain = plain_ns_residual(base_ctx, x, 0.1, convection=True)
    assert np.abs(r_pull - r_plain).max() <= 1e-12

    assert time.perf_counter() - t0 <= 120.0


@pytest.mark.slow
def test_objective_monotone_between_updates(run_level2):
    """Across the final 20 steps of the long run the augmented objective
    never increases from one accepted step to the next, except across rows
    where a multiplier or penalty update redefines it."""
    recs = run_level2.result.records
    assert len(recs) >= 21
    window = recs[-21:]
    usable = 0
    for a, b in zip(window, window[1:]):
        if "tau" in a.event or "lambda" in a.event:
            continue
        usable += 1
        assert b.j_aug <= a.j_aug + 1e-8 * abs(a.j_aug), (a.step, b.step)
    assert usable >= 10
