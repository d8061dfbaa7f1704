"""Command-line entry points.

Subcommands: run (single optimization), grid-study (the same configuration
across refinement levels plus a cross-level comparison), gradient-check
(adjoint gradients against finite differences), mesh-info (mesh and
hierarchy statistics).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .adjoint import GradientEvaluator
from .config import ConfigError, RunConfig, describe_config, load_config
from .fem import FemContext
from .levels import LevelStack
from .mesh import (
    MARKER_NAMES,
    OBSTACLE,
    boundary_vertices,
    fluid_area,
    hierarchy_from_base,
    load_base_fixture,
    read_mesh,
)
from .optimizer import OptimizationDriver
from .report import (
    convergence_figure,
    field_figure,
    hausdorff_distance,
    obstacle_polyline,
    shape_figure,
)
from .vtkio import write_vtk

logger = logging.getLogger("shapeforge.cli")


def _load_base_mesh(cfg):
    if cfg.mesh_source == "fixture":
        return load_base_fixture()
    return read_mesh(cfg.mesh_source)


def _build_stack(cfg, refinements=None):
    base = _load_base_mesh(cfg)
    refs = cfg.mesh_refinements if refinements is None else refinements
    return LevelStack(hierarchy_from_base(base, refinements=refs))


def _write_lines(path, lines):
    Path(path).write_text("\n".join(lines) + "\n")


def _mesh_stats_lines(mesh):
    lines = [
        f"vertices = {mesh.num_vertices}",
        f"triangles = {mesh.num_triangles}",
        f"edges = {mesh.num_edges}",
        f"boundary_edges = {len(mesh.boundary_edges)}",
    ]
    for marker in sorted(MARKER_NAMES):
        count = int(np.sum(mesh.boundary_markers == marker))
        lines.append(f"boundary_edges[{MARKER_NAMES[marker]}] = {count}")
    lines.append(f"fluid_area = {fluid_area(mesh)!r}")
    edge_vecs = (mesh.vertices[mesh.edges[:, 1]]
                 - mesh.vertices[mesh.edges[:, 0]])
    lens = np.linalg.norm(edge_vecs, axis=1)
    lines.append(f"edge_length_min = {float(lens.min())!r}")
    lines.append(f"edge_length_max = {float(lens.max())!r}")
    return lines


def _summary_lines(result):
    bd = result.bundle.breakdown
    det = result.bundle.transform.det
    return [
        f"steps = {result.total_steps}",
        f"outer_iterations = {result.outer_iterations}",
        f"converged_outer = {'yes' if result.converged else 'no'}",
        f"failed = {'yes' if result.failed else 'no'}",
        f"final_J_aug = {bd.j_aug!r}",
        f"final_dissipation = {bd.j!r}",
        f"final_g_def_norm = {float(np.linalg.norm(bd.g_def))!r}",
        f"final_grad_norm = {result.records[-1].grad_norm!r}",
        f"final_min_detDF = {float(result.bundle.min_det)!r}",
        f"inverted_elements = {int(np.sum(det <= 0.0))}",
        f"lambda = {tuple(float(v) for v in result.lam_g)!r}",
        f"tau = {float(result.tau)!r}",
    ]


def _write_run_outputs(cfg, outdir, stack, result):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    _write_lines(outdir / "history.csv", result.csv_lines())
    _write_lines(outdir / "summary.txt", _summary_lines(result))

    mesh = stack.finest.mesh
    bundle = result.bundle
    nv = mesh.num_vertices
    w = bundle.w.reshape(-1, 2)
    write_vtk(
        outdir / "fields.vtk", mesh,
        point_vectors={
            "displacement": w,
            "velocity": bundle.flow.velocity_nodal[:nv],
        },
        point_scalars={
            "pressure": bundle.flow.pressure,
            "eta": result.control.eta,
            "boundary_control": result.control.u,
        })
    write_vtk(outdir / "deformed.vtk", mesh,
              point_scalars={"eta": result.control.eta},
              displacement=w)

    if cfg.figures:
        convergence_figure(result.records, outdir / "convergence.png")
        initial = obstacle_polyline(mesh)
        deformed = obstacle_polyline(mesh, w)
        shape_figure([initial, deformed], outdir / "shape.png",
                     labels=["initial", "optimized"])
        field_figure(mesh, result.control.eta, outdir / "eta.png",
                     displacement=w, title="extension coefficient")


def _run_optimization(cfg, stack, steps=None):
    params = cfg.objective_params()
    solver = cfg.solver_config()
    settings = cfg.optimizer_settings()
    if steps is not None:
        settings.max_total_steps = steps
    evaluator = GradientEvaluator(stack.finest, params, cfg.inflow(),
                                  solver, stack=stack)
    driver = OptimizationDriver(evaluator, settings)
    return driver.run()


def cmd_run(args):
    cfg = load_config(args.config)
    outdir = Path(args.output or cfg.output_directory)
    if args.dry_run:
        stack = _build_stack(cfg)
        print(describe_config(cfg))
        print()
        for line in _mesh_stats_lines(stack.finest.mesh):
            print(line)
        return 0
    stack = _build_stack(cfg)
    result = _run_optimization(cfg, stack, args.steps)
    _write_run_outputs(cfg, outdir, stack, result)
    last = result.records[-1]
    print(f"finished after {result.total_steps} steps: "
          f"J_aug = {last.j_aug:.6f}, |g_def| = {last.g_def_norm:.3e}, "
          f"min detDF = {last.min_det:.4f}")
    print(f"outputs in {outdir}")
    return 1 if result.failed else 0


def cmd_grid_study(args):
    cfg = load_config(args.config)
    if args.levels:
        levels = [int(tok) for tok in args.levels.split(",")]
    else:
        levels = [cfg.mesh_refinements, cfg.mesh_refinements + 1]
    outdir = Path(args.output or cfg.output_directory)
    if args.dry_run:
        print(describe_config(cfg))
        print(f"levels = {','.join(str(l) for l in levels)}")
        return 0
    outdir.mkdir(parents=True, exist_ok=True)

    polylines = {}
    meshes = {}
    failed = False
    for refs in levels:
        stack = _build_stack(cfg, refinements=refs)
        result = _run_optimization(cfg, stack, args.steps)
        _write_run_outputs(cfg, outdir / f"level{refs}", stack, result)
        failed = failed or result.failed
        mesh = stack.finest.mesh
        polylines[refs] = obstacle_polyline(mesh, result.bundle.w.reshape(-1, 2))
        meshes[refs] = mesh
        print(f"level {refs}: {result.total_steps} steps, "
              f"J_aug = {result.records[-1].j_aug:.6f}, "
              f"|g_def| = {result.records[-1].g_def_norm:.3e}")

    lines = [f"levels = {','.join(str(l) for l in levels)}"]
    for refs in levels:
        poly = polylines[refs]
        lines.append(f"level{refs}_tip_x = ({poly[:, 0].min()!r}, {poly[:, 0].max()!r})")
    for a, b in zip(levels, levels[1:]):
        dist = hausdorff_distance(polylines[a], polylines[b])
        coarse = polylines[a]
        h_coarse = float(np.linalg.norm(np.diff(coarse, axis=0), axis=1).max())
        lines.append(f"pair_{a}_{b}_hausdorff = {dist!r}")
        lines.append(f"pair_{a}_{b}_coarse_h = {h_coarse!r}")
    _write_lines(outdir / "study.txt", lines)
    for line in lines:
        print(line)

    if cfg.figures:
        initial = obstacle_polyline(meshes[levels[0]])
        shape_figure([initial] + [polylines[r] for r in levels],
                     outdir / "shapes.png",
                     labels=["initial"] + [f"level {r}" for r in levels])
    return 1 if failed else 0


def cmd_gradient_check(args):
    cfg = load_config(args.config)
    outdir = Path(args.output or cfg.output_directory)
    stack = _build_stack(cfg)
    ctx = stack.finest
    rng = np.random.default_rng(cfg.seed)
    params = cfg.objective_params()
    evaluator = GradientEvaluator(ctx, params, cfg.inflow(),
                                  cfg.solver_config(), stack=stack)

    nv = ctx.mesh.num_vertices
    obs = boundary_vertices(ctx.mesh, OBSTACLE)
    u = np.zeros(nv)
    u[obs] = 0.2 * rng.standard_normal(obs.size)
    eta = np.clip(cfg.eta_init + 0.2 * rng.standard_normal(nv),
                  cfg.eta_lb, cfg.eta_ub)
    lam_g = np.array([0.3, -0.1, 0.2])
    tau = cfg.tau0

    bundle = evaluator.evaluate(u, eta, lam_g, tau)
    checks = []
    tol = 1e-3
    take = min(10, obs.size)
    u_idx = rng.choice(obs, size=take, replace=False)
    if take < 10:
        # coarse meshes have few obstacle vertices; off-trace dofs still
        # belong to the control vector and must differentiate to zero
        rest = np.setdiff1d(np.arange(nv), obs)
        u_idx = np.concatenate([u_idx, rng.choice(rest, size=10 - take,
                                                  replace=False)])
    for which, indices, dual, h in (
        ("u", u_idx, bundle.dual_u, 1e-6),
        ("eta", rng.choice(nv, size=10, replace=False), bundle.dual_eta, 1e-4),
    ):
        scale = float(np.abs(dual).max())
        for idx in indices:
            fd = evaluator.fd_partial(u, eta, lam_g, tau, which, int(idx), h)
            err = abs(fd - dual[idx]) / scale
            checks.append((which, int(idx), fd, float(dual[idx]), err))

    rows = ["control,index,fd,adjoint,err_over_scale"]
    worst = 0.0
    for which, idx, fd, adj, err in checks:
        worst = max(worst, err)
        rows.append(f"{which},{idx},{fd!r},{adj!r},{err!r}")
        print(f"{which:4s} [{idx:5d}]  fd {fd:+.8e}  adjoint {adj:+.8e}  "
              f"err/scale {err:.2e}")
    outdir.mkdir(parents=True, exist_ok=True)
    _write_lines(outdir / "gradient_check.csv", rows)
    ok = worst <= tol
    print(f"worst err/scale = {worst:.3e} ({'pass' if ok else 'FAIL'} at {tol:g})")
    return 0 if ok else 1


def cmd_mesh_info(args):
    if args.mesh:
        mesh = read_mesh(args.mesh)
    elif args.config:
        mesh = _load_base_mesh(load_config(args.config))
    else:
        mesh = load_base_fixture()
    for line in _mesh_stats_lines(mesh):
        print(line)
    if args.levels:
        hierarchy = hierarchy_from_base(mesh, refinements=int(args.levels))
        print("hierarchy:")
        for k, level in enumerate(hierarchy.levels):
            print(f"  level {k}: {level.num_vertices} vertices, "
                  f"{level.num_triangles} triangles")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="shapeforge",
        description="Energy-dissipation shape optimization on a fixed "
                    "reference mesh.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        p.add_argument("--config", required=needs_config,
                       help="path to a key-value config file")
        p.add_argument("--output", help="output directory override")
        p.add_argument("--steps", type=int, help="total step budget override")
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved setup and exit")

    p_run = sub.add_parser("run", help="run one optimization")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_study = sub.add_parser("grid-study",
                             help="run the configuration on several "
                                  "refinement levels and compare shapes")
    common(p_study)
    p_study.add_argument("--levels",
                         help="comma-separated refinement counts, e.g. 2,3")
    p_study.set_defaults(func=cmd_grid_study)

    p_grad = sub.add_parser("gradient-check",
                            help="compare adjoint gradients with finite "
                                 "differences")
    common(p_grad)
    p_grad.set_defaults(func=cmd_gradient_check)

    p_info = sub.add_parser("mesh-info", help="print mesh statistics")
    p_info.add_argument("mesh", nargs="?", help="mesh file (native format)")
    p_info.add_argument("--config", help="read the mesh named by a config")
    p_info.add_argument("--levels", help="also list a refined hierarchy")
    p_info.set_defaults(func=cmd_mesh_info)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.WARNING,
                        format="%(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
