"""Run reports: geometry extraction from results, distance measures between
deformed boundaries, and matplotlib figures rendered straight to files."""

from __future__ import annotations

import numpy as np

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .mesh import OBSTACLE


def obstacle_polyline(mesh, displacement=None):
    """Ordered closed loop of the obstacle boundary vertices, optionally in
    the deformed configuration. Returns an (m, 2) array whose last point
    equals the first."""
    edges = mesh.boundary_edges[mesh.boundary_markers == OBSTACLE]
    if len(edges) == 0:
        raise ValueError("mesh has no obstacle boundary")
    # edge orientation is arbitrary, so walk the loop on an undirected
    # adjacency where every vertex must meet exactly two edges
    neighbors = {}
    for a, b in edges:
        neighbors.setdefault(int(a), []).append(int(b))
        neighbors.setdefault(int(b), []).append(int(a))
    if any(len(v) != 2 for v in neighbors.values()):
        raise ValueError("obstacle boundary is not a closed loop")
    start = int(edges[0, 0])
    loop = [start]
    prev, node = None, start
    while True:
        a, b = neighbors[node]
        nxt = b if a == prev else a
        if nxt == start:
            break
        loop.append(nxt)
        prev, node = node, nxt
        if len(loop) > len(edges):
            raise ValueError("obstacle boundary does not close")
    loop.append(start)
    pts = mesh.vertices[loop]
    if displacement is not None:
        pts = pts + np.asarray(displacement, dtype=float).reshape(-1, 2)[loop]
    return pts


def _resample(poly, spacing):
    """Points spread along a polyline at roughly the given spacing."""
    segs = np.diff(poly, axis=0)
    lengths = np.linalg.norm(segs, axis=1)
    pieces = [poly[:1]]
    for k, ln in enumerate(lengths):
        n = max(1, int(np.ceil(ln / spacing)))
        t = np.linspace(0.0, 1.0, n + 1)[1:]
        pieces.append(poly[k] + t[:, None] * segs[k])
    return np.vstack(pieces)


def _directed_hausdorff(a, b):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return float(np.sqrt(d2.min(axis=1).max()))


def hausdorff_distance(poly_a, poly_b, spacing=None):
    """Symmetric Hausdorff distance between two polylines, measured on
    densely resampled points."""
    if spacing is None:
        all_len = min(np.linalg.norm(np.diff(p, axis=0), axis=1).min()
                      for p in (poly_a, poly_b))
        spacing = max(all_len / 8.0, 1e-6)
    a = _resample(np.asarray(poly_a, dtype=float), spacing)
    b = _resample(np.asarray(poly_b, dtype=float), spacing)
    return max(_directed_hausdorff(a, b), _directed_hausdorff(b, a))


def convergence_figure(records, path):
    """Objective and constraint history with outer-update markers."""
    steps = [r.step for r in records]
    fig, axes = plt.subplots(2, 1, figsize=(7.5, 6.5), sharex=True)
    axes[0].plot(steps, [r.j_aug for r in records], label="augmented objective")
    axes[0].plot(steps, [r.j for r in records], "--", label="dissipation")
    axes[0].set_ylabel("objective")
    axes[0].legend(loc="best", fontsize=8)
    axes[1].semilogy(steps, [max(r.g_def_norm, 1e-16) for r in records],
                     label="|g defect|")
    axes[1].semilogy(steps, [max(r.grad_norm, 1e-16) for r in records],
                     label="projected gradient norm")
    for r in records:
        if "tau" in r.event or "lambda" in r.event:
            for ax in axes:
                ax.axvline(r.step, color="0.8", lw=0.6, zorder=0)
    axes[1].set_xlabel("step")
    axes[1].legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def shape_figure(polylines, path, labels=None, domain=None):
    """Overlay of obstacle boundary loops (initial and deformed)."""
    fig, ax = plt.subplots(figsize=(6.5, 5))
    for k, poly in enumerate(polylines):
        label = labels[k] if labels else None
        ax.plot(poly[:, 0], poly[:, 1], lw=1.4, label=label)
    ax.set_aspect("equal")
    if labels:
        ax.legend(loc="best", fontsize=8)
    ax.set_title("obstacle boundary")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def field_figure(mesh, values, path, displacement=None, title="field"):
    """Nodal scalar rendered as flat shading on the (optionally deformed)
    triangulation."""
    pts = mesh.vertices.copy()
    if displacement is not None:
        pts = pts + np.asarray(displacement, dtype=float).reshape(-1, 2)
    fig, ax = plt.subplots(figsize=(7.5, 4))
    tp = ax.tripcolor(pts[:, 0], pts[:, 1], mesh.triangles,
                      np.asarray(values, dtype=float), shading="gouraud")
    fig.colorbar(tp, ax=ax, shrink=0.85)
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
