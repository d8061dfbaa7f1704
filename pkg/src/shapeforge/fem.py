"""Finite element spaces on triangle meshes: P1, P1 vector, P2 vector and
the Taylor-Hood velocity/pressure pair, plus geometry tables, the domain
transform F = id + w, mass matrices and Dirichlet elimination.

Vector dofs are node-major interleaved: dof = 2*node + component. P2 nodes
are the mesh vertices followed by one node per edge (at the midpoint), so a
P2 coefficient vector doubles as nodal values on the once-refined mesh.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import quadrature as quad
from .mesh import MARKER_PRIORITY, OBSTACLE, vertex_marker_ownership

P1 = "p1"
P1V = "p1v"
P2V = "p2v"
TAYLOR_HOOD = "p2v-p1"

_SPACES = (P1, P1V, P2V, TAYLOR_HOOD)


@dataclass
class DofMap:
    """Dof layout of one space on one mesh."""

    mesh: object
    space: str
    num_dofs: int
    num_p2_nodes: int = 0

    def vertex_dofs(self, vertices, comp=None):
        """Global dofs at the given vertex indices (both components for
        vector spaces unless comp is given)."""
        v = np.asarray(vertices, dtype=np.int64)
        if self.space == P1:
            return v
        if comp is not None:
            return 2 * v + comp
        return np.stack([2 * v, 2 * v + 1], axis=-1).reshape(-1)

    def edge_node(self, edge_ids):
        """P2 node index of the given mesh edges."""
        return self.mesh.num_vertices + np.asarray(edge_ids, dtype=np.int64)

    @property
    def velocity_dofs(self):
        assert self.space == TAYLOR_HOOD
        return np.arange(2 * self.num_p2_nodes)

    @property
    def pressure_dofs(self):
        assert self.space == TAYLOR_HOOD
        return 2 * self.num_p2_nodes + np.arange(self.mesh.num_vertices)


def build_dofmap(mesh, space):
    if space not in _SPACES:
        raise ValueError(f"unknown space {space!r}")
    nv, ned = mesh.num_vertices, mesh.num_edges
    n2 = nv + ned
    if space == P1:
        return DofMap(mesh, space, nv)
    if space == P1V:
        return DofMap(mesh, space, 2 * nv)
    if space == P2V:
        return DofMap(mesh, space, 2 * n2, num_p2_nodes=n2)
    return DofMap(mesh, space, 2 * n2 + nv, num_p2_nodes=n2)


@dataclass
class FieldVector:
    """Coefficients of one finite element field."""

    values: np.ndarray
    dofmap: DofMap

    def copy(self):
        return FieldVector(self.values.copy(), self.dofmap)

    def nodal(self):
        """Values reshaped (num_nodes, 2) for vector spaces."""
        if self.dofmap.space in (P1V, P2V):
            return self.values.reshape(-1, 2)
        return self.values


def zero_field(dofmap):
    return FieldVector(np.zeros(dofmap.num_dofs), dofmap)


def _p1_reference():
    pts = quad.TRI_POINTS
    vals = np.stack([1.0 - pts[:, 0] - pts[:, 1], pts[:, 0], pts[:, 1]], axis=0)
    grads = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    return vals, grads


def _p2_reference():
    x, y = quad.TRI_POINTS[:, 0], quad.TRI_POINTS[:, 1]
    lam = np.stack([1.0 - x - y, x, y], axis=0)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    vals = np.empty((6, len(x)))
    grads = np.empty((6, len(x), 2))
    for i in range(3):
        vals[i] = lam[i] * (2.0 * lam[i] - 1.0)
        grads[i] = (4.0 * lam[i] - 1.0)[:, None] * dlam[i]
    # edge nodes opposite the local edges (0,1), (1,2), (2,0)
    for k, (i, j) in enumerate(((0, 1), (1, 2), (2, 0))):
        vals[3 + k] = 4.0 * lam[i] * lam[j]
        grads[3 + k] = 4.0 * (lam[i][:, None] * dlam[j] + lam[j][:, None] * dlam[i])
    return vals, grads


class FemContext:
    """Cached geometry and basis tables for assembly on one mesh."""

    def __init__(self, mesh):
        self.mesh = mesh
        coords = mesh.vertices[mesh.triangles]  # (ne, 3, 2)
        d1 = coords[:, 1] - coords[:, 0]
        d2 = coords[:, 2] - coords[:, 0]
        self.det_j = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        jac = np.stack([d1, d2], axis=-1)  # columns are the edge vectors
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv[:, 0, 1] = -jac[:, 0, 1]
        inv[:, 1, 0] = -jac[:, 1, 0]
        inv /= self.det_j[:, None, None]
        self.inv_jt = np.ascontiguousarray(np.swapaxes(inv, 1, 2))

        self.p1_vals, p1_gref = _p1_reference()
        self.p1_grads = np.einsum("ekl,al->eak", self.inv_jt, p1_gref)
        self.qweights = quad.TRI_WEIGHTS[None, :] * self.det_j[:, None]
        ref = np.concatenate(
            [1.0 - quad.TRI_POINTS.sum(axis=1, keepdims=True), quad.TRI_POINTS], axis=1
        )
        self.qpoints = np.einsum("qa,eak->eqk", ref, coords)

        self._p2 = None
        self._bnd = {}
        self._ownership = None

    # -- P2 tables ---------------------------------------------------------

    def p2_tables(self):
        """(vals (6, nq), physical grads (ne, 6, nq, 2), tri node ids (ne, 6))."""
        if self._p2 is None:
            vals, gref = _p2_reference()
            grads = np.einsum("ekl,aql->eaqk", self.inv_jt, gref)
            nodes = np.concatenate(
                [self.mesh.triangles, self.mesh.num_vertices + self.mesh.tri_edges],
                axis=1,
            )
            self._p2 = (vals, grads, nodes)
        return self._p2

    def p2_node_coords(self):
        mids = 0.5 * (
            self.mesh.vertices[self.mesh.edges[:, 0]]
            + self.mesh.vertices[self.mesh.edges[:, 1]]
        )
        return np.vstack([self.mesh.vertices, mids])

    # -- boundary tables ---------------------------------------------------

    def boundary(self, marker):
        """Edge table for one marker: dict with endpoint ids, lengths, the
        unit normal pointing toward the adjacent triangle (away from the
        domain exterior/hole), the P2 midpoint node and quadrature data."""
        if marker not in self._bnd:
            mesh = self.mesh
            sel = np.flatnonzero(mesh.boundary_markers == marker)
            ends = mesh.boundary_edges[sel]
            a, b = mesh.vertices[ends[:, 0]], mesh.vertices[ends[:, 1]]
            tang = b - a
            length = np.linalg.norm(tang, axis=1)
            normal = np.column_stack([tang[:, 1], -tang[:, 0]]) / length[:, None]
            tri = mesh.boundary_tri[sel]
            cent = mesh.vertices[mesh.triangles[tri]].mean(axis=1)
            mid = 0.5 * (a + b)
            flip = np.einsum("ij,ij->i", normal, cent - mid) < 0.0
            normal[flip] *= -1.0
            t = quad.EDGE_POINTS
            pts = a[:, None, :] * (1.0 - t)[None, :, None] + b[:, None, :] * t[None, :, None]
            self._bnd[marker] = {
                "ends": ends,
                "length": length,
                "normal_in": normal,
                "edge_ids": mesh.boundary_edge_ids[sel],
                "p2_node": mesh.num_vertices + mesh.boundary_edge_ids[sel],
                "qpoints": pts,
                "qweights": quad.EDGE_WEIGHTS[None, :] * length[:, None],
                "qcoord": t,
            }
        return self._bnd[marker]

    def obstacle_outward_normals(self):
        """Per-edge unit normals of the obstacle pointing into the fluid."""
        return self.boundary(OBSTACLE)["normal_in"]

    def vertex_ownership(self):
        if self._ownership is None:
            self._ownership = vertex_marker_ownership(self.mesh)
        return self._ownership

    def obstacle_corner_normals(self):
        """Nodal normals on the obstacle trace: each vertex averages the unit
        normals of its adjacent edges (normalized); used for output only."""
        bnd = self.boundary(OBSTACLE)
        nv = self.mesh.num_vertices
        acc = np.zeros((nv, 2))
        cnt = np.zeros(nv)
        for k in range(2):
            np.add.at(acc, bnd["ends"][:, k], bnd["normal_in"])
            np.add.at(cnt, bnd["ends"][:, k], 1.0)
        verts = np.flatnonzero(cnt > 0)
        n = acc[verts] / cnt[verts, None]
        n /= np.linalg.norm(n, axis=1)[:, None]
        return verts, n


@dataclass
class TransformState:
    """Per-element data of the transform F = id + w for P1 displacement w:
    the (constant) Jacobian DF, its determinant and inverse."""

    displacement: np.ndarray  # (nv, 2) nodal values
    grad_w: np.ndarray        # (ne, 2, 2)
    df: np.ndarray            # (ne, 2, 2)
    det: np.ndarray           # (ne,)
    inv: np.ndarray           # (ne, 2, 2)

    @property
    def min_det(self):
        return float(self.det.min())


def compute_transform(ctx, w):
    """TransformState from a P1 vector field (FieldVector or (nv, 2) array)."""
    wn = w.nodal() if isinstance(w, FieldVector) else np.asarray(w)
    wloc = wn[ctx.mesh.triangles]  # (ne, 3, 2)
    grad_w = np.einsum("eai,eak->eik", wloc, ctx.p1_grads)
    df = grad_w.copy()
    df[:, 0, 0] += 1.0
    df[:, 1, 1] += 1.0
    det = df[:, 0, 0] * df[:, 1, 1] - df[:, 0, 1] * df[:, 1, 0]
    inv = np.empty_like(df)
    inv[:, 0, 0] = df[:, 1, 1]
    inv[:, 1, 1] = df[:, 0, 0]
    inv[:, 0, 1] = -df[:, 0, 1]
    inv[:, 1, 0] = -df[:, 1, 0]
    inv /= det[:, None, None]
    return TransformState(wn, grad_w, df, det, inv)


def identity_transform(ctx):
    return compute_transform(ctx, np.zeros((ctx.mesh.num_vertices, 2)))


# ---------------------------------------------------------------------------
# Dirichlet data
# ---------------------------------------------------------------------------

def velocity_dirichlet(ctx, dofmap, value_by_marker):
    """Dirichlet dofs and values for a vector space.

    value_by_marker maps marker -> f(x) returning (n, 2) values. Vertices
    shared by several marked edges are owned by the strongest marker
    (INFLOW > WALL > OBSTACLE > OUTFLOW); edge midpoint nodes always belong
    to their edge's marker.
    """
    mesh = ctx.mesh
    owner = ctx.vertex_ownership()
    dofs, vals = [], []
    for marker in MARKER_PRIORITY:
        if marker not in value_by_marker:
            continue
        f = value_by_marker[marker]
        verts = np.flatnonzero(owner == marker)
        if verts.size:
            v = np.asarray(f(mesh.vertices[verts]), dtype=float)
            dofs.append(2 * verts)
            vals.append(v[:, 0])
            dofs.append(2 * verts + 1)
            vals.append(v[:, 1])
        if dofmap.space in (P2V, TAYLOR_HOOD):
            bnd = ctx.boundary(marker)
            if bnd["ends"].shape[0]:
                nodes = bnd["p2_node"]
                mids = 0.5 * (mesh.vertices[bnd["ends"][:, 0]]
                              + mesh.vertices[bnd["ends"][:, 1]])
                v = np.asarray(f(mids), dtype=float)
                dofs.append(2 * nodes)
                vals.append(v[:, 0])
                dofs.append(2 * nodes + 1)
                vals.append(v[:, 1])
    if not dofs:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    dofs = np.concatenate(dofs)
    vals = np.concatenate(vals)
    order = np.argsort(dofs, kind="stable")
    return dofs[order], vals[order]


def apply_dirichlet(matrix, rhs, dofs, values):
    """Constrain matrix rows to the identity and symmetrically eliminate the
    corresponding columns, moving their contribution to the right side.
    Returns a new (matrix, rhs) pair; inputs are not modified."""
    a = matrix.tocsr(copy=True)
    b = np.array(rhs, dtype=float, copy=True)
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    if dofs.size == 0:
        return a, b

    x = np.zeros(a.shape[0])
    x[dofs] = values
    b -= a @ x
    b[dofs] = values

    keep = np.ones(a.shape[0], dtype=bool)
    keep[dofs] = False
    mask = sp.diags(keep.astype(float), format="csr")
    a = mask @ a @ mask
    a = a.tolil()
    a[dofs, dofs] = 1.0
    return a.tocsr(), b


def restrict_to_free(matrix, constrained):
    """(A_ff, free index array) with the constrained dofs removed."""
    n = matrix.shape[0]
    free = np.setdiff1d(np.arange(n), np.asarray(constrained, dtype=np.int64))
    return matrix.tocsr()[free][:, free], free


# ---------------------------------------------------------------------------
# mass matrices and norms
# ---------------------------------------------------------------------------

def mass_matrix_p1(ctx):
    """Consistent P1 mass matrix over the whole domain."""
    n1 = ctx.p1_vals
    local = np.einsum("aq,bq,eq->eab", n1, n1, ctx.qweights)
    t = ctx.mesh.triangles
    rows = np.repeat(t, 3, axis=1).reshape(-1)
    cols = np.tile(t, (1, 3)).reshape(-1)
    nv = ctx.mesh.num_vertices
    return sp.coo_matrix((local.reshape(-1), (rows, cols)), shape=(nv, nv)).tocsr()


def boundary_mass_matrix(ctx, marker):
    """P1 trace mass matrix over the edges of one marker (full nv size)."""
    bnd = ctx.boundary(marker)
    ends, length = bnd["ends"], bnd["length"]
    nv = ctx.mesh.num_vertices
    if ends.shape[0] == 0:
        return sp.csr_matrix((nv, nv))
    third, sixth = length / 3.0, length / 6.0
    rows = np.concatenate([ends[:, 0], ends[:, 1], ends[:, 0], ends[:, 1]])
    cols = np.concatenate([ends[:, 0], ends[:, 1], ends[:, 1], ends[:, 0]])
    vals = np.concatenate([third, third, sixth, sixth])
    return sp.coo_matrix((vals, (rows, cols)), shape=(nv, nv)).tocsr()


def mass_norm(matrix, values):
    return float(np.sqrt(max(0.0, values @ (matrix @ values))))
