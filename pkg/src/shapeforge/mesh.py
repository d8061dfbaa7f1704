"""Triangle meshes of the flow tunnel, uniform red refinement, and mesh I/O.

The reference domain is a rectangular tunnel with an axis-aligned square
obstacle cut out. Boundary edges carry integer markers:

    1 = INFLOW, 2 = OUTFLOW, 3 = WALL, 4 = OBSTACLE

At corner vertices shared by two marker classes the Dirichlet-stronger
marker owns the vertex, in the priority order INFLOW > WALL > OBSTACLE >
OUTFLOW.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

INFLOW = 1
OUTFLOW = 2
WALL = 3
OBSTACLE = 4

MARKER_NAMES = {INFLOW: "inflow", OUTFLOW: "outflow", WALL: "wall", OBSTACLE: "obstacle"}

# Vertex ownership priority at marker corners (strongest first).
MARKER_PRIORITY = (INFLOW, WALL, OBSTACLE, OUTFLOW)

_HEADER = "mesh2d"


class InvalidGeometryError(ValueError):
    """Raised for degenerate or non-conforming mesh geometry."""


class MeshFormatError(ValueError):
    """Raised for unparseable mesh files; carries the offending line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass
class MeshLevel:
    """One level of the grid hierarchy. Arrays are read-only after init.

    vertices : (nv, 2) float
    triangles : (ne, 3) int, counter-clockwise
    boundary_edges : (nb, 2) int
    boundary_markers : (nb,) int
    level_index : int, position in the hierarchy (0 = coarsest)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_markers: np.ndarray
    level_index: int = 0

    # derived connectivity, filled by __post_init__
    edges: np.ndarray = field(init=False, repr=False)
    tri_edges: np.ndarray = field(init=False, repr=False)
    boundary_edge_ids: np.ndarray = field(init=False, repr=False)
    boundary_tri: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.boundary_edges = np.ascontiguousarray(self.boundary_edges, dtype=np.int64)
        self.boundary_markers = np.ascontiguousarray(self.boundary_markers, dtype=np.int64)
        self._validate_shapes()
        self._build_edges()
        self._validate_topology()
        for a in (self.vertices, self.triangles, self.boundary_edges,
                  self.boundary_markers, self.edges, self.tri_edges,
                  self.boundary_edge_ids, self.boundary_tri):
            a.flags.writeable = False

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_triangles(self):
        return self.triangles.shape[0]

    @property
    def num_edges(self):
        return self.edges.shape[0]

    def _validate_shapes(self):
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise InvalidGeometryError("vertices must be (nv, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise InvalidGeometryError("triangles must be (ne, 3)")
        if self.boundary_edges.shape[0] != self.boundary_markers.shape[0]:
            raise InvalidGeometryError("boundary edge/marker count mismatch")
        nv = self.num_vertices
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= nv):
            raise InvalidGeometryError("triangle vertex index out of range")
        if self.boundary_edges.size and (
            self.boundary_edges.min() < 0 or self.boundary_edges.max() >= nv
        ):
            raise InvalidGeometryError("boundary edge vertex index out of range")
        bad = set(np.unique(self.boundary_markers)) - set(MARKER_NAMES)
        if bad:
            raise InvalidGeometryError(f"unknown boundary markers {sorted(bad)}")
        areas = signed_areas(self.vertices, self.triangles)
        if np.any(areas <= 0.0):
            k = int(np.argmin(areas))
            raise InvalidGeometryError(
                f"triangle {k} is degenerate or clockwise (signed area {areas[k]:g})"
            )

    def _build_edges(self):
        t = self.triangles
        pairs = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1)
        pairs = np.sort(pairs.reshape(-1, 2), axis=1)
        self.edges, inverse = np.unique(pairs, axis=0, return_inverse=True)
        self.tri_edges = inverse.reshape(-1, 3).astype(np.int64)
        # adjacent triangle of every 1-triangle edge (last write wins; edges
        # shared by two triangles are never looked up through this array)
        adj = np.full(self.num_edges, -1, dtype=np.int64)
        adj[self.tri_edges.reshape(-1)] = np.repeat(
            np.arange(self.num_triangles, dtype=np.int64), 3
        )
        self._edge_adj = adj

        if self.boundary_edges.size:
            be = np.sort(self.boundary_edges, axis=1)
            keys = self.edges[:, 0] * (self.num_vertices + 1) + self.edges[:, 1]
            bkeys = be[:, 0] * (self.num_vertices + 1) + be[:, 1]
            pos = np.searchsorted(keys, bkeys)
            ok = (pos < len(keys)) & (keys[np.minimum(pos, len(keys) - 1)] == bkeys)
            if not np.all(ok):
                k = int(np.argmin(ok))
                raise InvalidGeometryError(
                    f"marked boundary edge {tuple(self.boundary_edges[k])} is not a mesh edge"
                )
            self.boundary_edge_ids = pos.astype(np.int64)
        else:
            self.boundary_edge_ids = np.zeros(0, dtype=np.int64)
        self.boundary_tri = self._edge_adj[self.boundary_edge_ids].copy()

    def _validate_topology(self):
        counts = np.bincount(self.tri_edges.reshape(-1), minlength=self.num_edges)
        if np.any(counts > 2):
            raise InvalidGeometryError("an edge is shared by more than two triangles")
        open_edges = np.flatnonzero(counts == 1)
        marked = np.unique(self.boundary_edge_ids)
        if marked.size != self.boundary_edge_ids.size:
            raise InvalidGeometryError("duplicate boundary edge in marker list")
        if open_edges.size != marked.size or not np.array_equal(np.sort(marked), open_edges):
            raise InvalidGeometryError(
                "marked boundary edges do not coincide with the 1-triangle edges"
            )


@dataclass(frozen=True)
class DomainSpec:
    """Tunnel rectangle and optional axis-aligned square/rectangular hole."""

    x_min: float = -7.0
    x_max: float = 7.0
    y_min: float = -3.0
    y_max: float = 3.0
    obstacle: tuple | None = (-0.5, 0.5, -0.5, 0.5)

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise InvalidGeometryError("tunnel rectangle has non-positive extent")
        if self.obstacle is not None:
            ox0, ox1, oy0, oy1 = self.obstacle
            if not (ox1 > ox0 and oy1 > oy0):
                raise InvalidGeometryError("obstacle has non-positive extent")
            inside = (
                self.x_min < ox0 and ox1 < self.x_max
                and self.y_min < oy0 and oy1 < self.y_max
            )
            if not inside:
                raise InvalidGeometryError("obstacle must lie strictly inside the tunnel")

    @property
    def tunnel_diameter(self):
        return self.y_max - self.y_min

    def fluid_area(self):
        area = (self.x_max - self.x_min) * (self.y_max - self.y_min)
        if self.obstacle is not None:
            ox0, ox1, oy0, oy1 = self.obstacle
            area -= (ox1 - ox0) * (oy1 - oy0)
        return area


def signed_areas(vertices, triangles):
    p = vertices[triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def fluid_area(mesh):
    """Total triangle area of the mesh."""
    return float(np.sum(signed_areas(mesh.vertices, mesh.triangles)))


def _segment_lines(lo, hi, breaks, h):
    """Grid lines on [lo, hi] passing exactly through every break point."""
    stops = [lo, *breaks, hi]
    lines = [np.array([lo])]
    for a, b in zip(stops[:-1], stops[1:]):
        n = max(1, int(round((b - a) / h)))
        lines.append(np.linspace(a, b, n + 1)[1:])
    return np.concatenate(lines)


def structured_mesh(domain, x_lines, y_lines):
    """Triangulate a tensor grid, removing cells inside the obstacle.

    x_lines/y_lines must contain the obstacle bounds exactly when the domain
    has one. Each remaining quad cell is split along its main diagonal into
    two counter-clockwise triangles.
    """
    x = np.asarray(x_lines, dtype=float)
    y = np.asarray(y_lines, dtype=float)
    nx, ny = len(x) - 1, len(y) - 1
    if nx < 1 or ny < 1:
        raise InvalidGeometryError("need at least one cell per direction")

    keep = np.ones((nx, ny), dtype=bool)
    if domain.obstacle is not None:
        ox0, ox1, oy0, oy1 = domain.obstacle
        ix = [int(np.argmin(np.abs(x - v))) for v in (ox0, ox1)]
        iy = [int(np.argmin(np.abs(y - v))) for v in (oy0, oy1)]
        if not (np.isclose(x[ix[0]], ox0) and np.isclose(x[ix[1]], ox1)
                and np.isclose(y[iy[0]], oy0) and np.isclose(y[iy[1]], oy1)):
            raise InvalidGeometryError("grid lines must pass through the obstacle bounds")
        keep[ix[0]:ix[1], iy[0]:iy[1]] = False

    def vid(i, j):
        return i * (ny + 1) + j

    tris, bedges, bmarks = [], [], []
    for i in range(nx):
        for j in range(ny):
            if not keep[i, j]:
                continue
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
            if j == 0 or not keep[i, j - 1]:
                bedges.append((v00, v10))
                bmarks.append(WALL if j == 0 else OBSTACLE)
            if j == ny - 1 or not keep[i, j + 1]:
                bedges.append((v01, v11))
                bmarks.append(WALL if j == ny - 1 else OBSTACLE)
            if i == 0 or not keep[i - 1, j]:
                bedges.append((v00, v01))
                bmarks.append(INFLOW if i == 0 else OBSTACLE)
            if i == nx - 1 or not keep[i + 1, j]:
                bedges.append((v10, v11))
                bmarks.append(OUTFLOW if i == nx - 1 else OBSTACLE)

    xx, yy = np.meshgrid(x, y, indexing="ij")
    verts = np.column_stack([xx.reshape(-1), yy.reshape(-1)])
    tris = np.asarray(tris, dtype=np.int64)
    bedges = np.asarray(bedges, dtype=np.int64)

    used = np.unique(tris)
    remap = np.full(verts.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return MeshLevel(
        vertices=verts[used],
        triangles=remap[tris],
        boundary_edges=remap[bedges],
        boundary_markers=np.asarray(bmarks, dtype=np.int64),
    )


def generate_reference_mesh(domain=None, target_coarse_elements=400):
    """Coarse conforming triangulation of the tunnel-minus-obstacle domain.

    Aims for roughly the requested element count (never fewer than 64) with
    grid lines through the obstacle bounds so the hole is cut out exactly.
    """
    domain = domain or DomainSpec()
    if target_coarse_elements < 64:
        raise InvalidGeometryError("target_coarse_elements must be at least 64")
    h = np.sqrt(2.0 * domain.fluid_area() / target_coarse_elements)
    xb = [domain.obstacle[0], domain.obstacle[1]] if domain.obstacle else []
    yb = [domain.obstacle[2], domain.obstacle[3]] if domain.obstacle else []
    for _ in range(40):
        m = structured_mesh(
            domain,
            _segment_lines(domain.x_min, domain.x_max, xb, h),
            _segment_lines(domain.y_min, domain.y_max, yb, h),
        )
        if m.num_triangles >= max(64, int(0.7 * target_coarse_elements)):
            return m
        h *= 0.85
    raise InvalidGeometryError("could not reach the requested resolution")


@dataclass
class GridHierarchy:
    """Nested levels produced by uniform red refinement.

    parent_vertex[k][i] is the coarse vertex that fine vertex i of level k
    coincides with (or -1), parent_edge[k][i] the coarse edge whose midpoint
    it is (or -1). Index 0 holds None placeholders for the base level.
    """

    levels: list
    parent_vertex: list
    parent_edge: list

    @property
    def refinement_count(self):
        return len(self.levels) - 1

    @property
    def finest(self):
        return self.levels[-1]

    @property
    def coarsest(self):
        return self.levels[0]


def hierarchy_from_base(base, refinements=0):
    h = GridHierarchy(levels=[base], parent_vertex=[None], parent_edge=[None])
    for _ in range(refinements):
        h = refine_uniform(h)
    return h


def refine_uniform(hierarchy):
    """Red-refine the finest level: every triangle into four, new vertices at
    exact edge midpoints, boundary children inherit their parent's marker."""
    coarse = hierarchy.finest
    nvc = coarse.num_vertices
    mids = 0.5 * (coarse.vertices[coarse.edges[:, 0]] + coarse.vertices[coarse.edges[:, 1]])
    verts = np.vstack([coarse.vertices, mids])

    t = coarse.triangles
    m01 = nvc + coarse.tri_edges[:, 0]
    m12 = nvc + coarse.tri_edges[:, 1]
    m20 = nvc + coarse.tri_edges[:, 2]
    tris = np.empty((4 * coarse.num_triangles, 3), dtype=np.int64)
    tris[0::4] = np.column_stack([t[:, 0], m01, m20])
    tris[1::4] = np.column_stack([m01, t[:, 1], m12])
    tris[2::4] = np.column_stack([m20, m12, t[:, 2]])
    tris[3::4] = np.column_stack([m01, m12, m20])

    be = coarse.boundary_edges
    bm = nvc + coarse.boundary_edge_ids
    bedges = np.empty((2 * be.shape[0], 2), dtype=np.int64)
    bedges[0::2] = np.column_stack([be[:, 0], bm])
    bedges[1::2] = np.column_stack([bm, be[:, 1]])
    bmarks = np.repeat(coarse.boundary_markers, 2)

    fine = MeshLevel(verts, tris, bedges, bmarks, level_index=coarse.level_index + 1)
    pv = np.concatenate([np.arange(nvc), np.full(coarse.num_edges, -1)]).astype(np.int64)
    pe = np.concatenate([np.full(nvc, -1), np.arange(coarse.num_edges)]).astype(np.int64)
    return GridHierarchy(
        levels=[*hierarchy.levels, fine],
        parent_vertex=[*hierarchy.parent_vertex, pv],
        parent_edge=[*hierarchy.parent_edge, pe],
    )


def boundary_vertices(mesh, marker):
    """Sorted vertex indices lying on edges of the given marker."""
    sel = mesh.boundary_markers == marker
    return np.unique(mesh.boundary_edges[sel])


def vertex_marker_ownership(mesh):
    """Marker owning each boundary vertex under the corner priority rule.

    Returns (nv,) int array, 0 for interior vertices.
    """
    rank = {m: r for r, m in enumerate(MARKER_PRIORITY)}
    best = np.full(mesh.num_vertices, len(MARKER_PRIORITY), dtype=np.int64)
    for m in MARKER_PRIORITY:
        vs = boundary_vertices(mesh, m)
        best[vs] = np.minimum(best[vs], rank[m])
    owner = np.zeros(mesh.num_vertices, dtype=np.int64)
    hit = best < len(MARKER_PRIORITY)
    owner[hit] = np.array(MARKER_PRIORITY, dtype=np.int64)[best[hit]]
    return owner


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_mesh(mesh, path):
    """Write the native ASCII format: a one-line header followed by vertex,
    triangle and marked-boundary-edge blocks (0-based indices)."""
    with open(path, "w") as f:
        f.write(mesh_to_string(mesh))


def read_mesh(path, fmt="native", gmsh_markers=None):
    """Read a mesh file. fmt is "native" or "gmsh" (MSH 2.2 ASCII subset;
    gmsh_markers maps physical ids of line elements to boundary markers)."""
    if fmt == "native":
        with open(path) as f:
            return _read_native(f)
    if fmt == "gmsh":
        with open(path) as f:
            return _read_gmsh(f, gmsh_markers or {})
    raise ValueError(f"unknown mesh format {fmt!r}")


def _read_native(f):
    def fail(msg, ln):
        raise MeshFormatError(msg, line=ln)

    lines = f.read().splitlines()
    if not lines:
        fail("empty file", 1)
    head = lines[0].split()
    if len(head) != 4 or head[0] != _HEADER:
        fail(f"expected header '{_HEADER} <nv> <ne> <nb>'", 1)
    try:
        nv, ne, nb = (int(s) for s in head[1:])
    except ValueError:
        fail("header counts must be integers", 1)
    if len(lines) < 1 + nv + ne + nb:
        fail(f"file truncated: expected {1 + nv + ne + nb} lines", len(lines))

    def block(start, count, width, cast, what):
        out = np.empty((count, width), dtype=float if cast is float else np.int64)
        for r in range(count):
            ln = start + r
            parts = lines[ln].split()
            if len(parts) != width:
                fail(f"expected {width} {what} fields", ln + 1)
            try:
                out[r] = [cast(s) for s in parts]
            except ValueError:
                fail(f"bad {what} value", ln + 1)
        return out

    verts = block(1, nv, 2, float, "vertex")
    tris = block(1 + nv, ne, 3, int, "triangle")
    bnd = block(1 + nv + ne, nb, 3, int, "boundary edge")
    try:
        return MeshLevel(verts, tris, bnd[:, :2], bnd[:, 2])
    except InvalidGeometryError as err:
        raise MeshFormatError(str(err)) from err


def _read_gmsh(f, marker_map):
    lines = f.read().splitlines()
    sections = {}
    i = 0
    while i < len(lines):
        s = lines[i].strip()
        if s.startswith("$") and not s.startswith("$End"):
            name = s[1:]
            j = i + 1
            while j < len(lines) and lines[j].strip() != f"$End{name}":
                j += 1
            if j == len(lines):
                raise MeshFormatError(f"unterminated section ${name}", line=i + 1)
            sections[name] = (i + 1, lines[i + 1:j])
            i = j + 1
        else:
            i += 1

    if "MeshFormat" not in sections:
        raise MeshFormatError("missing $MeshFormat section", line=1)
    fmt_ln, fmt = sections["MeshFormat"]
    if not fmt or not fmt[0].split() or not fmt[0].split()[0].startswith("2.2"):
        raise MeshFormatError("only MSH 2.2 ASCII is supported", line=fmt_ln + 1)
    for name in ("Nodes", "Elements"):
        if name not in sections:
            raise MeshFormatError(f"missing ${name} section", line=1)

    node_ln, node_lines = sections["Nodes"]
    n_nodes = int(node_lines[0])
    ids = np.empty(n_nodes, dtype=np.int64)
    xy = np.empty((n_nodes, 2))
    for r in range(n_nodes):
        parts = node_lines[1 + r].split()
        if len(parts) < 4:
            raise MeshFormatError("node line needs 'id x y z'", line=node_ln + 2 + r)
        ids[r] = int(parts[0])
        xy[r] = [float(parts[1]), float(parts[2])]
    order = np.argsort(ids)
    ids, xy = ids[order], xy[order]
    lookup = {int(g): k for k, g in enumerate(ids)}

    elt_ln, elt_lines = sections["Elements"]
    n_elts = int(elt_lines[0])
    tris, bedges, bmarks = [], [], []
    for r in range(n_elts):
        ln = elt_ln + 2 + r
        parts = [int(s) for s in elt_lines[1 + r].split()]
        etype, ntags = parts[1], parts[2]
        phys = parts[3] if ntags >= 1 else 0
        conn = parts[3 + ntags:]
        if etype == 2:
            if len(conn) != 3:
                raise MeshFormatError("triangle needs 3 nodes", line=ln)
            tris.append([lookup[c] for c in conn])
        elif etype == 1:
            if len(conn) != 2:
                raise MeshFormatError("line element needs 2 nodes", line=ln)
            if phys not in marker_map:
                raise MeshFormatError(
                    f"no marker mapping for physical id {phys}", line=ln
                )
            bedges.append([lookup[c] for c in conn])
            bmarks.append(marker_map[phys])
        elif etype == 15:
            continue  # stray point elements are harmless
        else:
            raise MeshFormatError(f"unsupported element type {etype}", line=ln)

    tris = np.asarray(tris, dtype=np.int64)
    # gmsh does not promise orientation; flip clockwise triangles
    a = signed_areas(xy, tris)
    flip = a < 0
    tris[flip] = tris[flip][:, ::-1]
    try:
        return MeshLevel(xy, tris, np.asarray(bedges, dtype=np.int64).reshape(-1, 2),
                         np.asarray(bmarks, dtype=np.int64))
    except InvalidGeometryError as err:
        raise MeshFormatError(str(err)) from err


def mesh_to_string(mesh):
    buf = io.StringIO()
    buf.write(f"{_HEADER} {mesh.num_vertices} {mesh.num_triangles} "
              f"{mesh.boundary_edges.shape[0]}\n")
    for x, y in mesh.vertices:
        buf.write(f"{float(x)!r} {float(y)!r}\n")
    for i, j, k in mesh.triangles:
        buf.write(f"{int(i)} {int(j)} {int(k)}\n")
    for (i, j), m in zip(mesh.boundary_edges, mesh.boundary_markers):
        buf.write(f"{int(i)} {int(j)} {int(m)}\n")
    return buf.getvalue()


def load_base_fixture():
    """The shipped 412-triangle base mesh of the standard tunnel."""
    from importlib import resources

    ref = resources.files("shapeforge") / "fixtures" / "base412.mesh"
    with resources.as_file(ref) as p:
        return read_mesh(p)
