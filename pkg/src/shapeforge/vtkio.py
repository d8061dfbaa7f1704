"""Legacy ASCII VTK output (unstructured triangle grids with point data)
plus a minimal reader used for round-trip checks."""

from __future__ import annotations

import numpy as np


def vtk_string(mesh, point_vectors=None, point_scalars=None, displacement=None,
               title="shapeforge fields"):
    """Serialize a triangle mesh with nodal fields. When a displacement is
    given the points are written in the deformed configuration."""
    pts = np.asarray(mesh.vertices, dtype=float)
    if displacement is not None:
        pts = pts + np.asarray(displacement, dtype=float).reshape(-1, 2)
    tris = mesh.triangles
    out = []
    out.append("# vtk DataFile Version 3.0")
    out.append(title)
    out.append("ASCII")
    out.append("DATASET UNSTRUCTURED_GRID")
    out.append(f"POINTS {len(pts)} double")
    for x, y in pts:
        out.append(f"{float(x)!r} {float(y)!r} 0.0")
    out.append(f"CELLS {len(tris)} {4 * len(tris)}")
    for a, b, c in tris:
        out.append(f"3 {a} {b} {c}")
    out.append(f"CELL_TYPES {len(tris)}")
    out.extend(["5"] * len(tris))

    point_vectors = point_vectors or {}
    point_scalars = point_scalars or {}
    if point_vectors or point_scalars:
        out.append(f"POINT_DATA {len(pts)}")
    for name, data in point_vectors.items():
        arr = np.asarray(data, dtype=float)
        if arr.shape[1] == 2:
            arr = np.hstack([arr, np.zeros((len(arr), 1))])
        out.append(f"VECTORS {name} double")
        for row in arr:
            out.append(" ".join(repr(float(v)) for v in row))
    for name, data in point_scalars.items():
        arr = np.asarray(data, dtype=float).reshape(-1)
        out.append(f"SCALARS {name} double 1")
        out.append("LOOKUP_TABLE default")
        for v in arr:
            out.append(repr(float(v)))
    return "\n".join(out) + "\n"


def write_vtk(path, mesh, point_vectors=None, point_scalars=None,
              displacement=None, title="shapeforge fields"):
    with open(path, "w") as fh:
        fh.write(vtk_string(mesh, point_vectors, point_scalars, displacement,
                            title))


def read_vtk(path):
    """Parse points, triangles, and point data back from our own output."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    i = 0

    def next_line():
        nonlocal i
        while i < len(tokens) and not tokens[i].strip():
            i += 1
        line = tokens[i]
        i += 1
        return line

    header = [next_line() for _ in range(4)]
    if "UNSTRUCTURED_GRID" not in header[3]:
        raise ValueError("not an unstructured-grid VTK file")
    npts = int(next_line().split()[1])
    pts = np.array([[float(v) for v in next_line().split()] for _ in range(npts)])
    ncells = int(next_line().split()[1])
    tris = np.array([[int(v) for v in next_line().split()[1:]]
                     for _ in range(ncells)])
    for _ in range(ncells + 1):
        next_line()  # CELL_TYPES block
    vectors, scalars = {}, {}
    while i < len(tokens):
        line = tokens[i].strip()
        i += 1
        if not line:
            continue
        parts = line.split()
        if parts[0] == "POINT_DATA":
            continue
        if parts[0] == "VECTORS":
            data = np.array([[float(v) for v in next_line().split()]
                             for _ in range(npts)])
            vectors[parts[1]] = data
        elif parts[0] == "SCALARS":
            next_line()  # LOOKUP_TABLE
            scalars[parts[1]] = np.array(
                [float(next_line()) for _ in range(npts)])
        else:
            raise ValueError(f"unexpected VTK section {parts[0]!r}")
    return pts, tris, vectors, scalars
