import numpy as np
import pytest

from shapeforge.mesh import (
    INFLOW,
    OBSTACLE,
    OUTFLOW,
    WALL,
    DomainSpec,
    InvalidGeometryError,
    MeshFormatError,
    boundary_vertices,
    fluid_area,
    generate_reference_mesh,
    hierarchy_from_base,
    load_base_fixture,
    mesh_to_string,
    read_mesh,
    refine_uniform,
    structured_mesh,
    vertex_marker_ownership,
    write_mesh,
)


def shoelace_area(mesh):
    # independent of the signed_areas helper on purpose
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    cross = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) \
        - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    return cross / 2.0


def test_fixture_counts(base_mesh):
    assert base_mesh.num_vertices == 238
    assert base_mesh.num_triangles == 412
    assert len(base_mesh.boundary_edges) == 64
    counts = {m: int(np.sum(base_mesh.boundary_markers == m))
              for m in (INFLOW, OUTFLOW, WALL, OBSTACLE)}
    assert counts == {INFLOW: 13, OUTFLOW: 13, WALL: 32, OBSTACLE: 6}


def test_fixture_area_and_orientation(base_mesh):
    areas = shoelace_area(base_mesh)
    assert np.all(areas > 0)
    # tunnel 14 x 6 minus the unit square obstacle
    assert abs(areas.sum() - 83.0) < 1e-12
    assert abs(fluid_area(base_mesh) - 83.0) < 1e-12


def test_fixture_is_symmetric(base_mesh):
    # barycenter of the fluid region sits at the origin
    a = shoelace_area(base_mesh)
    centroids = base_mesh.vertices[base_mesh.triangles].mean(axis=1)
    bc = (a[:, None] * centroids).sum(axis=0) / a.sum()
    assert np.abs(bc).max() < 1e-12


def test_refinement_counts_and_area(base_mesh):
    hier = hierarchy_from_base(base_mesh, refinements=2)
    sizes = [lv.num_triangles for lv in hier.levels]
    assert sizes == [412, 1648, 6592]
    for lv in hier.levels:
        assert abs(shoelace_area(lv).sum() - 83.0) < 1e-12
        assert np.all(shoelace_area(lv) > 0)
    # vertex count after refinement is old vertices plus old edges
    for coarse, fine in zip(hier.levels, hier.levels[1:]):
        assert fine.num_vertices == coarse.num_vertices + coarse.num_edges


def test_refinement_parent_arrays(base_mesh):
    hier = hierarchy_from_base(base_mesh, refinements=1)
    coarse, fine = hier.levels
    pv = hier.parent_vertex[1]
    pe = hier.parent_edge[1]
    nvc = coarse.num_vertices
    # old vertices keep their ids and coordinates
    assert np.array_equal(pv[:nvc], np.arange(nvc))
    assert np.allclose(fine.vertices[:nvc], coarse.vertices)
    # appended vertices are edge midpoints ordered by coarse edge id
    mids = 0.5 * (coarse.vertices[coarse.edges[:, 0]]
                  + coarse.vertices[coarse.edges[:, 1]])
    assert np.allclose(fine.vertices[nvc:], mids)
    assert np.array_equal(pe[nvc:], np.arange(coarse.num_edges))
    assert np.all(pv[nvc:] == -1)


def test_refinement_marker_inheritance(base_mesh):
    fine = refine_uniform(hierarchy_from_base(base_mesh)).finest
    for marker in (INFLOW, OUTFLOW, WALL, OBSTACLE):
        coarse_count = int(np.sum(base_mesh.boundary_markers == marker))
        fine_count = int(np.sum(fine.boundary_markers == marker))
        assert fine_count == 2 * coarse_count


def test_hierarchy_element_growth(base_mesh):
    hier = hierarchy_from_base(base_mesh, refinements=4)
    assert hier.finest.num_triangles == 412 * 4 ** 4 == 105472


@pytest.mark.slow
def test_deep_hierarchy(base_mesh):
    hier = hierarchy_from_base(base_mesh, refinements=6)
    assert hier.finest.num_triangles == 1687552
    assert abs(shoelace_area(hier.finest).sum() - 83.0) < 1e-9


def test_native_round_trip(tmp_path, base_mesh):
    path = tmp_path / "mesh.mesh"
    write_mesh(base_mesh, path)
    again = read_mesh(path)
    assert np.array_equal(again.vertices, base_mesh.vertices)
    assert np.array_equal(again.triangles, base_mesh.triangles)
    assert np.array_equal(again.boundary_edges, base_mesh.boundary_edges)
    assert np.array_equal(again.boundary_markers, base_mesh.boundary_markers)
    # serialization is reproducible byte for byte
    assert mesh_to_string(again) == mesh_to_string(base_mesh)


def test_native_format_errors(tmp_path):
    bad = tmp_path / "bad.mesh"
    bad.write_text("mesh2d 3 1\n")
    with pytest.raises(MeshFormatError):
        read_mesh(bad)
    bad.write_text("wrong-header 1 2 3\n")
    with pytest.raises(MeshFormatError) as err:
        read_mesh(bad)
    assert err.value.line == 1


GMSH_SAMPLE = """$MeshFormat
2.2 0 8
$EndMeshFormat
$Nodes
4
1 0 0 0
2 1 0 0
3 1 1 0
4 0 1 0
$EndNodes
$Elements
6
1 1 2 10 1 1 2
2 1 2 10 2 2 3
3 1 2 10 3 3 4
4 1 2 10 4 4 1
5 2 2 1 1 1 2 3
6 2 2 1 1 1 3 4
$EndElements
"""


def test_gmsh_reader(tmp_path):
    path = tmp_path / "square.msh"
    path.write_text(GMSH_SAMPLE)
    markers = {10: WALL}
    mesh = read_mesh(path, fmt="gmsh", gmsh_markers=markers)
    assert mesh.num_vertices == 4
    assert mesh.num_triangles == 2
    assert np.all(mesh.boundary_markers == WALL)
    assert abs(shoelace_area(mesh).sum() - 1.0) < 1e-14


def test_gmsh_reader_requires_markers(tmp_path):
    path = tmp_path / "square.msh"
    path.write_text(GMSH_SAMPLE)
    with pytest.raises(MeshFormatError):
        read_mesh(path, fmt="gmsh", gmsh_markers={99: WALL})


def test_boundary_vertices_and_ownership(base_mesh):
    own = vertex_marker_ownership(base_mesh)
    verts = base_mesh.vertices
    left_bottom = np.where((verts[:, 0] == -7.0) & (verts[:, 1] == -3.0))[0][0]
    right_bottom = np.where((verts[:, 0] == 7.0) & (verts[:, 1] == -3.0))[0][0]
    # the inflow owns its corners, the wall beats the outflow
    assert own[left_bottom] == INFLOW
    assert own[right_bottom] == WALL
    obs = boundary_vertices(base_mesh, OBSTACLE)
    assert obs.size == 6
    assert np.all(np.abs(verts[obs]).max(axis=1) <= 0.5 + 1e-14)


def test_structured_mesh_markers():
    mesh = structured_mesh(DomainSpec(),
                           np.array([-7.0, -0.5, 0.5, 7.0]),
                           np.array([-3.0, -0.5, 0.5, 3.0]))
    for marker in (INFLOW, OUTFLOW, WALL, OBSTACLE):
        assert np.any(mesh.boundary_markers == marker)
    xs = mesh.vertices[:, 0]
    inflow_edges = mesh.boundary_edges[mesh.boundary_markers == INFLOW]
    assert np.all(xs[inflow_edges] == -7.0)


def test_generate_reference_mesh_size():
    mesh = generate_reference_mesh()
    assert 280 <= mesh.num_triangles <= 520
    assert abs(fluid_area(mesh) - 83.0) < 1e-12


def test_domain_validation():
    with pytest.raises(InvalidGeometryError):
        DomainSpec(obstacle=(-8.0, 0.5, -0.5, 0.5))
    with pytest.raises(InvalidGeometryError):
        DomainSpec(obstacle=(0.5, -0.5, -0.5, 0.5))
