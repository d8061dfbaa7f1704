import numpy as np
import pytest

from shapeforge.mesh import load_base_fixture
from shapeforge.optimizer import StepRecord
from shapeforge.report import (
    convergence_figure,
    field_figure,
    hausdorff_distance,
    obstacle_polyline,
    shape_figure,
)


def square_loop(side=1.0, center=(0.0, 0.0), n_per_edge=4):
    half = 0.5 * side
    corners = np.array([[-half, -half], [half, -half], [half, half],
                        [-half, half], [-half, -half]]) + center
    pts = []
    for a, b in zip(corners[:-1], corners[1:]):
        t = np.linspace(0.0, 1.0, n_per_edge, endpoint=False)
        pts.append(a + t[:, None] * (b - a))
    pts.append(corners[-1:])
    return np.vstack(pts)


def test_obstacle_polyline_closes(base_mesh):
    loop = obstacle_polyline(base_mesh)
    assert np.array_equal(loop[0], loop[-1])
    # six boundary edges around the unit square hole
    assert loop.shape == (7, 2)
    perimeter = np.linalg.norm(np.diff(loop, axis=0), axis=1).sum()
    assert perimeter == pytest.approx(4.0, rel=1e-12)
    assert np.abs(loop).max() == pytest.approx(0.5)


def test_obstacle_polyline_applies_displacement(base_mesh):
    w = np.tile([0.25, -0.5], (base_mesh.num_vertices, 1))
    moved = obstacle_polyline(base_mesh, displacement=w)
    plain = obstacle_polyline(base_mesh)
    assert np.abs(moved - plain - [0.25, -0.5]).max() < 1e-14


def test_hausdorff_identical_is_zero():
    loop = square_loop()
    assert hausdorff_distance(loop, loop) == 0.0


def test_hausdorff_translation_oracle():
    a = square_loop(n_per_edge=16)
    shift = 0.05
    b = square_loop(center=(shift, 0.0), n_per_edge=16)
    d = hausdorff_distance(a, b, spacing=1e-3)
    # for a pure x-shift of nested squares the farthest mismatch is the
    # shift itself, reached on the vertical edges
    assert d == pytest.approx(shift, abs=2e-3)


def test_hausdorff_is_symmetric_and_monotone():
    a = square_loop(n_per_edge=8)
    near = square_loop(center=(0.02, 0.0), n_per_edge=8)
    far = square_loop(center=(0.3, 0.0), n_per_edge=8)
    d_near = hausdorff_distance(a, near)
    d_far = hausdorff_distance(a, far)
    assert d_near == pytest.approx(hausdorff_distance(near, a), rel=1e-12)
    assert d_near < d_far


def fake_records():
    recs = []
    for k in range(12):
        recs.append(StepRecord(
            step=k, j_aug=3.0 * 0.9 ** k, j=2.5 * 0.9 ** k,
            g_def_norm=0.5 * 0.8 ** k, lambda_norm=0.1 * k, tau=2.0 ** (k // 4),
            min_det=0.95, grad_norm=0.3 * 0.7 ** k,
            event="tau" if k == 7 else ""))
    return recs


def test_convergence_figure_written(tmp_path):
    path = tmp_path / "conv.png"
    convergence_figure(fake_records(), path)
    assert path.is_file()
    assert path.stat().st_size > 1000


def test_shape_figure_written(tmp_path):
    path = tmp_path / "shapes.png"
    shape_figure([square_loop(), square_loop(1.2)], path,
                 labels=["before", "after"])
    assert path.is_file()
    assert path.stat().st_size > 1000


def test_field_figure_written(tmp_path):
    mesh = load_base_fixture()
    path = tmp_path / "field.png"
    values = np.hypot(*mesh.vertices.T)
    field_figure(mesh, values, path, title="speed")
    assert path.is_file()
    assert path.stat().st_size > 1000
