import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from ggns.geometry import (
    GeometryError,
    TriMesh,
    alpha_shape_2d,
    alpha_shape_indices,
    boundary_loops,
    delaunay,
    mesh_from_hull,
    median_edge_length,
    polygon_area,
    polygon_iou,
    polygons_from_json,
    polygons_to_json,
    radius_neighbors,
    rasterize,
    signed_areas,
    triangle_sizes,
    circumradii,
    voxel_subsample,
)


def square(x0, y0, x1, y1):
    return [np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=float)]


def all_pairs(a, b, r, same):
    out = set()
    for i, p in enumerate(a):
        for j, q in enumerate(b):
            if same and i == j:
                continue
            if np.sqrt(((p - q) ** 2).sum()) <= r:
                out.add((i, j))
    return out


# -- radius_neighbors ---------------------------------------------------------


def test_zero_radius_distinct_points_is_empty():
    p = np.random.default_rng(0).uniform(-1, 1, (30, 2))
    assert radius_neighbors(p, r=0.0).shape == (0, 2)
    assert radius_neighbors(p, p + 1e-3, r=0.0).shape == (0, 2)


def test_two_close_points():
    p = np.array([[0.0, 0.0], [0.0, 0.05]])
    assert radius_neighbors(p, r=0.1).tolist() == [[0, 1], [1, 0]]
    assert radius_neighbors(p[:1], p[1:], r=0.1).tolist() == [[0, 0]]


@pytest.mark.parametrize("seed", range(3))
def test_radius_neighbors_matches_all_pairs(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, (200, 2))
    b = rng.uniform(-1, 1, (150, 2))
    got_self = {tuple(x) for x in radius_neighbors(a, r=0.1).tolist()}
    assert got_self == all_pairs(a, a, 0.1, same=True)
    got_cross = {tuple(x) for x in radius_neighbors(a, b, r=0.1).tolist()}
    assert got_cross == all_pairs(a, b, 0.1, same=False)


def test_radius_neighbors_symmetric_and_sorted():
    a = np.random.default_rng(5).uniform(-1, 1, (120, 2))
    pairs = radius_neighbors(a, r=0.2)
    s = {tuple(x) for x in pairs.tolist()}
    assert all((j, i) in s for i, j in s)
    assert pairs.tolist() == sorted(pairs.tolist())


def test_radius_neighbors_rejects_negative_radius():
    with pytest.raises(ValueError):
        radius_neighbors(np.zeros((2, 2)), r=-0.1)


# -- voxel_subsample ----------------------------------------------------------


def grouping_oracle(p, cell):
    groups = {}
    for q in p:
        key = tuple(int(np.floor(c / cell)) for c in q)
        groups.setdefault(key, []).append(q)
    return np.array([np.mean(groups[k], axis=0) for k in sorted(groups)])


def test_voxel_single_cell():
    p = np.array([[0.01, 0.01], [0.02, 0.03], [0.04, 0.0]])
    out = voxel_subsample(p, 0.05)
    assert out.shape == (1, 2)
    np.testing.assert_allclose(out[0], p.mean(axis=0))


def test_voxel_fine_cell_keeps_points():
    p = np.random.default_rng(1).uniform(-1, 1, (50, 2))
    dmin = min(np.linalg.norm(a - b) for a, b in itertools.combinations(p, 2))
    out = voxel_subsample(p, dmin / 2)
    assert sorted(map(tuple, out)) == sorted(map(tuple, p))


def test_voxel_matches_grouping_oracle():
    p = np.random.default_rng(2).uniform(-1, 1, (1000, 2))
    out = voxel_subsample(p, 0.05)
    ref = grouping_oracle(p, 0.05)
    assert out.shape == ref.shape
    # exact: both sum the members of a cell in input order
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 200),
    st.floats(0.01, 0.5),
    st.integers(0, 2**31 - 1),
)
def test_voxel_covers_inputs(n, cell, seed):
    p = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
    out = voxel_subsample(p, cell)
    assert len(out) <= n
    # a centroid lies in its own cell, so each member is within one cell diagonal
    d = np.linalg.norm(p[:, None] - out[None], axis=2).min(axis=1)
    assert np.all(d <= cell * np.sqrt(2) + 1e-12)


def test_voxel_centroid_can_exceed_half_diagonal():
    p = np.array([[0.001, 0.001], [0.002, 0.001], [0.099, 0.099]])
    out = voxel_subsample(p, 0.1)
    assert np.linalg.norm(p[2] - out[0]) > 0.1 * np.sqrt(2) / 2


# -- alpha shapes -------------------------------------------------------------


def test_alpha_square_is_hull():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    loops = alpha_shape_2d(sq, 10.0)
    assert len(loops) == 1
    assert sorted(map(tuple, loops[0])) == sorted(map(tuple, sq))
    assert polygon_area(loops) == pytest.approx(1.0)


def test_alpha_two_clusters_two_loops():
    rng = np.random.default_rng(3)
    a = rng.uniform(-0.1, 0.1, (40, 2)) + [-0.5, 0]
    b = rng.uniform(-0.1, 0.1, (40, 2)) + [0.5, 0]
    loops = alpha_shape_2d(np.vstack([a, b]), 0.1)
    assert len(loops) >= 2
    sides = {bool(np.all(loop[:, 0] < 0)) for loop in loops}
    assert sides == {True, False}


def test_alpha_collinear_raises():
    with pytest.raises(GeometryError):
        alpha_shape_2d(np.c_[np.linspace(0, 1, 10), np.linspace(0, 2, 10)], 1.0)
    with pytest.raises(GeometryError):
        alpha_shape_2d(np.zeros((2, 2)), 1.0)


@pytest.mark.parametrize("seed", range(50))
def test_alpha_at_diameter_is_hull(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(int(rng.integers(5, 60)), 2))
    diam = max(np.linalg.norm(a - b) for a, b in itertools.combinations(p, 2))
    loops = alpha_shape_indices(p, diam)
    assert len(loops) == 1
    assert set(loops[0].tolist()) == set(ConvexHull(p).vertices.tolist())


def test_alpha_c_shape():
    rng = np.random.default_rng(11)
    pts = []
    while len(pts) < 300:
        q = rng.uniform(-0.8, 0.8, 2)
        rad = np.hypot(*q)
        ang = np.arctan2(q[1], q[0])
        if 0.45 <= rad <= 0.8 and abs(ang) > 0.6:
            pts.append(q)
    p = np.array(pts)
    alpha = 0.15
    loops = alpha_shape_2d(p, alpha)
    hull = ConvexHull(p)
    assert polygon_area(loops) < hull.volume
    # containment by raster: every input point has an occupied cell within alpha
    res = 512
    grid = rasterize(loops, res)
    h = 2.0 / res
    rows, cols = np.nonzero(grid)
    centers = np.c_[-1 + (cols + 0.5) * h, -1 + (rows + 0.5) * h]
    from scipy.spatial import cKDTree

    d, _ = cKDTree(centers).query(p)
    assert np.all(d <= alpha + h)


def test_boundary_loops_orientation():
    p, tris = _annulus()
    loops = boundary_loops(tris)
    areas = sorted(polygon_area([p[loop]]) for loop in loops)
    # hole is clockwise, outer loop counter-clockwise
    assert len(areas) == 2 and areas[0] < 0 < areas[1]


def _annulus():
    ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    outer = np.c_[np.cos(ang), np.sin(ang)]
    inner = 0.5 * outer
    p = np.vstack([outer, inner])
    tris = []
    for k in range(16):
        a, b = k, (k + 1) % 16
        tris += [(a, b, 16 + b), (a, 16 + b, 16 + a)]
    return p, np.array(tris)


def test_delaunay_ccw():
    p = np.random.default_rng(4).uniform(size=(40, 2))
    assert np.all(signed_areas(p, delaunay(p)) > 0)


# -- polygon IoU --------------------------------------------------------------


def test_iou_identical_and_disjoint():
    a = square(-0.5, -0.5, 0.2, 0.3)
    assert polygon_iou(a, a) == 1.0
    assert polygon_iou(a, square(0.4, 0.4, 0.9, 0.9)) == 0.0
    assert polygon_iou([], []) == 1.0


def test_iou_two_squares():
    v = polygon_iou(square(0, 0, 1, 1), square(0.5, 0, 1.5, 1), resolution=512)
    assert abs(v - 1 / 3) <= 0.01


def test_iou_symmetric_and_monotone():
    base = square(-0.5, -0.5, 0.5, 0.5)
    prev = 1.0
    for shift in np.linspace(0.0, 1.0, 11):
        other = square(-0.5 + shift, -0.5, 0.5 + shift, 0.5)
        v = polygon_iou(base, other, resolution=256)
        assert v == polygon_iou(other, base, resolution=256)
        assert v <= prev + 1e-12
        prev = v


def test_iou_resolution_floor():
    with pytest.raises(ValueError):
        polygon_iou(square(0, 0, 1, 1), square(0, 0, 1, 1), resolution=32)


def test_rasterize_area_and_hole():
    p, tris = _annulus()
    loops = [p[loop] for loop in boundary_loops(tris)]
    grid = rasterize(loops, 512)
    area = grid.sum() * (2 / 512) ** 2
    assert area == pytest.approx(abs(polygon_area(loops)), rel=0.01)
    assert not grid[256, 256]


def test_polygon_json_roundtrip():
    loops = square(0, 0, 1, 1) + square(2, 2, 3, 4)
    back = polygons_from_json(polygons_to_json(loops))
    for x, y in zip(loops, back):
        np.testing.assert_array_equal(x, y)


# -- meshes -------------------------------------------------------------------


def test_mesh_from_square_coarse():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    m = mesh_from_hull(sq, 1.0)
    assert len(m.triangles) == 2
    np.testing.assert_array_equal(m.vertices, m.rest_vertices)


def test_mesh_from_square_fine():
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], dtype=float)
    m = mesh_from_hull(sq, 0.5)
    assert len(m.triangles) >= 8
    assert np.all((m.vertices >= -1e-12) & (m.vertices <= 1 + 1e-12))
    cent = m.vertices[m.triangles].mean(axis=1)
    assert np.all((cent > 0) & (cent < 1))
    assert abs(median_edge_length(m) - 0.5) <= 0.25 * 0.5


@pytest.mark.parametrize("seed", range(5))
def test_mesh_from_hull_inside(seed):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-0.8, 0.8, (60, 2))
    m = mesh_from_hull(p, 0.15)
    hull = ConvexHull(p)
    # every vertex satisfies all hull facet inequalities
    assert np.all(m.vertices @ hull.equations[:, :2].T + hull.equations[:, 2] <= 1e-9)
    assert abs(median_edge_length(m) - 0.15) <= 0.25 * 0.15
    assert np.all(signed_areas(m.vertices, m.triangles) > 0)


def test_mesh_from_hull_degenerate():
    with pytest.raises(GeometryError):
        mesh_from_hull(np.c_[np.arange(5.0), np.arange(5.0)], 0.5)


def test_trimesh_boundary_edges_single_use():
    p, tris = _annulus()
    m = TriMesh(p, p.copy(), tris)
    counts = {}
    for t in tris:
        for a, b in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            key = (min(a, b), max(a, b))
            counts[key] = counts.get(key, 0) + 1
    once = {k for k, c in counts.items() if c == 1}
    assert {tuple(sorted(e)) for e in m.boundary_edges.tolist()} == once
    assert len(m.edges) == len(counts)


def test_trimesh_validation_and_json():
    p, tris = _annulus()
    with pytest.raises(ValueError):
        TriMesh(p, p[:-1], tris)
    with pytest.raises(ValueError):
        TriMesh(p, p, tris + 100)
    m = TriMesh(p, p * 2, tris)
    back = TriMesh.from_json(m.to_json())
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.rest_vertices, m.rest_vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)


def test_boundary_loops_with_flipped_sliver():
    # square split into two triangles plus a zero-area sliver listed with the
    # opposite orientation; the boundary chain must still close into one loop
    tris = np.array([[0, 1, 2], [0, 2, 3], [0, 4, 1]])
    loops = boundary_loops(tris)
    assert all(len(l) >= 3 for l in loops)
    p = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.0]], float)
    assert polygon_area([p[l] for l in loops]) == pytest.approx(1.0)
    # every traced loop closes: in-degree equals out-degree at each vertex
    for l in loops:
        assert len(set(zip(l, np.roll(l, -1)))) == len(l)


def test_triangle_sizes_are_circumradii_below_diameter():
    rng = np.random.default_rng(4)
    p = rng.uniform(size=(40, 2))
    tris = delaunay(p)
    diam = max(np.linalg.norm(a - b) for a, b in itertools.combinations(p, 2))
    r = circumradii(p, tris)
    s = triangle_sizes(p, tris)
    small = r < 0.99 * diam
    np.testing.assert_array_equal(s[small], r[small])
    assert np.all(s <= diam)


def test_alpha_keeps_dent_smaller_than_radius():
    # outline of a rectangle with a circular bite of radius 0.3 out of the top
    t = np.linspace(0, 1, 40, endpoint=False)
    bottom = np.c_[-0.6 + 1.2 * t, np.full_like(t, -0.5)]
    right = np.c_[np.full_like(t, 0.6), -0.5 + 0.5 * t]
    left = np.c_[np.full_like(t, -0.6), -0.5 + 0.5 * t]
    top = np.c_[-0.6 + 1.2 * t, np.zeros_like(t)]
    top = top[np.abs(top[:, 0]) > 0.28]
    ang = np.linspace(np.pi, 2 * np.pi, 30)
    bite = np.c_[0.3 * np.cos(ang), 0.1 + 0.3 * np.sin(ang)]
    bite = bite[bite[:, 1] < 0]
    pts = np.vstack([bottom, right, left, top, bite])
    outline = polygon_area(alpha_shape_2d(pts, 0.29))
    hull = polygon_area(alpha_shape_2d(pts, 100.0))
    assert outline < hull - 0.02
