"""Spatial primitives: neighbourhood search, voxel subsampling, alpha shapes,
rasterized IoU, and convex-hull meshing.

Points are ``(n, d)`` float arrays. Polygons are lists of closed vertex loops,
each an ``(k, 2)`` array without the repeated first vertex; the filled region
follows the even-odd rule, so holes are just additional loops.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree


class GeometryError(ValueError):
    """Degenerate input geometry (too few points, all collinear, ...)."""


def as_points(p, dim: int | None = None) -> np.ndarray:
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 0:
        arr = arr.reshape(0, dim or 2)
    if arr.ndim != 2:
        raise ValueError(f"expected an (n, d) point array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


def radius_neighbors(a, b=None, r: float = 0.0) -> np.ndarray:
    """All index pairs ``(i, j)`` with ``|a[i] - b[j]| <= r``.

    With ``b`` omitted the search runs set-to-self: self pairs are dropped and
    the result is symmetric. Rows come back sorted lexicographically.
    """
    if r < 0:
        raise ValueError("radius must be non-negative")
    a = as_points(a)
    if b is None:
        if len(a) < 2:
            return np.empty((0, 2), dtype=np.int64)
        pairs = cKDTree(a).query_pairs(r, output_type="ndarray").astype(np.int64)
        pairs = np.concatenate([pairs, pairs[:, ::-1]])
    else:
        b = as_points(b, a.shape[1])
        if len(a) == 0 or len(b) == 0:
            return np.empty((0, 2), dtype=np.int64)
        hits = cKDTree(a).query_ball_tree(cKDTree(b), r)
        counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
        cols = np.fromiter((j for h in hits for j in h), dtype=np.int64, count=int(counts.sum()))
        pairs = np.stack([np.repeat(np.arange(len(a)), counts), cols], axis=1)
    if len(pairs) == 0:
        return np.empty((0, 2), dtype=np.int64)
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def voxel_subsample(points, cell: float) -> np.ndarray:
    """Replace the points of every occupied grid cell by their centroid.

    The grid is anchored at the origin; output rows are ordered by cell
    coordinate.
    """
    if cell <= 0:
        raise ValueError("voxel cell size must be positive")
    p = as_points(points)
    if len(p) == 0:
        return p.copy()
    keys = np.floor(p / cell).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.stack(
        [np.bincount(inverse, weights=p[:, k], minlength=len(counts)) for k in range(p.shape[1])], axis=1
    )
    return sums / counts[:, None]


# ---------------------------------------------------------------------------
# triangulation and alpha shapes


def _require_2d_nondegenerate(p: np.ndarray) -> None:
    if p.shape[1] != 2:
        raise GeometryError("only 2-d point sets are supported")
    if len(p) < 3:
        raise GeometryError(f"need at least 3 points, got {len(p)}")
    centered = p - p.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[1] <= 1e-12 * max(s[0], 1e-300):
        raise GeometryError("points are collinear")


def delaunay(points) -> np.ndarray:
    """Delaunay triangles as CCW-oriented index triples."""
    p = as_points(points)
    _require_2d_nondegenerate(p)
    try:
        tri = Delaunay(p)
    except QhullError as exc:
        raise GeometryError(str(exc)) from exc
    return orient_ccw(p, tri.simplices.astype(np.int64))


def signed_areas(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
    return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))


def orient_ccw(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    tris = tris.copy()
    flip = signed_areas(p, tris) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def circumradii(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
    la = np.linalg.norm(b - c, axis=1)
    lb = np.linalg.norm(c - a, axis=1)
    lc = np.linalg.norm(a - b, axis=1)
    area = np.abs(signed_areas(p, tris))
    with np.errstate(divide="ignore", invalid="ignore"):
        r = la * lb * lc / (4.0 * area)
    return np.where(area > 0, r, np.inf)


def boundary_loops(tris: np.ndarray) -> list[np.ndarray]:
    """Closed boundary loops (vertex indices) of a set of CCW triangles.

    Outer boundaries come out counter-clockwise and holes clockwise.
    """
    if len(tris) == 0:
        return []
    directed = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    # net multiplicity of each directed edge in the boundary chain; a
    # near-degenerate triangle with a flipped orientation then still cancels
    # cleanly and every vertex keeps in-degree == out-degree
    net: dict[tuple[int, int], int] = {}
    for i, j in directed.tolist():
        if i < j:
            net[(i, j)] = net.get((i, j), 0) + 1
        else:
            net[(j, i)] = net.get((j, i), 0) - 1
    outgoing: dict[int, list[int]] = {}
    for (i, j), c in sorted(net.items()):
        for _ in range(abs(c)):
            a, b = (i, j) if c > 0 else (j, i)
            outgoing.setdefault(a, []).append(b)
    for v in outgoing:
        outgoing[v].sort()
    loops = []
    while outgoing:
        start = min(outgoing)
        loop = [start]
        cur = start
        while True:
            nxt = outgoing[cur].pop(0)
            if not outgoing[cur]:
                del outgoing[cur]
            if nxt == start:
                break
            loop.append(nxt)
            cur = nxt
            if cur not in outgoing:  # unreachable with balanced degrees; defensive
                break
        loops.append(np.asarray(loop, dtype=np.int64))
    return loops


def triangle_sizes(p: np.ndarray, tris: np.ndarray) -> np.ndarray:
    """Alpha filtration value of each Delaunay triangle.

    The circumradius, clamped at the diameter of the point set. Below the
    diameter this is the plain circumradius rule; from the diameter on every
    triangle qualifies, so the shape becomes the convex hull even when the
    hull carries near-collinear slivers with huge circumradii.
    """
    r = circumradii(p, tris)
    used = p[np.unique(tris)]
    hull = used[ConvexHull(used).vertices] if len(used) >= 3 else used
    diam = float(np.sqrt(((hull[:, None] - hull[None]) ** 2).sum(-1).max()))
    # a relative margin keeps alpha == diameter inclusive whatever rounding the caller used
    return np.minimum(r, diam * (1.0 - 1e-9))


def alpha_shape_indices(points, alpha: float) -> list[np.ndarray]:
    """Index loops bounding the Delaunay triangles whose size (see :func:`triangle_sizes`) is <= alpha."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    p = as_points(points)
    tris = delaunay(p)
    return boundary_loops(tris[triangle_sizes(p, tris) <= alpha])


def alpha_shape_2d(points, alpha: float) -> list[np.ndarray]:
    """Alpha shape outline as coordinate loops (see :func:`alpha_shape_indices`)."""
    p = as_points(points)
    return [p[loop] for loop in alpha_shape_indices(p, alpha)]


def polygon_area(loops) -> float:
    """Signed shoelace area summed over loops (holes, being CW, subtract)."""
    total = 0.0
    for loop in loops:
        x, y = loop[:, 0], loop[:, 1]
        total += 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))
    return total


# ---------------------------------------------------------------------------
# rasterization and IoU


def raster_extent(*shapes, base: tuple[float, float] = (-1.0, 1.0)) -> tuple[float, float]:
    lo, hi = base
    for loops in shapes:
        for loop in loops:
            if len(loop):
                lo = min(lo, float(loop.min()))
                hi = max(hi, float(loop.max()))
    return lo, hi


def rasterize(loops, resolution: int, extent: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Boolean ``resolution x resolution`` occupancy of cell centres (even-odd rule).

    Row index follows y, column index follows x.
    """
    lo, hi = extent
    h = (hi - lo) / resolution
    crossings = np.zeros((resolution, resolution + 1), dtype=np.int64)
    ys = lo + (np.arange(resolution) + 0.5) * h
    for loop in loops:
        loop = np.asarray(loop, dtype=np.float64)
        if len(loop) < 3:
            continue
        p, q = loop, np.roll(loop, -1, axis=0)
        # rows whose centre line crosses each edge (half-open in y)
        above_p = p[:, 1][None, :] > ys[:, None]
        above_q = q[:, 1][None, :] > ys[:, None]
        rows, edges = np.nonzero(above_p != above_q)
        if rows.size == 0:
            continue
        py, qy = p[edges, 1], q[edges, 1]
        t = (ys[rows] - py) / (qy - py)
        x = p[edges, 0] + t * (q[edges, 0] - p[edges, 0])
        k = np.clip(np.ceil((x - lo) / h - 0.5), 0, resolution).astype(np.int64)
        np.add.at(crossings, (rows, k), 1)
    # cell c is inside when an odd number of crossings lie strictly to its right
    right = np.cumsum(crossings[:, ::-1], axis=1)[:, ::-1][:, 1:]
    return (right % 2) == 1


def polygon_iou(a, b, resolution: int = 512, extent: tuple[float, float] | None = None) -> float:
    """Intersection over union of two polygon sets by cell counting.

    The raster covers ``[-1, 1]^2``, widened to contain both shapes when they
    stick out. Two empty shapes have IoU 1.
    """
    if resolution < 64:
        raise ValueError("resolution must be at least 64")
    if extent is None:
        extent = raster_extent(a, b)
    ra = rasterize(a, resolution, extent)
    rb = rasterize(b, resolution, extent)
    union = np.count_nonzero(ra | rb)
    if union == 0:
        return 1.0
    return np.count_nonzero(ra & rb) / union


# ---------------------------------------------------------------------------
# meshes


@dataclass
class TriMesh:
    vertices: np.ndarray
    rest_vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.rest_vertices = np.asarray(self.rest_vertices, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.vertices.shape != self.rest_vertices.shape:
            raise ValueError("vertices and rest_vertices must have the same shape")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(i, j)`` with ``i < j``, sorted."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def boundary_edges(self) -> np.ndarray:
        t = self.triangles
        e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return uniq[counts == 1]

    @cached_property
    def boundary_loop_indices(self) -> list[np.ndarray]:
        return boundary_loops(orient_ccw(self.rest_vertices, self.triangles))

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.boundary_edges)

    def outline(self, positions: np.ndarray | None = None) -> list[np.ndarray]:
        """Boundary loops at the given (default: current) positions."""
        pos = self.vertices if positions is None else positions
        return [pos[loop] for loop in self.boundary_loop_indices]

    def with_vertices(self, vertices: np.ndarray) -> "TriMesh":
        m = TriMesh(vertices, self.rest_vertices, self.triangles)
        # topology-derived caches carry over
        for key in ("edges", "boundary_edges", "boundary_loop_indices", "boundary_vertices"):
            if key in self.__dict__:
                m.__dict__[key] = self.__dict__[key]
        return m

    def to_json(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "rest_vertices": self.rest_vertices.tolist(),
            "triangles": self.triangles.tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TriMesh":
        return cls(np.array(doc["vertices"]), np.array(doc["rest_vertices"]), np.array(doc["triangles"]))


def polygons_to_json(loops) -> list[list[list[float]]]:
    return [np.asarray(loop).tolist() for loop in loops]


def polygons_from_json(doc) -> list[np.ndarray]:
    return [np.asarray(loop, dtype=np.float64).reshape(-1, 2) for loop in doc]


def distance_to_segments(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point in ``p`` to the nearest of the segments ``a[k]-b[k]``."""
    ab = b - a
    ap = p[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab).sum(-1) / np.maximum((ab * ab).sum(-1), 1e-300), 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(p[:, None, :] - closest, axis=-1).min(axis=1)


def mesh_from_hull(points, target_edge_len: float) -> TriMesh:
    """Triangulate the convex hull of ``points`` at roughly the requested edge length."""
    if target_edge_len <= 0:
        raise ValueError("target edge length must be positive")
    p = as_points(points)
    _require_2d_nondegenerate(p)
    try:
        hull = ConvexHull(p)
    except QhullError as exc:
        raise GeometryError(str(exc)) from exc
    corners = p[hull.vertices]  # counter-clockwise in 2-d
    boundary = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        n = max(1, int(round(np.linalg.norm(b - a) / target_edge_len)))
        t = np.arange(n)[:, None] / n
        boundary.append(a + t * (b - a))
    boundary = np.concatenate(boundary)

    lo, hi = corners.min(axis=0), corners.max(axis=0)
    gx = np.arange(lo[0], hi[0] + target_edge_len, target_edge_len)
    gy = np.arange(lo[1], hi[1] + target_edge_len, target_edge_len)
    grid = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
    # inside test against the CCW hull: all half-plane cross products positive
    a, b = corners, np.roll(corners, -1, axis=0)
    cross = (b[:, 0] - a[:, 0])[None] * (grid[:, 1:2] - a[:, 1][None]) - (b[:, 1] - a[:, 1])[None] * (
        grid[:, 0:1] - a[:, 0][None]
    )
    inside = np.all(cross > 0, axis=1)
    grid = grid[inside]
    if len(grid):
        grid = grid[distance_to_segments(grid, a, b) >= 0.5 * target_edge_len]
    verts = np.concatenate([boundary, grid])
    tris = delaunay(verts)
    tris = tris[np.abs(signed_areas(verts, tris)) > 1e-12 * target_edge_len**2]
    return TriMesh(verts, verts.copy(), tris)


def median_edge_length(mesh: TriMesh) -> float:
    e = mesh.edges
    return float(np.median(np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)))
