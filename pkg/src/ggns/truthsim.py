"""Synthetic 2-d ground truth: a trapezoidal soft plate pressed by a circular collider.

This stands in for a finite-element simulator. The plate is a triangle mesh
whose edges are springs; every triangle also carries an area-preservation
term whose stiffness is scaled by ``1 + nu``, where ``nu`` is a synthetic
Poisson-like coupling. With ``nu = -0.9`` the plate gives up area easily and
collapses under the collider; with ``nu = 0.49`` area is nearly conserved
and the plate bulges sideways instead. Contact is a penalty force, the
bottom row of nodes is pinned, and each recorded frame is relaxed with many
heavily damped semi-implicit Euler substeps, so the recorded motion is close
to quasi-static.

Point clouds are produced by casting rays from virtual cameras against the
plate outline; the collider occludes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import TriMesh, signed_areas, voxel_subsample


class SimulationDiverged(RuntimeError):
    pass


class MaterialClass(enum.Enum):
    AUXETIC = "auxetic"
    NEUTRAL = "neutral"
    INCOMPRESSIBLE = "incompressible"

    @property
    def nu(self) -> float:
        return _NU[self]

    @classmethod
    def from_nu(cls, nu: float) -> "MaterialClass":
        for m, v in _NU.items():
            if v == nu:
                return m
        raise ValueError(f"no material class with nu={nu}")


_NU = {MaterialClass.AUXETIC: -0.9, MaterialClass.NEUTRAL: 0.0, MaterialClass.INCOMPRESSIBLE: 0.49}
MATERIALS = tuple(MaterialClass)


@dataclass(frozen=True)
class PhysicsConfig:
    """Ground-truth material and integrator constants.

    Each recorded frame spans ``frame_dt`` time units split into ``substeps``
    semi-implicit Euler steps; damping is a linear drag on node velocity.
    """

    edge_stiffness: float = 1.0
    area_stiffness: float = 60.0
    contact_stiffness: float = 6000.0
    damping: float = 1.5
    node_mass: float = 1.0
    substeps: int = 200
    frame_dt: float = 4.0

    def __post_init__(self):
        if self.substeps < 1:
            raise ValueError("substeps must be at least 1")
        if min(self.edge_stiffness, self.node_mass, self.frame_dt) <= 0:
            raise ValueError("stiffness, mass and frame_dt must be positive")
        if min(self.area_stiffness, self.contact_stiffness, self.damping) < 0:
            raise ValueError("area/contact stiffness and damping must be non-negative")


@dataclass(frozen=True)
class ScenarioConfig:
    steps: int = 50
    grid: int = 9
    base_y: float = -0.6
    height: float = 0.5
    bottom_half_width: float = 0.6
    top_half_width: float = 0.4
    corner_jitter: float = 0.08
    radius_fraction: tuple[float, float] = (0.15, 0.60)
    start_gap: float = 0.02
    collider_travel: float = 0.30
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("a trajectory needs at least 2 steps")
        lo, hi = self.radius_fraction
        if not (0 < lo <= hi < 1):
            raise ValueError("radius fractions must lie in (0, 1)")
        if self.grid < 2:
            raise ValueError("grid needs at least 2 nodes per side")

    @property
    def collider_speed(self) -> float:
        return self.collider_travel / (self.steps - 1)


@dataclass
class SystemState:
    mesh: TriMesh
    collider_center: np.ndarray
    collider_radius: float
    collider_velocity: np.ndarray
    static_mask: np.ndarray
    node_velocity: np.ndarray | None = None

    def __post_init__(self):
        self.collider_center = np.asarray(self.collider_center, dtype=np.float64)
        self.collider_velocity = np.asarray(self.collider_velocity, dtype=np.float64)
        self.static_mask = np.asarray(self.static_mask, dtype=bool)
        if len(self.static_mask) != self.mesh.num_vertices:
            raise ValueError("static mask length must equal vertex count")
        if not self.collider_radius > 0:
            raise ValueError("collider radius must be positive")

    @property
    def positions(self) -> np.ndarray:
        return self.mesh.vertices

    def with_positions(self, positions: np.ndarray, collider_center=None) -> "SystemState":
        return SystemState(
            self.mesh.with_vertices(positions),
            self.collider_center if collider_center is None else collider_center,
            self.collider_radius,
            self.collider_velocity,
            self.static_mask,
            None,
        )


@dataclass
class Trajectory:
    states: list[SystemState]
    material: MaterialClass
    scenario: dict
    point_clouds: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def positions(self) -> np.ndarray:
        """``(T, n, 2)`` array of mesh positions."""
        return np.stack([s.positions for s in self.states])

    @property
    def collider_centers(self) -> np.ndarray:
        return np.stack([s.collider_center for s in self.states])


@dataclass(frozen=True)
class CameraConfig:
    origins: tuple[tuple[float, float], ...] = ((0.0, 1.6),)
    rays: int = 720
    noise_std: float = 0.0
    enabled: tuple[bool, ...] | None = None
    voxel_cell: float | None = 0.02
    fov_deg: float = 100.0
    collider_occludes: bool = True

    def __post_init__(self):
        if not 0 < self.fov_deg < 180:
            raise ValueError("field of view must lie in (0, 180) degrees")
        if self.rays < 8:
            raise ValueError("need at least 8 rays per camera")
        if self.noise_std < 0:
            raise ValueError("noise std must be non-negative")
        if self.enabled is not None and len(self.enabled) != len(self.origins):
            raise ValueError("one enable flag per camera")

    @classmethod
    def surround(cls, **kwargs) -> "CameraConfig":
        """Cameras on all four sides, for full outline coverage.

        The coarser default voxel cell keeps the cloud near the mesh vertex count.
        """
        kwargs.setdefault("voxel_cell", 0.05)
        return cls(origins=((0.0, 1.6), (-1.6, -0.3), (1.6, -0.3), (0.0, -1.9)), **kwargs)

    def active_origins(self) -> np.ndarray:
        flags = self.enabled or (True,) * len(self.origins)
        return np.array([o for o, on in zip(self.origins, flags) if on], dtype=np.float64).reshape(-1, 2)


# ---------------------------------------------------------------------------
# scenario construction


def plate_mesh(corners: np.ndarray, n: int) -> tuple[TriMesh, np.ndarray]:
    """Structured ``n x n`` triangulation of a quadrilateral.

    ``corners`` are bottom-left, bottom-right, top-right, top-left. Diagonals
    are mirrored about the vertical centre line. Returns the mesh and the
    static mask (bottom row).
    """
    bl, br, tr, tl = corners
    u = np.linspace(0.0, 1.0, n)
    verts = []
    for v in u:
        left = bl + v * (tl - bl)
        right = br + v * (tr - br)
        for s in u:
            verts.append(left + s * (right - left))
    verts = np.array(verts)
    tris = []
    half = (n - 1) / 2
    for j in range(n - 1):
        for i in range(n - 1):
            a, b = j * n + i, j * n + i + 1
            c, d = a + n, b + n
            if i < half:
                tris += [(a, b, d), (a, d, c)]
            else:
                tris += [(a, b, c), (b, d, c)]
    static = np.zeros(len(verts), dtype=bool)
    static[:n] = True
    return TriMesh(verts, verts.copy(), np.array(tris)), static


def generate_scenario(cfg: ScenarioConfig, seed: int, material: MaterialClass | None = None):
    """Initial state and material for one trajectory; fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    mat_draw = MATERIALS[int(rng.integers(len(MATERIALS)))]
    jit = rng.uniform(-cfg.corner_jitter, cfg.corner_jitter, size=6)
    y0, y1 = cfg.base_y, cfg.base_y + cfg.height
    corners = np.array(
        [
            [-cfg.bottom_half_width + jit[0], y0],
            [cfg.bottom_half_width + jit[1], y0],
            [cfg.top_half_width + jit[2], y1 + jit[3]],
            [-cfg.top_half_width + jit[4], y1 + jit[5]],
        ]
    )
    mesh, static = plate_mesh(corners, cfg.grid)
    top_len = float(np.linalg.norm(corners[2] - corners[3]))
    lo, hi = cfg.radius_fraction
    radius = float(rng.triangular(lo, 0.5 * (lo + hi), hi)) * top_len
    x = float(rng.uniform(corners[3, 0], corners[2, 0]))
    t = (x - corners[3, 0]) / (corners[2, 0] - corners[3, 0])
    surface_y = corners[3, 1] + t * (corners[2, 1] - corners[3, 1])
    center = np.array([x, surface_y + radius + cfg.start_gap])
    state = SystemState(mesh, center, radius, np.array([0.0, -cfg.collider_speed]), static, np.zeros_like(mesh.vertices))
    params = {
        "seed": int(seed),
        "corners": corners.tolist(),
        "collider_radius": radius,
        "collider_start": center.tolist(),
    }
    return state, (mat_draw if material is None else material), params


# ---------------------------------------------------------------------------
# dynamics


@dataclass
class _Rest:
    """Shared topology plus per-trajectory rest measures for a batch of plates."""

    edges: np.ndarray
    lengths: np.ndarray  # (B, E)
    tris: np.ndarray
    areas: np.ndarray  # (B, T)
    edge_scatter: sp.csr_matrix  # (n, E): +1 at j, -1 at i
    tri_scatter: sp.csr_matrix  # (n, 3T): one column per triangle corner


def _rest(meshes: list[TriMesh]) -> _Rest:
    first = meshes[0]
    e, t = first.edges, first.triangles
    for m in meshes[1:]:
        if m.triangles.shape != t.shape or not np.array_equal(m.triangles, t):
            raise ValueError("batched plates must share mesh topology")
    n, ne, nt = first.num_vertices, len(e), len(t)
    edge_scatter = sp.csr_matrix(
        (np.r_[np.ones(ne), -np.ones(ne)], (np.r_[e[:, 1], e[:, 0]], np.r_[np.arange(ne), np.arange(ne)])),
        shape=(n, ne),
    )
    tri_scatter = sp.csr_matrix((np.ones(3 * nt), (t.T.reshape(-1), np.arange(3 * nt))), shape=(n, 3 * nt))
    lengths = np.stack([np.linalg.norm(m.rest_vertices[e[:, 0]] - m.rest_vertices[e[:, 1]], axis=1) for m in meshes])
    areas = np.stack([signed_areas(m.rest_vertices, t) for m in meshes])
    return _Rest(e, lengths, t, areas, edge_scatter, tri_scatter)


def _scatter(mat: sp.csr_matrix, vals: np.ndarray) -> np.ndarray:
    """``mat @ vals`` for a ``(B, K, 2)`` stack; per-trajectory results do not depend on ``B``."""
    b, k, _ = vals.shape
    out = mat @ vals.transpose(1, 0, 2).reshape(k, 2 * b)
    return out.reshape(-1, b, 2).transpose(1, 0, 2)


def _elastic(x: np.ndarray, rest: _Rest, nu: np.ndarray, phys: PhysicsConfig) -> tuple[np.ndarray, np.ndarray]:
    """Batched forces ``(B, n, 2)`` and energies ``(B,)`` at positions ``x``."""
    i, j = rest.edges[:, 0], rest.edges[:, 1]
    d = x[:, i] - x[:, j]
    length = np.sqrt((d * d).sum(axis=2))
    stretch = (length - rest.lengths) / rest.lengths
    f = _scatter(rest.edge_scatter, (phys.edge_stiffness * stretch / length)[:, :, None] * d)
    energy = 0.5 * phys.edge_stiffness * (stretch * stretch * rest.lengths).sum(axis=1)

    k_area = phys.area_stiffness * (1.0 + nu)[:, None]
    xa, xb, xc = x[:, rest.tris[:, 0]], x[:, rest.tris[:, 1]], x[:, rest.tris[:, 2]]
    area = 0.5 * (
        (xb[..., 0] - xa[..., 0]) * (xc[..., 1] - xa[..., 1]) - (xb[..., 1] - xa[..., 1]) * (xc[..., 0] - xa[..., 0])
    )
    coef = k_area * (area - rest.areas) / rest.areas
    # d(area)/d(corner) is half the opposite side rotated by -90 degrees
    opp = np.concatenate([xb - xc, xc - xa, xa - xb], axis=1)
    grad = 0.5 * np.stack([opp[..., 1], -opp[..., 0]], axis=2)
    f = f - _scatter(rest.tri_scatter, np.tile(coef, 3)[:, :, None] * grad)
    energy = energy + 0.5 * (k_area * (area - rest.areas) ** 2 / rest.areas).sum(axis=1)
    return f, energy


def _contact(x: np.ndarray, center: np.ndarray, radius: np.ndarray, stiffness: float) -> np.ndarray:
    d = x - center[:, None, :]
    dist = np.sqrt((d * d).sum(axis=2))
    depth = radius[:, None] - dist
    mag = np.where(depth > 0, stiffness * depth / np.maximum(dist, 1e-12), 0.0)
    return mag[:, :, None] * d


def elastic_forces(x: np.ndarray, mesh: TriMesh, nu: float, phys: PhysicsConfig | None = None):
    """Internal forces ``(n, 2)`` and elastic energy of one plate at positions ``x``.

    Energy: springs ``k_e/2 * sum l0 * strain^2`` plus area terms
    ``k_a (1 + nu) / 2 * sum (A - A0)^2 / A0``.
    """
    f, e = _elastic(np.asarray(x, dtype=np.float64)[None], _rest([mesh]), np.array([nu]), phys or PhysicsConfig())
    return f[0], float(e[0])


def contact_forces(x: np.ndarray, center: np.ndarray, radius: float, stiffness: float) -> np.ndarray:
    """Radial penalty force pushing nodes out of the collider disk."""
    return _contact(np.asarray(x)[None], np.asarray(center)[None], np.array([radius]), stiffness)[0]


def elastic_energy(state: SystemState, nu: float, phys: PhysicsConfig | None = None) -> float:
    return elastic_forces(state.positions, state.mesh, nu, phys)[1]


def _advance(x, v, free, c0, cvel, radius, nu, rest, phys, dt):
    """Relax a batch of plates over one frame in place."""
    h = dt / phys.substeps
    for k in range(1, phys.substeps + 1):
        center = c0 + (k / phys.substeps) * cvel
        f, _ = _elastic(x, rest, nu, phys)
        f += _contact(x, center, radius, phys.contact_stiffness)
        v[:, free] += h * (f[:, free] / phys.node_mass - phys.damping * v[:, free])
        x[:, free] += h * v[:, free]
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise SimulationDiverged("non-finite node state in ground-truth step")


def step_truth(s: SystemState, nu: float, dt: float | None = None, phys: PhysicsConfig | None = None) -> SystemState:
    """Advance one recorded frame.

    The collider sweeps its per-frame displacement ``collider_velocity`` while
    the plate is integrated for ``dt`` units of physical time.
    """
    phys = phys or PhysicsConfig()
    dt = phys.frame_dt if dt is None else dt
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = s.positions.copy()[None]
    v = (np.zeros_like(s.positions) if s.node_velocity is None else s.node_velocity.copy())[None]
    _advance(
        x, v, ~s.static_mask, s.collider_center[None], s.collider_velocity[None],
        np.array([s.collider_radius]), np.array([nu]), _rest([s.mesh]), phys, dt,
    )
    out = s.with_positions(x[0], s.collider_center + s.collider_velocity)
    out.node_velocity = v[0]
    return out


def simulate_batch(
    cfg: ScenarioConfig, seeds, materials: list[MaterialClass | None] | None = None
) -> list[Trajectory]:
    """Simulate several scenarios in lock step.

    Vectorizing over trajectories amortizes interpreter overhead; every
    trajectory is bitwise identical to what :func:`simulate` returns for its
    seed alone.
    """
    seeds = list(seeds)
    materials = list(materials) if materials is not None else [None] * len(seeds)
    if len(materials) != len(seeds):
        raise ValueError("one material override per seed")
    if not seeds:
        return []
    starts = [generate_scenario(cfg, s, m) for s, m in zip(seeds, materials)]
    first = starts[0][0]
    rest = _rest([st.mesh for st, _, _ in starts])
    x = np.stack([st.positions for st, _, _ in starts])
    v = np.zeros_like(x)
    c = np.stack([st.collider_center for st, _, _ in starts])
    cvel = np.stack([st.collider_velocity for st, _, _ in starts])
    radius = np.array([st.collider_radius for st, _, _ in starts])
    nu = np.array([mat.nu for _, mat, _ in starts])
    free = ~first.static_mask
    states = [[st] for st, _, _ in starts]
    for _ in range(cfg.steps - 1):
        _advance(x, v, free, c, cvel, radius, nu, rest, cfg.physics, cfg.physics.frame_dt)
        c = c + cvel
        for b, seq in enumerate(states):
            nxt = seq[-1].with_positions(x[b].copy(), c[b].copy())
            nxt.node_velocity = v[b].copy()
            seq.append(nxt)
    return [Trajectory(seq, mat, params) for seq, (_, mat, params) in zip(states, starts)]


def simulate(cfg: ScenarioConfig, seed: int, material: MaterialClass | None = None) -> Trajectory:
    return simulate_batch(cfg, [seed], [material])[0]


def max_penetration(state: SystemState) -> float:
    dist = np.linalg.norm(state.positions - state.collider_center, axis=1)
    return float(max(0.0, (state.collider_radius - dist).max()))


# ---------------------------------------------------------------------------
# observation


def ray_directions(origin: np.ndarray, rays: int, fov_deg: float = 100.0) -> np.ndarray:
    """Evenly spread fan of unit directions from ``origin`` aimed at the scene centre."""
    to_center = -origin / max(np.linalg.norm(origin), 1e-12)
    base = np.arctan2(to_center[1], to_center[0])
    ang = base + np.deg2rad(np.linspace(-0.5 * fov_deg, 0.5 * fov_deg, rays))
    return np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _segment_hits(origin, dirs, a, b) -> np.ndarray:
    """Ray parameter of the nearest hit of each ray with segments ``a-b`` (inf if none)."""
    e = b - a  # (S, 2)
    w = a - origin  # (S, 2)
    denom = dirs[:, 0:1] * e[None, :, 1] - dirs[:, 1:2] * e[None, :, 0]  # (R, S)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[None, :, 0] * e[None, :, 1] - w[None, :, 1] * e[None, :, 0]) / denom
        u = (w[None, :, 0] * dirs[:, 1:2] - w[None, :, 1] * dirs[:, 0:1]) / denom
    ok = (np.abs(denom) > 1e-15) & (t > 0) & (u >= 0) & (u <= 1)
    return np.where(ok, t, np.inf).min(axis=1)


def _circle_hits(origin, dirs, center, radius) -> np.ndarray:
    oc = origin - center
    bq = dirs @ oc
    cq = oc @ oc - radius * radius
    disc = bq * bq - cq
    with np.errstate(invalid="ignore"):
        t = -bq - np.sqrt(disc)
    return np.where((disc >= 0) & (t > 0), t, np.inf)


def observe_point_cloud(s: SystemState, cam: CameraConfig | None = None, seed: int = 0) -> np.ndarray:
    """Raycast point cloud of the plate outline as seen by the cameras in ``cam``.

    Each ray keeps its nearest outline hit unless the collider is closer.
    Noise is added before voxel subsampling.
    """
    cam = cam or CameraConfig()
    rng = np.random.default_rng(seed)
    loops = s.mesh.outline()
    a = np.concatenate([loop for loop in loops])
    b = np.concatenate([np.roll(loop, -1, axis=0) for loop in loops])
    pts = []
    for origin in cam.active_origins():
        dirs = ray_directions(origin, cam.rays, cam.fov_deg)
        t_obj = _segment_hits(origin, dirs, a, b)
        if cam.collider_occludes:
            t_col = _circle_hits(origin, dirs, s.collider_center, s.collider_radius)
        else:
            t_col = np.full(len(dirs), np.inf)
        seen = np.isfinite(t_obj) & (t_obj < t_col)
        pts.append(origin + t_obj[seen, None] * dirs[seen])
    p = np.concatenate(pts) if pts else np.empty((0, 2))
    if cam.noise_std > 0 and len(p):
        p = p + rng.normal(0.0, cam.noise_std, size=p.shape)
    if cam.voxel_cell is not None and len(p):
        p = voxel_subsample(p, cam.voxel_cell)
    return p


def observe_trajectory(traj: Trajectory, cam: CameraConfig | None = None, seed: int = 0) -> Trajectory:
    ss = np.random.SeedSequence(seed)
    seeds = ss.generate_state(len(traj))
    traj.point_clouds = [observe_point_cloud(s, cam, int(k)) for s, k in zip(traj.states, seeds)]
    return traj
