"""Typed input graphs for the simulator.

A :class:`SimGraph` stores raw geometry (world positions, mesh-space rest
positions, node and edge kinds); feature matrices are derived from it on
demand, so a graph can be re-featurized after its positions are perturbed.

Node features: one-hot kind (3), static flag, collider velocity (d), plus
optional extra columns (the material value for the material-aware baseline).
Edge features: one-hot kind (6), world offset sender - receiver (d), world
distance, mesh-space offset (d) and mesh-space distance. The mesh-space slots
are only filled for mesh edges.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import radius_neighbors
from .truthsim import SystemState


class NodeKind(enum.IntEnum):
    MESH = 0
    COLLIDER = 1
    POINT = 2


class EdgeKind(enum.IntEnum):
    MESH_MESH = 0
    COLLIDER_MESH = 1
    WORLD_MESH_MESH = 2
    POINT_POINT = 3
    POINT_MESH = 4
    MESH_POINT = 5


N_NODE_KINDS = len(NodeKind)
N_EDGE_KINDS = len(EdgeKind)


def node_feature_width(dims: int = 2, extra: int = 0) -> int:
    return N_NODE_KINDS + 1 + dims + extra


def edge_feature_width(dims: int = 2) -> int:
    return N_EDGE_KINDS + 2 * (dims + 1)


# name -> (r_pp, r_mp, r_world)
SETTINGS = {
    "full-graph": (0.1, 0.08, 0.0),
    "equal-radii": (0.2, 0.2, 0.0),
    "reduced-graph": (0.0, 0.08, 0.0),
    "mgn-world": (0.0, 0.0, 0.35),
}


@dataclass(frozen=True)
class ConnectivityConfig:
    """Neighbourhood radii.

    ``r_collider`` sets the collider-to-mesh proximity edges. It is kept apart
    from ``r_mp`` so that the world-edge setting, which has no point edges,
    still sees the collider.
    """

    setting: str = "full-graph"
    r_pp: float = 0.1
    r_mp: float = 0.08
    r_world: float = 0.0
    r_collider: float = 0.08
    collider_bidirectional: bool = True
    collider_spacing: float | None = None

    def __post_init__(self):
        if min(self.r_pp, self.r_mp, self.r_world, self.r_collider) < 0:
            raise ValueError("radii must be non-negative")
        if self.collider_spacing is not None and self.collider_spacing <= 0:
            raise ValueError("collider spacing must be positive")

    @classmethod
    def preset(cls, name: str, **overrides) -> "ConnectivityConfig":
        if name not in SETTINGS:
            raise ValueError(f"unknown connectivity {name!r}; choose from {sorted(SETTINGS)}")
        r_pp, r_mp, r_world = SETTINGS[name]
        return cls(name, r_pp, r_mp, r_world, **overrides)


@dataclass
class SimGraph:
    positions: np.ndarray
    rest: np.ndarray
    node_kind: np.ndarray
    static: np.ndarray
    collider_velocity: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    edge_kind: np.ndarray
    extra: np.ndarray = field(default=None)
    graph_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.extra is None:
            self.extra = np.zeros((len(self.positions), 0))
        if not self.graph_sizes:
            self.graph_sizes = (len(self.positions),)

    @property
    def num_nodes(self) -> int:
        return len(self.positions)

    @property
    def num_edges(self) -> int:
        return len(self.senders)

    @property
    def dims(self) -> int:
        return self.positions.shape[1]

    @property
    def output_mask(self) -> np.ndarray:
        """Nodes whose motion is predicted: free mesh nodes."""
        return (self.node_kind == NodeKind.MESH) & ~self.static

    def node_features(self) -> np.ndarray:
        onehot = np.eye(N_NODE_KINDS)[self.node_kind]
        return np.concatenate([onehot, self.static[:, None].astype(np.float64), self.collider_velocity, self.extra], 1)

    def edge_features(self) -> np.ndarray:
        s, r = self.senders, self.receivers
        onehot = np.eye(N_EDGE_KINDS)[self.edge_kind].reshape(len(s), N_EDGE_KINDS)
        off = self.positions[s] - self.positions[r]
        dist = np.sqrt((off * off).sum(axis=1, keepdims=True))
        is_mesh = (self.edge_kind == EdgeKind.MESH_MESH)[:, None]
        moff = np.where(is_mesh, self.rest[s] - self.rest[r], 0.0)
        mdist = np.sqrt((moff * moff).sum(axis=1, keepdims=True))
        return np.concatenate([onehot, off, dist, moff, mdist], axis=1)

    def edges_of(self, *kinds: EdgeKind) -> np.ndarray:
        """``(k, 2)`` sender/receiver pairs of the given kinds."""
        sel = np.isin(self.edge_kind, np.asarray(kinds, dtype=self.edge_kind.dtype))
        return np.stack([self.senders[sel], self.receivers[sel]], axis=1)

    def with_positions(self, positions: np.ndarray) -> "SimGraph":
        return replace(self, positions=positions)

    def to_json(self) -> dict:
        """Debug dump for external viewers."""
        return {
            "node_kind": [NodeKind(k).name for k in self.node_kind],
            "positions": self.positions.tolist(),
            "static": self.static.tolist(),
            "senders": self.senders.tolist(),
            "receivers": self.receivers.tolist(),
            "edge_kind": [EdgeKind(k).name for k in self.edge_kind],
            "node_features": self.node_features().tolist(),
            "edge_features": self.edge_features().tolist(),
        }

    def dump_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)


def _directed(pairs: np.ndarray) -> np.ndarray:
    """Both directions of undirected pairs, sorted by (sender, receiver)."""
    both = np.concatenate([pairs, pairs[:, ::-1]]) if len(pairs) else pairs.reshape(0, 2)
    order = np.lexsort((both[:, 1], both[:, 0]))
    return both[order]


def collider_nodes(center: np.ndarray, radius: float, spacing: float) -> np.ndarray:
    """Points on the collider circle, roughly ``spacing`` apart."""
    count = max(8, int(np.ceil(2 * np.pi * radius / spacing)))
    ang = 2 * np.pi * np.arange(count) / count
    return center + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _append(g: SimGraph, pos, kind, edges: list[tuple[np.ndarray, EdgeKind]]) -> SimGraph:
    n_new = len(pos)
    d = g.dims
    senders = [g.senders] + [e[:, 0] for e, _ in edges]
    receivers = [g.receivers] + [e[:, 1] for e, _ in edges]
    kinds = [g.edge_kind] + [np.full(len(e), k, dtype=np.int8) for e, k in edges]
    return SimGraph(
        positions=np.concatenate([g.positions, pos]),
        rest=np.concatenate([g.rest, np.zeros((n_new, d))]),
        node_kind=np.concatenate([g.node_kind, np.full(n_new, kind, dtype=np.int8)]),
        static=np.concatenate([g.static, np.zeros(n_new, dtype=bool)]),
        collider_velocity=np.concatenate([g.collider_velocity, np.zeros((n_new, d))]),
        senders=np.concatenate(senders).astype(np.int64),
        receivers=np.concatenate(receivers).astype(np.int64),
        edge_kind=np.concatenate(kinds).astype(np.int8),
        extra=np.concatenate([g.extra, np.zeros((n_new, g.extra.shape[1]))]),
    )


def encode_state(
    s: SystemState,
    conn: ConnectivityConfig | None = None,
    material: float | None = None,
    positions: np.ndarray | None = None,
) -> SimGraph:
    """Graph of mesh nodes, collider boundary nodes, mesh edges and collider edges.

    ``positions`` overrides the mesh world positions (used for training noise).
    With ``material`` given, mesh nodes carry it as an extra feature column.
    """
    conn = conn or ConnectivityConfig()
    mesh = s.mesh
    x = mesh.vertices if positions is None else np.asarray(positions, dtype=np.float64)
    n, d = x.shape
    mesh_edges = _directed(mesh.edges)
    spacing = conn.collider_spacing
    if spacing is None:
        e = mesh.edges
        spacing = float(np.median(np.linalg.norm(mesh.rest_vertices[e[:, 0]] - mesh.rest_vertices[e[:, 1]], axis=1)))
    extra = np.zeros((n, 0)) if material is None else np.full((n, 1), float(material))
    g = SimGraph(
        positions=x,
        rest=np.asarray(mesh.rest_vertices, dtype=np.float64),
        node_kind=np.zeros(n, dtype=np.int8),
        static=np.asarray(s.static_mask, dtype=bool),
        collider_velocity=np.zeros((n, d)),
        senders=mesh_edges[:, 0].astype(np.int64),
        receivers=mesh_edges[:, 1].astype(np.int64),
        edge_kind=np.zeros(len(mesh_edges), dtype=np.int8),
        extra=extra,
    )
    cpos = collider_nodes(s.collider_center, s.collider_radius, spacing)
    edges = []
    if conn.r_collider > 0:
        pairs = radius_neighbors(cpos, x, conn.r_collider)  # (collider, mesh)
        c2m = np.stack([pairs[:, 0] + n, pairs[:, 1]], axis=1)
        if conn.collider_bidirectional:
            c2m = _directed(c2m)
        edges.append((c2m, EdgeKind.COLLIDER_MESH))
    g = _append(g, cpos, NodeKind.COLLIDER, edges)
    g.collider_velocity[n:] = s.collider_velocity
    if conn.r_world > 0:
        g = add_world_edges(g, conn.r_world)
    return g


def extend_with_point_cloud(g: SimGraph, points, conn: ConnectivityConfig | None = None) -> SimGraph:
    """Append point nodes plus point-point and point-mesh edges.

    An empty cloud returns ``g`` itself, so both imputation branches share one
    code path and one feature layout.
    """
    conn = conn or ConnectivityConfig()
    p = np.asarray(points, dtype=np.float64).reshape(-1, g.dims)
    if len(p) == 0:
        return g
    base = g.num_nodes
    mesh_idx = np.flatnonzero(g.node_kind == NodeKind.MESH)
    edges = []
    if conn.r_pp > 0:
        pp = radius_neighbors(p, r=conn.r_pp) + base
        edges.append((pp, EdgeKind.POINT_POINT))
    if conn.r_mp > 0:
        pm = radius_neighbors(p, g.positions[mesh_idx], conn.r_mp)
        p2m = np.stack([pm[:, 0] + base, mesh_idx[pm[:, 1]]], axis=1)
        edges.append((p2m, EdgeKind.POINT_MESH))
        edges.append((p2m[:, ::-1], EdgeKind.MESH_POINT))
    return _append(g, p, NodeKind.POINT, edges)


def add_world_edges(g: SimGraph, r_world: float) -> SimGraph:
    """Proximity edges between mesh nodes that are not already mesh neighbours."""
    if r_world <= 0:
        return g
    mesh_idx = np.flatnonzero(g.node_kind == NodeKind.MESH)
    pairs = radius_neighbors(g.positions[mesh_idx], r=r_world)
    pairs = mesh_idx[pairs]
    existing = g.edges_of(EdgeKind.MESH_MESH)
    n = g.num_nodes
    known = np.isin(pairs[:, 0] * n + pairs[:, 1], existing[:, 0] * n + existing[:, 1])
    return _append(g, np.zeros((0, g.dims)), NodeKind.MESH, [(pairs[~known], EdgeKind.WORLD_MESH_MESH)])


def build_graph(
    s: SystemState,
    points=None,
    conn: ConnectivityConfig | None = None,
    material: float | None = None,
    positions: np.ndarray | None = None,
) -> SimGraph:
    """``encode_state`` followed by the point-cloud extension when a cloud is given."""
    g = encode_state(s, conn, material, positions)
    if points is not None:
        g = extend_with_point_cloud(g, points, conn)
    return g


def batch_graphs(graphs: list[SimGraph]) -> SimGraph:
    """Disjoint union; node blocks keep their order."""
    if not graphs:
        raise ValueError("cannot batch zero graphs")
    if len(graphs) == 1:
        return graphs[0]
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
    return SimGraph(
        positions=np.concatenate([g.positions for g in graphs]),
        rest=np.concatenate([g.rest for g in graphs]),
        node_kind=np.concatenate([g.node_kind for g in graphs]),
        static=np.concatenate([g.static for g in graphs]),
        collider_velocity=np.concatenate([g.collider_velocity for g in graphs]),
        senders=np.concatenate([g.senders + o for g, o in zip(graphs, offsets)]),
        receivers=np.concatenate([g.receivers + o for g, o in zip(graphs, offsets)]),
        edge_kind=np.concatenate([g.edge_kind for g in graphs]),
        extra=np.concatenate([g.extra for g in graphs]),
        graph_sizes=tuple(g.num_nodes for g in graphs),
    )
