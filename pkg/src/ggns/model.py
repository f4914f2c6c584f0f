"""Message passing network that predicts per-node velocities.

Pipeline for one step: build the input graph, normalize its features, embed
nodes and edges with linear encoders, run ``num_blocks`` message passing
blocks, decode free mesh nodes to velocities and take one unit forward-Euler
step.

A block updates every edge from ``[receiver, sender, edge]`` latents, averages
the updated edges arriving at each node, updates the node from ``[node,
aggregate]`` and adds the block inputs back onto both streams. With edge
partitioning, edge kinds are split into groups (mesh, world/collider,
point-cloud) that get their own edge update; the node update then sees one
aggregate per group.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import RowIndex, Tensor
from .graph import (
    ConnectivityConfig,
    EdgeKind,
    SimGraph,
    build_graph,
    edge_feature_width,
    node_feature_width,
)
from .truthsim import SystemState

EDGE_GROUPS = (
    (EdgeKind.MESH_MESH,),
    (EdgeKind.COLLIDER_MESH, EdgeKind.WORLD_MESH_MESH),
    (EdgeKind.POINT_POINT, EdgeKind.POINT_MESH, EdgeKind.MESH_POINT),
)


class NonFiniteError(ArithmeticError):
    """A prediction produced NaN or infinite values."""


@dataclass(frozen=True)
class ModelConfig:
    latent_dim: int = 128
    num_blocks: int = 5
    mlp_layers: int = 1
    output_dim: int = 2
    aggregation: str = "mean"
    activation: str = "leaky_relu"
    residuals: bool = True
    edge_partitioning: bool = False
    connectivity: str = "full-graph"
    material_feature: bool = False

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be at least 1")
        if self.mlp_layers < 1:
            raise ValueError("mlp_layers must be at least 1")
        if self.output_dim < 1:
            raise ValueError("output_dim must be at least 1")
        if self.aggregation != "mean":
            raise ValueError("only mean aggregation is implemented")
        if self.activation != "leaky_relu":
            raise ValueError("only the leaky ReLU activation is implemented")
        ConnectivityConfig.preset(self.connectivity)

    @property
    def node_in(self) -> int:
        return node_feature_width(self.output_dim, int(self.material_feature))

    @property
    def edge_in(self) -> int:
        return edge_feature_width(self.output_dim)

    @property
    def edge_groups(self) -> int:
        return len(EDGE_GROUPS) if self.edge_partitioning else 1

    def connectivity_config(self) -> ConnectivityConfig:
        return ConnectivityConfig.preset(self.connectivity)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)


def _mlp_shapes(prefix: str, n_in: int, n_out: int, hidden: int, layers: int):
    widths = [n_in] + [hidden] * layers + [n_out]
    for k in range(len(widths) - 1):
        yield f"{prefix}.w{k}", (widths[k], widths[k + 1])
        yield f"{prefix}.b{k}", (widths[k + 1],)


def parameter_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    lat = cfg.latent_dim
    shapes = [
        ("enc_node.w", (cfg.node_in, lat)),
        ("enc_node.b", (lat,)),
        ("enc_edge.w", (cfg.edge_in, lat)),
        ("enc_edge.b", (lat,)),
    ]
    groups = cfg.edge_groups
    for b in range(cfg.num_blocks):
        for g in range(groups):
            shapes += _mlp_shapes(f"block{b}.edge{g}", 3 * lat, lat, lat, cfg.mlp_layers)
        shapes += _mlp_shapes(f"block{b}.node", (1 + groups) * lat, lat, lat, cfg.mlp_layers)
    shapes += _mlp_shapes("decoder", lat, cfg.output_dim, lat, cfg.mlp_layers)
    return shapes


@dataclass
class Normalizer:
    """Fixed feature and target statistics; stored with the weights but never trained."""

    node_mean: np.ndarray
    node_std: np.ndarray
    edge_mean: np.ndarray
    edge_std: np.ndarray
    out_mean: np.ndarray
    out_std: np.ndarray

    @classmethod
    def identity(cls, cfg: ModelConfig) -> "Normalizer":
        z = np.zeros
        o = np.ones
        return cls(z(cfg.node_in), o(cfg.node_in), z(cfg.edge_in), o(cfg.edge_in), z(cfg.output_dim), o(cfg.output_dim))

    @classmethod
    def fit(cls, node_x: np.ndarray, edge_x: np.ndarray, targets: np.ndarray, floor: float = 1e-8) -> "Normalizer":
        def stats(a):
            std = a.std(axis=0)
            return a.mean(axis=0), np.where(std > floor, std, 1.0)

        return cls(*stats(node_x), *stats(edge_x), *stats(targets))

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"norm.{k}": v for k, v in asdict(self).items()}


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, Tensor]
    norm: Normalizer = None

    def __post_init__(self):
        if self.norm is None:
            self.norm = Normalizer.identity(self.config)
        expected = parameter_shapes(self.config)
        if [k for k, _ in expected] != list(self.weights):
            raise ValueError("parameter names do not match the model configuration")
        for name, shape in expected:
            if self.weights[name].shape != shape:
                raise ad.ShapeError(f"{name}: expected {shape}, got {self.weights[name].shape}")

    def tensors(self) -> list[Tensor]:
        return list(self.weights.values())

    def count(self) -> int:
        return int(sum(t.size for t in self.weights.values()))

    def __getitem__(self, name: str) -> Tensor:
        return self.weights[name]

    def copy(self) -> "ModelParams":
        w = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.weights.items()}
        n = Normalizer(**{k: v.copy() for k, v in asdict(self.norm).items()})
        return ModelParams(self.config, w, n)

    def manifest(self) -> dict:
        return {"model": self.config.to_json(), "parameter_count": self.count()}

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {k: v.data for k, v in self.weights.items()}
        arrays.update(self.norm.arrays())
        meta = self.manifest()
        if extra_meta:
            meta.update(extra_meta)
        ad.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "ModelParams":
        arrays, meta = ad.load_checkpoint(path)
        cfg = ModelConfig.from_json(meta["model"])
        weights = {name: Tensor(arrays[name], requires_grad=True, name=name) for name, _ in parameter_shapes(cfg)}
        norm = Normalizer(**{k[len("norm.") :]: v for k, v in arrays.items() if k.startswith("norm.")})
        return cls(cfg, weights, norm)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """He-style uniform weights (fan-in), zero biases."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in parameter_shapes(cfg):
        if len(shape) == 2:
            bound = np.sqrt(6.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        weights[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams(cfg, weights)


def count_parameters(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for _, s in parameter_shapes(cfg)))


def write_manifest(path, cfg: ModelConfig) -> None:
    Path(path).write_text(json.dumps({"model": cfg.to_json(), "parameter_count": count_parameters(cfg)}, indent=2))


# ---------------------------------------------------------------------------
# forward pass


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ad.add_bias(ad.matmul(x, w), b)


def mlp(x: Tensor, params: ModelParams, prefix: str, layers: int) -> Tensor:
    for k in range(layers + 1):
        x = linear(x, params[f"{prefix}.w{k}"], params[f"{prefix}.b{k}"])
        if k < layers:
            x = ad.leaky_relu(x)
    return x


def embed(node_x, edge_x, params: ModelParams) -> tuple[Tensor, Tensor]:
    """Linear node and edge encoders."""
    node_x = node_x if isinstance(node_x, Tensor) else Tensor(node_x)
    edge_x = edge_x if isinstance(edge_x, Tensor) else Tensor(edge_x)
    if node_x.shape[1] != params["enc_node.w"].shape[0]:
        raise ad.ShapeError(f"node features have width {node_x.shape[1]}, encoder expects {params['enc_node.w'].shape[0]}")
    if edge_x.shape[1] != params["enc_edge.w"].shape[0]:
        raise ad.ShapeError(f"edge features have width {edge_x.shape[1]}, encoder expects {params['enc_edge.w'].shape[0]}")
    return (
        linear(node_x, params["enc_node.w"], params["enc_node.b"]),
        linear(edge_x, params["enc_edge.w"], params["enc_edge.b"]),
    )


@dataclass
class EdgeGroup:
    """Connectivity of one edge group, with index caches shared across blocks."""

    senders: RowIndex
    receivers: RowIndex

    @classmethod
    def build(cls, senders, receivers, num_nodes: int) -> "EdgeGroup":
        return cls(RowIndex(senders, num_nodes), RowIndex(receivers, num_nodes))


def _edge_update(hv: Tensor, he: Tensor, grp: EdgeGroup, params: ModelParams, prefix: str, layers: int) -> Tensor:
    # first layer on [receiver, sender, edge]: projecting nodes before the gather
    # equals the concatenated product but touches far fewer rows
    lat = hv.shape[1]
    w0 = params[f"{prefix}.w0"]
    z = ad.add(
        ad.add(
            ad.gather_rows(ad.matmul(hv, ad.slice_rows(w0, 0, lat)), grp.receivers),
            ad.gather_rows(ad.matmul(hv, ad.slice_rows(w0, lat, 2 * lat)), grp.senders),
        ),
        ad.matmul(he, ad.slice_rows(w0, 2 * lat, 3 * lat)),
    )
    x = ad.add_bias(z, params[f"{prefix}.b0"])
    for k in range(1, layers + 1):
        x = linear(ad.leaky_relu(x), params[f"{prefix}.w{k}"], params[f"{prefix}.b{k}"])
    return x


def message_passing_block(
    hv: Tensor, he: list[Tensor], groups: list[EdgeGroup], params: ModelParams, block: int
) -> tuple[Tensor, list[Tensor]]:
    """One block over node latents ``hv`` and per-group edge latents ``he``."""
    layers = params.config.mlp_layers
    n = hv.shape[0]
    new_edges = [_edge_update(hv, h, grp, params, f"block{block}.edge{k}", layers) for k, (h, grp) in enumerate(zip(he, groups))]
    aggs = [ad.scatter_mean(e, grp.receivers, n) for e, grp in zip(new_edges, groups)]
    new_nodes = mlp(ad.concat_cols([hv] + aggs), params, f"block{block}.node", layers)
    if params.config.residuals:
        return ad.add(hv, new_nodes), [ad.add(h, e) for h, e in zip(he, new_edges)]
    return new_nodes, new_edges


def decode(hv: Tensor, output_mask, params: ModelParams) -> Tensor:
    """Decoder MLP applied to the masked node rows only."""
    rows = np.flatnonzero(np.asarray(output_mask, dtype=bool))
    return mlp(ad.gather_rows(hv, rows), params, "decoder", params.config.mlp_layers)


def edge_partition(g: SimGraph, cfg: ModelConfig) -> list[np.ndarray]:
    """Edge row indices per group (one group holding everything when not partitioned)."""
    if not cfg.edge_partitioning:
        return [np.arange(g.num_edges)]
    return [np.flatnonzero(np.isin(g.edge_kind, np.asarray(kinds, dtype=g.edge_kind.dtype))) for kinds in EDGE_GROUPS]


def forward(g: SimGraph, params: ModelParams) -> Tensor:
    """Normalized velocities of the free mesh nodes of ``g``."""
    nrm = params.norm
    node_x = (g.node_features() - nrm.node_mean) / nrm.node_std
    edge_x = (g.edge_features() - nrm.edge_mean) / nrm.edge_std
    parts = edge_partition(g, params.config)
    groups = [EdgeGroup.build(g.senders[p], g.receivers[p], g.num_nodes) for p in parts]
    hv, he_all = embed(node_x, edge_x, params)
    he = [he_all] if len(parts) == 1 else [ad.gather_rows(he_all, p) for p in parts]
    for b in range(params.config.num_blocks):
        hv, he = message_passing_block(hv, he, groups, params, b)
    return decode(hv, g.output_mask, params)


def velocities(g: SimGraph, params: ModelParams) -> np.ndarray:
    """Physical per-step velocities for the free mesh nodes."""
    out = forward(g, params).data
    return out * params.norm.out_std + params.norm.out_mean


def integrate(s: SystemState, velocity: np.ndarray) -> SystemState:
    """Unit forward-Euler step; static nodes stay put and the collider follows its script."""
    v = np.asarray(velocity, dtype=np.float64)
    if v.shape != s.positions.shape:
        raise ad.ShapeError(f"need one velocity per mesh node, got {v.shape} for {s.positions.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("non-finite velocity")
    v = np.where(s.static_mask[:, None], 0.0, v)
    return s.with_positions(s.positions + v, s.collider_center + s.collider_velocity)


def predict_step(
    s: SystemState,
    points=None,
    params: ModelParams | None = None,
    material: float | None = None,
) -> SystemState:
    """One learned step; ``points`` (possibly empty) grounds the prediction."""
    cfg = params.config
    if cfg.material_feature and material is None:
        raise ValueError("this model needs the material value as an input")
    g = build_graph(s, points, cfg.connectivity_config(), material if cfg.material_feature else None)
    v = np.zeros_like(s.positions)
    v[g.output_mask[: len(v)]] = velocities(g, params)
    return integrate(s, v)
