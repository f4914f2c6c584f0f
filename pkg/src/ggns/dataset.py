"""Trajectory datasets: generation and a small versioned binary format.

A split file starts with ``b"GGNSDATA"`` followed by little-endian ``uint32``
fields ``version, dims, steps, count``. Each trajectory then stores

* material index (``uint8``) and a length-prefixed JSON blob of scenario params
* ``n_vertices, n_triangles`` (``uint32``), rest positions, triangles (``int64``)
  and the static mask (``uint8``)
* collider radius and velocity, then ``steps x n x dims`` vertex positions and
  ``steps x dims`` collider centres
* for every step a ``uint32`` point count followed by the coordinates

Floats are ``float64``. A ``dataset.json`` sidecar next to the split files
records the generating configuration and the per-split seeds.
"""

from __future__ import annotations

import io
import json
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .geometry import TriMesh
from .truthsim import (
    MATERIALS,
    CameraConfig,
    MaterialClass,
    PhysicsConfig,
    ScenarioConfig,
    SystemState,
    Trajectory,
    observe_trajectory,
    simulate_batch,
)

MAGIC = b"GGNSDATA"
VERSION = 1
SPLITS = ("train", "val", "test")
CHUNK = 16


class DatasetError(ValueError):
    pass


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _write_trajectory(buf: io.BytesIO, tr: Trajectory) -> None:
    s0 = tr.states[0]
    mesh = s0.mesh
    blob = json.dumps(tr.scenario, sort_keys=True).encode()
    buf.write(struct.pack("<BI", MATERIALS.index(tr.material), len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<II", mesh.num_vertices, len(mesh.triangles)))
    buf.write(_f64(mesh.rest_vertices))
    buf.write(np.ascontiguousarray(mesh.triangles, dtype="<i8").tobytes())
    buf.write(s0.static_mask.astype(np.uint8).tobytes())
    buf.write(_f64([s0.collider_radius]))
    buf.write(_f64(s0.collider_velocity))
    buf.write(_f64(tr.positions))
    buf.write(_f64(tr.collider_centers))
    clouds = tr.point_clouds or [np.empty((0, mesh.vertices.shape[1]))] * len(tr)
    for pc in clouds:
        buf.write(struct.pack("<I", len(pc)))
        buf.write(_f64(pc))


def write_split(path, trajectories: list[Trajectory]) -> None:
    if not trajectories:
        raise DatasetError("refusing to write an empty split")
    dims = trajectories[0].states[0].positions.shape[1]
    steps = len(trajectories[0])
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IIII", VERSION, dims, steps, len(trajectories)))
    for tr in trajectories:
        if len(tr) != steps:
            raise DatasetError("all trajectories in a split must have the same length")
        _write_trajectory(buf, tr)
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DatasetError("unexpected end of dataset file")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def floats(self, *shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)


def read_split(path) -> list[Trajectory]:
    r = _Reader(Path(path).read_bytes())
    if r.take(len(MAGIC)) != MAGIC:
        raise DatasetError(f"{path}: not a dataset file")
    version, dims, steps, count = r.unpack("<IIII")
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported dataset version {version}")
    out = []
    for _ in range(count):
        mat_idx, blob_len = r.unpack("<BI")
        params = json.loads(r.take(blob_len))
        n, nt = r.unpack("<II")
        rest = r.floats(n, dims)
        tris = np.frombuffer(r.take(8 * nt * 3), dtype="<i8").astype(np.int64).reshape(nt, 3)
        static = np.frombuffer(r.take(n), dtype=np.uint8).astype(bool)
        radius = float(r.floats(1)[0])
        cvel = r.floats(dims)
        pos = r.floats(steps, n, dims)
        centers = r.floats(steps, dims)
        clouds = []
        for _ in range(steps):
            (m,) = r.unpack("<I")
            clouds.append(r.floats(m, dims))
        base = TriMesh(pos[0], rest, tris)
        states = [SystemState(base, centers[0], radius, cvel, static)]
        for t in range(1, steps):
            states.append(states[0].with_positions(pos[t], centers[t]))
        out.append(Trajectory(states, MATERIALS[mat_idx], params, clouds))
    if r.pos != len(r.data):
        raise DatasetError(f"{path}: trailing bytes")
    return out


def split_seeds(seed: int, counts: tuple[int, int, int]) -> dict[str, list[int]]:
    """Scenario seeds per split, drawn from independent child streams of ``seed``."""
    children = np.random.SeedSequence(seed).spawn(len(SPLITS))
    seeds = {}
    for name, child, n in zip(SPLITS, children, counts):
        seeds[name] = [int(x) for x in child.generate_state(n, dtype=np.uint64) >> np.uint64(1)]
    flat = [s for v in seeds.values() for s in v]
    if len(set(flat)) != len(flat):
        raise DatasetError("seed streams collided; pick another master seed")
    return seeds


def _simulate_chunk(args):
    cfg, cam, seeds = args
    trs = simulate_batch(cfg, seeds)
    for tr, s in zip(trs, seeds):
        # observation noise gets its own stream, derived from the scenario seed
        observe_trajectory(tr, cam, seed=s ^ 0x5EED)
    return trs


def simulate_many(cfg: ScenarioConfig, cam: CameraConfig, seeds: list[int], workers: int = 1) -> list[Trajectory]:
    chunks = [(cfg, cam, seeds[i : i + CHUNK]) for i in range(0, len(seeds), CHUNK)]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_simulate_chunk, chunks))
    else:
        parts = [_simulate_chunk(c) for c in chunks]
    return [tr for part in parts for tr in part]


def config_to_json(cfg: ScenarioConfig, cam: CameraConfig) -> dict:
    return {"scenario": asdict(cfg), "camera": asdict(cam)}


def config_from_json(doc: dict) -> tuple[ScenarioConfig, CameraConfig]:
    sc = dict(doc["scenario"])
    sc["physics"] = PhysicsConfig(**sc["physics"])
    sc["radius_fraction"] = tuple(sc["radius_fraction"])
    cam = dict(doc["camera"])
    cam["origins"] = tuple(tuple(o) for o in cam["origins"])
    if cam.get("enabled") is not None:
        cam["enabled"] = tuple(cam["enabled"])
    return ScenarioConfig(**sc), CameraConfig(**cam)


def generate_dataset(
    out_dir,
    cfg: ScenarioConfig | None = None,
    counts: tuple[int, int, int] = (64, 16, 16),
    seed: int = 0,
    camera: CameraConfig | None = None,
    workers: int = 1,
) -> dict:
    """Simulate, observe and write all three splits; returns the sidecar document."""
    cfg = cfg or ScenarioConfig()
    camera = camera or CameraConfig()
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 1:
        raise DatasetError("need at least one trajectory per split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = split_seeds(seed, counts)
    summary = {}
    for name in SPLITS:
        trs = simulate_many(cfg, camera, seeds[name], workers)
        write_split(out / f"{name}.bin", trs)
        hist = {m.value: sum(tr.material is m for tr in trs) for m in MaterialClass}
        summary[name] = {"count": len(trs), "materials": hist}
    doc = {
        "format_version": VERSION,
        "master_seed": int(seed),
        "counts": dict(zip(SPLITS, counts)),
        "seeds": seeds,
        "summary": summary,
        **config_to_json(cfg, camera),
    }
    (out / "dataset.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def load_dataset(path) -> dict[str, list[Trajectory]]:
    root = Path(path)
    if not (root / "dataset.json").exists():
        raise DatasetError(f"{root}: missing dataset.json")
    return {name: read_split(root / f"{name}.bin") for name in SPLITS if (root / f"{name}.bin").exists()}


def worker_count(default: int = 1) -> int:
    """Worker pool size, overridable through ``GGNS_WORKERS``."""
    raw = os.environ.get("GGNS_WORKERS")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as exc:
        raise DatasetError(f"GGNS_WORKERS must be an integer, got {raw!r}") from exc
    return max(1, n)
