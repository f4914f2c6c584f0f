"""Next-step training with input noise and random point-cloud imputation.

Every training sample is one transition ``S_t -> S_{t+1}`` of a ground-truth
trajectory. Per sample a coin with probability ``imputation_prob`` decides
whether the point cloud observed at ``t`` is attached to the input graph, so a
single network learns both the grounded and the ungrounded step. Gaussian
noise perturbs the free mesh positions of the input, and the velocity target
is taken relative to the noisy input so the model learns to undo it.

Losses are mean squared errors of normalized velocities over free mesh nodes.
"""

from __future__ import annotations

import csv
import json
import queue
import threading
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .graph import SimGraph, batch_graphs, build_graph
from .model import ModelConfig, ModelParams, Normalizer, forward, init_params
from .truthsim import SystemState, Trajectory


class TrainingDiverged(RuntimeError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose ("init", "noise", ...) under one master seed."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 5e-4
    noise_std: float = 0.01
    imputation_prob: float = 0.5
    max_epochs: int = 20
    patience: int = 20
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    val_stride: int = 1
    norm_stride: int = 4
    prefetch: int = 0

    def __post_init__(self):
        if not 0.0 <= self.imputation_prob <= 1.0:
            raise ValueError("imputation_prob must lie in [0, 1]")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")
        if self.val_stride < 1 or self.norm_stride < 1:
            raise ValueError("strides must be positive")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        doc["model"] = ModelConfig.from_json(doc["model"])
        return cls(**doc)


@dataclass
class TrainSample:
    state: SystemState
    points: np.ndarray
    target: np.ndarray
    material: float

    @property
    def target_velocity(self) -> np.ndarray:
        return self.target - self.state.positions


def samples_from(trajectories: list[Trajectory], stride: int = 1) -> list[TrainSample]:
    out = []
    for tr in trajectories:
        if len(tr.point_clouds) != len(tr):
            raise ValueError("trajectory is missing point clouds")
        for t in range(0, len(tr) - 1, stride):
            out.append(TrainSample(tr.states[t], tr.point_clouds[t], tr.states[t + 1].positions, tr.material.nu))
    return out


def add_training_noise(sample: TrainSample, std: float, seed) -> TrainSample:
    """Perturb the free mesh positions of the input; the target stays clean.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if std < 0:
        raise ValueError("noise std must be non-negative")
    if std == 0:
        return sample
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = sample.state.positions
    noise = rng.normal(0.0, std, size=x.shape)
    noise[sample.state.static_mask] = 0.0
    return replace(sample, state=sample.state.with_positions(x + noise))


@dataclass
class StepRngs:
    imputation: np.random.Generator
    noise: np.random.Generator


def _as_rngs(rng) -> StepRngs:
    if isinstance(rng, StepRngs):
        return rng
    return StepRngs(rng, rng)


def prepare_batch(
    batch: list[TrainSample], cfg: TrainConfig, rng, counters: dict | None = None
) -> tuple[SimGraph, np.ndarray]:
    """Coin flips, noise and graph construction for one batch; returns graph and targets."""
    rngs = _as_rngs(rng)
    conn = cfg.model.connectivity_config()
    graphs, targets = [], []
    for smp in batch:
        grounded = bool(rngs.imputation.random() < cfg.imputation_prob)
        if counters is not None:
            key = "grounded" if grounded else "ungrounded"
            counters[key] = counters.get(key, 0) + 1
        noisy = add_training_noise(smp, cfg.noise_std, rngs.noise)
        mat = smp.material if cfg.model.material_feature else None
        g = build_graph(noisy.state, smp.points if grounded else None, conn, mat)
        graphs.append(g)
        targets.append(noisy.target_velocity[~noisy.state.static_mask])
    return batch_graphs(graphs), np.concatenate(targets)


def batch_loss(g: SimGraph, targets: np.ndarray, params: ModelParams) -> ad.Tensor:
    nrm = params.norm
    pred = forward(g, params)
    return ad.mse_loss(pred, (targets - nrm.out_mean) / nrm.out_std)


def train_step(batch, params: ModelParams, opt: ad.AdamState, cfg: TrainConfig, rng, counters=None, prepared=None):
    """One Adam step on a mini-batch; returns ``(loss, params)`` with params updated in place."""
    if not batch and prepared is None:
        raise ValueError("empty batch")
    g, targets = prepared if prepared is not None else prepare_batch(batch, cfg, rng, counters)
    tensors = params.tensors()
    with ad.Tape() as tape:
        loss = batch_loss(g, targets, params)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingDiverged(f"non-finite training loss {value} (batch of {len(targets)} target rows)")
    grads = tape.gradient(loss, tensors)
    for t, gr in zip(tensors, grads):
        if not np.all(np.isfinite(gr)):
            raise TrainingDiverged(f"non-finite gradient for {t.name}")
    ad.adam_step(tensors, grads, opt)
    return value, params


def fit_normalizer(samples: list[TrainSample], cfg: TrainConfig) -> Normalizer:
    """Feature and target statistics over every ``norm_stride``-th sample, both branches, noise on."""
    rng = substream(cfg.seed, "normalizer")
    conn = cfg.model.connectivity_config()
    nodes, edges, targets = [], [], []
    for smp in samples[:: cfg.norm_stride]:
        noisy = add_training_noise(smp, cfg.noise_std, rng)
        mat = smp.material if cfg.model.material_feature else None
        for pts in (None, smp.points):
            g = build_graph(noisy.state, pts, conn, mat)
            nodes.append(g.node_features())
            edges.append(g.edge_features())
        targets.append(noisy.target_velocity[~noisy.state.static_mask])
    return Normalizer.fit(np.concatenate(nodes), np.concatenate(edges), np.concatenate(targets))


def validation_loss(samples: list[TrainSample], params: ModelParams, cfg: TrainConfig) -> float:
    """Noise-free one-step loss, averaged over the plain and the point-cloud branch."""
    conn = cfg.model.connectivity_config()
    totals = []
    for grounded in (False, True):
        sq, count = 0.0, 0
        for i in range(0, len(samples), cfg.batch_size):
            chunk = samples[i : i + cfg.batch_size]
            graphs, targets = [], []
            for smp in chunk:
                mat = smp.material if cfg.model.material_feature else None
                graphs.append(build_graph(smp.state, smp.points if grounded else None, conn, mat))
                targets.append(smp.target_velocity[~smp.state.static_mask])
            tgt = np.concatenate(targets)
            pred = forward(batch_graphs(graphs), params).data
            diff = pred - (tgt - params.norm.out_mean) / params.norm.out_std
            sq += float((diff * diff).sum())
            count += diff.size
        totals.append(sq / count)
    return 0.5 * (totals[0] + totals[1])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    wall_time: float


@dataclass
class TrainReport:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    grounded_samples: int = 0
    ungrounded_samples: int = 0
    notes: str = "val_loss: noise-free 1-step MSE of normalized velocities, mean of plain and point-cloud graphs"

    @property
    def loss_trace(self) -> list[tuple[float, float]]:
        return [(r.train_loss, r.val_loss) for r in self.history]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_loss", "wall_time"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.wall_time:.3f}"])

    def summary(self) -> dict:
        return {
            "epochs_run": len(self.history),
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
            "grounded_samples": self.grounded_samples,
            "ungrounded_samples": self.ungrounded_samples,
            "train_losses": [r.train_loss for r in self.history],
            "val_losses": [r.val_loss for r in self.history],
            "notes": self.notes,
        }

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2) + "\n")


def _epoch_batches(samples, cfg: TrainConfig, order: np.ndarray, rngs: StepRngs, counters: dict):
    for i in range(0, len(order), cfg.batch_size):
        batch = [samples[j] for j in order[i : i + cfg.batch_size]]
        yield prepare_batch(batch, cfg, rngs, counters)


def _prefetched(gen, depth: int):
    """Run a batch generator on a helper thread with a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)
    done = object()

    def work():
        try:
            for item in gen:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(done)

    threading.Thread(target=work, daemon=True).start()
    while True:
        item = q.get()
        if item is done:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


def fit(train: list[Trajectory], val: list[Trajectory], cfg: TrainConfig, log=None) -> tuple[ModelParams, TrainReport]:
    """Train with early stopping; returns the best-validation parameters and a report."""
    if not train or not val:
        raise ValueError("training needs non-empty train and validation splits")
    train_samples = samples_from(train)
    val_samples = samples_from(val, cfg.val_stride)
    params = init_params(cfg.model, int(substream(cfg.seed, "init").integers(2**63)))
    params.norm = fit_normalizer(train_samples, cfg)
    report = TrainReport()
    if cfg.max_epochs == 0:
        return params, report

    opt = ad.AdamState.for_params(params.tensors(), lr=cfg.learning_rate)
    shuffle = substream(cfg.seed, "shuffle")
    rngs = StepRngs(substream(cfg.seed, "imputation"), substream(cfg.seed, "noise"))
    counters: dict = {}
    best = params.copy()
    since_best = 0
    start = time.perf_counter()
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle.permutation(len(train_samples))
        gen = _epoch_batches(train_samples, cfg, order, rngs, counters)
        if cfg.prefetch > 0:
            gen = _prefetched(gen, cfg.prefetch)
        total, rows = 0.0, 0
        for prepared in gen:
            loss, params = train_step(None, params, opt, cfg, rngs, prepared=prepared)
            n = len(prepared[1])
            total += loss * n
            rows += n
        val_loss = validation_loss(val_samples, params, cfg)
        rec = EpochRecord(epoch, total / rows, val_loss, time.perf_counter() - start)
        report.history.append(rec)
        if log:
            log(f"epoch {epoch:3d}  train {rec.train_loss:.5f}  val {val_loss:.5f}  {rec.wall_time:7.1f}s")
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best = params.copy()
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stopped_early = True
                break
    report.grounded_samples = counters.get("grounded", 0)
    report.ungrounded_samples = counters.get("ungrounded", 0)
    return best, report
