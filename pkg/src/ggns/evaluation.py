"""Rollouts with periodic grounding and the metrics computed on them.

Grounding schedule: with interval ``k`` the point cloud observed at step ``t``
is attached whenever ``t % k == 0`` (so always at ``t = 0``); ``k = inf``
never attaches one. Only the initial mesh state is taken from the ground
truth. Position errors are averaged per node and per coordinate.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .geometry import GeometryError, alpha_shape_2d, polygon_iou
from .model import ModelParams, NonFiniteError, predict_step
from .truthsim import SystemState, Trajectory

INF = math.inf
# squared diagonal of the bounded scene [-1.2, 1.2]^2, charged per step after divergence
DIVERGED_MSE = (2.4 * math.sqrt(2.0)) ** 2

Predictor = Callable[[SystemState, "np.ndarray | None"], SystemState]


def parse_k(text) -> float:
    s = str(text).strip().lower()
    if s in ("inf", "infinity", "none", "never"):
        return INF
    k = int(s)
    if k < 1:
        raise ValueError("grounding interval must be >= 1 or inf")
    return k


def k_label(k) -> str:
    return "inf" if k == INF else str(int(k))


@dataclass(frozen=True)
class RolloutConfig:
    ks: tuple = (1, 2, 5, 10, INF)
    m: int = 5
    resolution: int = 256
    alpha: float = 0.3
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self):
        for k in self.ks:
            if not (k == INF or (int(k) == k and k >= 1)):
                raise ValueError(f"invalid grounding interval {k}")
        if self.m < 0:
            raise ValueError("m must be non-negative")
        if self.resolution < 64:
            raise ValueError("IoU resolution must be at least 64")


def grounded_at(t: int, k) -> bool:
    return k != INF and t % int(k) == 0


def model_predictor(params: ModelParams, material: float | None = None) -> Predictor:
    return lambda s, pts: predict_step(s, pts, params, material)


def _predictor(model, trajectory: Trajectory) -> Predictor:
    if isinstance(model, ModelParams):
        mat = trajectory.material.nu if model.config.material_feature else None
        return model_predictor(model, mat)
    return model


@dataclass
class Rollout:
    states: list[SystemState]
    k: float
    diverged_at: int | None = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None

    @property
    def positions(self) -> np.ndarray:
        return np.stack([s.positions for s in self.states])


def rollout(model, trajectory: Trajectory, k=INF, steps: int | None = None) -> Rollout:
    """Autoregressive prediction from the first true state.

    ``model`` is a :class:`ModelParams` or any ``(state, points) -> state``
    callable. A non-finite prediction ends the rollout early and is flagged.
    """
    step = _predictor(model, trajectory)
    steps = len(trajectory) if steps is None else steps
    s = trajectory.states[0]
    out = [s]
    for t in range(steps - 1):
        pts = trajectory.point_clouds[t] if grounded_at(t, k) else None
        try:
            s = step(s, pts)
        except NonFiniteError:
            return Rollout(out, k, diverged_at=t + 1)
        if not np.all(np.isfinite(s.positions)):
            return Rollout(out, k, diverged_at=t + 1)
        out.append(s)
    return Rollout(out, k)


def _as_positions(seq) -> np.ndarray:
    if isinstance(seq, Rollout):
        return seq.positions
    if isinstance(seq, Trajectory):
        return seq.positions
    if len(seq) and isinstance(seq[0], SystemState):
        return np.stack([s.positions for s in seq])
    return np.asarray(seq, dtype=np.float64)


def rollout_mse(pred, truth) -> float:
    """Mean over steps, nodes and coordinates of squared position error."""
    p, t = _as_positions(pred), _as_positions(truth)
    if p.shape != t.shape:
        raise ValueError(f"sequence shapes differ: {p.shape} vs {t.shape}")
    d = p - t
    return float(np.mean(np.mean(d * d, axis=(1, 2))))


def capped_rollout_mse(r: Rollout, trajectory: Trajectory, skip_first: bool = True) -> float:
    """Rollout MSE over predicted steps; steps after a divergence cost :data:`DIVERGED_MSE`."""
    truth = trajectory.positions
    start = 1 if skip_first else 0
    pos = r.positions
    per_step = [float(np.mean((pos[t] - truth[t]) ** 2)) for t in range(start, len(pos))]
    per_step += [DIVERGED_MSE] * (len(truth) - len(pos))
    return float(np.mean(per_step))


def m_plus_10_loss(model, trajectory: Trajectory, m: int, horizon: int = 10) -> float:
    """Average error of ``horizon`` ungrounded steps that follow ``m`` grounded ones.

    Every start offset with room for ``m + horizon`` predicted steps is used
    and each window starts from the true state at its offset.
    """
    if m < 0:
        raise ValueError("m must be non-negative")
    T = len(trajectory)
    if T < m + horizon + 1:
        raise ValueError(f"trajectory of {T} steps is too short for m={m} plus {horizon}")
    step = _predictor(model, trajectory)
    truth = trajectory.positions
    errs = []
    for t0 in range(T - m - horizon):
        s = trajectory.states[t0]
        for j in range(m):
            s = step(s, trajectory.point_clouds[t0 + j])
        window = []
        for j in range(horizon):
            try:
                s = step(s, None)
                err = float(np.mean((s.positions - truth[t0 + m + j + 1]) ** 2))
            except NonFiniteError:
                err = DIVERGED_MSE
            window.append(err if np.isfinite(err) else DIVERGED_MSE)
        errs.append(np.mean(window))
    return float(np.mean(errs))


def rollout_iou(pred, truth, resolution: int = 256) -> float:
    """Mean per-step IoU of predicted and true mesh outlines."""
    ps = pred.states if isinstance(pred, (Rollout, Trajectory)) else list(pred)
    ts = truth.states if isinstance(truth, (Rollout, Trajectory)) else list(truth)
    if len(ps) != len(ts):
        raise ValueError("sequence lengths differ")
    return float(np.mean([polygon_iou(a.mesh.outline(), b.mesh.outline(), resolution) for a, b in zip(ps, ts)]))


@dataclass
class AlphaBaseline:
    iou: np.ndarray  # NaN on skipped steps
    skipped: list[int]

    @property
    def mean_iou(self) -> float:
        ok = ~np.isnan(self.iou)
        return float(self.iou[ok].mean()) if ok.any() else float("nan")


def alpha_shape_baseline(trajectory: Trajectory, alpha: float, resolution: int = 256, clouds=None) -> AlphaBaseline:
    """Per-step IoU of the alpha shape of each point cloud against the true mesh."""
    clouds = trajectory.point_clouds if clouds is None else clouds
    ious, skipped = [], []
    for t, (s, pc) in enumerate(zip(trajectory.states, clouds)):
        try:
            loops = alpha_shape_2d(pc, alpha)
        except (GeometryError, ValueError):
            ious.append(np.nan)
            skipped.append(t)
            continue
        ious.append(polygon_iou(loops, s.mesh.outline(), resolution))
    return AlphaBaseline(np.array(ious, dtype=np.float64), skipped)


def normalized_benefit(mse_by_k: dict, mse_ungrounded: float) -> dict:
    """``(mse_inf - mse_k) / (mse_inf - mse_1)``; NaN everywhere when the denominator vanishes."""
    if 1 not in mse_by_k:
        raise ValueError("mse_by_k must contain k=1")
    denom = mse_ungrounded - mse_by_k[1]
    if denom == 0 or not np.isfinite(denom):
        return {k: float("nan") for k in mse_by_k}
    return {k: (mse_ungrounded - v) / denom for k, v in mse_by_k.items()}


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)  # one per (trajectory, k)
    m_plus_10: list[dict] = field(default_factory=list)
    alpha: list[dict] = field(default_factory=list)
    runtime: dict = field(default_factory=dict)

    def ks(self) -> list:
        seen = []
        for r in self.rows:
            if r["k"] not in seen:
                seen.append(r["k"])
        return seen

    def aggregate(self) -> dict:
        out = {}
        for k in self.ks():
            sel = [r for r in self.rows if r["k"] == k]
            mse = np.array([r["rollout_mse"] for r in sel])
            iou = np.array([r["rollout_iou"] for r in sel])
            out[k] = {
                "rollout_mse_mean": float(mse.mean()),
                "rollout_mse_std": float(mse.std()),
                "rollout_iou_mean": float(iou.mean()),
                "rollout_iou_std": float(iou.std()),
                "diverged": int(sum(r["diverged"] for r in sel)),
                "trajectories": len(sel),
            }
        return out

    def benefit(self) -> dict:
        agg = self.aggregate()
        if "1" not in agg or "inf" not in agg:
            return {}
        mse = {int(k): v["rollout_mse_mean"] for k, v in agg.items() if k != "inf"}
        return {str(k): b for k, b in normalized_benefit(mse, agg["inf"]["rollout_mse_mean"]).items()}

    def summary(self) -> dict:
        doc = {"per_k": self.aggregate(), "normalized_benefit": self.benefit(), "runtime": self.runtime}
        if self.m_plus_10:
            v = np.array([r["m_plus_10"] for r in self.m_plus_10])
            doc["m_plus_10"] = {"m": self.m_plus_10[0]["m"], "mean": float(v.mean()), "std": float(v.std())}
        if self.alpha:
            v = np.array([r["alpha_iou"] for r in self.alpha])
            doc["alpha_shape"] = {
                "alpha": self.alpha[0]["alpha"],
                "iou_mean": float(np.nanmean(v)),
                "iou_std": float(np.nanstd(v)),
                "skipped_steps": int(sum(r["skipped_steps"] for r in self.alpha)),
            }
        return doc

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_rows(out / "rollouts.csv", self.rows)
        if self.m_plus_10:
            _write_rows(out / "m_plus_10.csv", self.m_plus_10)
        if self.alpha:
            _write_rows(out / "alpha_shape.csv", self.alpha)
        ben = self.benefit()
        if ben:
            _write_rows(out / "benefit.csv", [{"k": k, "benefit": v} for k, v in ben.items()])
        (out / "metrics.json").write_text(json.dumps(self.summary(), indent=2) + "\n")


def _write_rows(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def evaluate(
    params: ModelParams,
    trajectories: list[Trajectory],
    cfg: RolloutConfig | None = None,
    with_m_plus_10: bool = True,
    with_alpha: bool = True,
    workers: int = 1,
    dump_dir=None,
) -> MetricReport:
    """Rollouts for every trajectory and grounding interval plus the optional extra metrics."""
    import time

    cfg = cfg or RolloutConfig()
    report = MetricReport()
    t0 = time.perf_counter()

    def one(idx_tr):
        idx, tr = idx_tr
        rows = []
        for k in cfg.ks:
            r = rollout(params, tr, k)
            if dump_dir is not None:
                dump_rollout(Path(dump_dir) / f"traj{idx:03d}_k{k_label(k)}.json", r)
            iou = rollout_iou(r.states, tr.states[: len(r.states)], cfg.resolution)
            rows.append(
                {
                    "trajectory": idx,
                    "seed": tr.scenario.get("seed", -1),
                    "material": tr.material.value,
                    "k": k_label(k),
                    "rollout_mse": capped_rollout_mse(r, tr),
                    "rollout_iou": iou,
                    "diverged": int(r.diverged),
                }
            )
        extra = None
        if with_m_plus_10:
            extra = {"trajectory": idx, "m": cfg.m, "m_plus_10": m_plus_10_loss(params, tr, cfg.m)}
        alpha = None
        if with_alpha:
            ab = alpha_shape_baseline(tr, cfg.alpha, cfg.resolution)
            alpha = {"trajectory": idx, "alpha": cfg.alpha, "alpha_iou": ab.mean_iou, "skipped_steps": len(ab.skipped)}
        return rows, extra, alpha

    items = list(enumerate(trajectories))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    for rows, extra, alpha in results:
        report.rows.extend(rows)
        if extra:
            report.m_plus_10.append(extra)
        if alpha:
            report.alpha.append(alpha)
    report.runtime = {"seconds": time.perf_counter() - t0, "trajectories": len(trajectories)}
    return report


def dump_rollout(path, r: Rollout) -> None:
    """Per-step mesh dump for external viewers."""
    doc = {
        "k": k_label(r.k),
        "diverged_at": r.diverged_at,
        "triangles": r.states[0].mesh.triangles.tolist(),
        "steps": [{"vertices": s.positions.tolist(), "collider": s.collider_center.tolist()} for s in r.states],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc))
