import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ggns.dataset import simulate_many
from ggns.evaluation import (
    DIVERGED_MSE,
    INF,
    MetricReport,
    RolloutConfig,
    alpha_shape_baseline,
    capped_rollout_mse,
    evaluate,
    grounded_at,
    k_label,
    m_plus_10_loss,
    normalized_benefit,
    parse_k,
    read_rows,
    rollout,
    rollout_iou,
    rollout_mse,
)
from ggns.geometry import TriMesh
from ggns.model import ModelConfig, NonFiniteError, init_params
from ggns.training import TrainConfig, fit_normalizer, samples_from
from ggns.truthsim import CameraConfig, MaterialClass, ScenarioConfig, SystemState, Trajectory


def toy_trajectory(steps=20):
    """Three free nodes translating by +1 in x per step; the cloud at t is the truth at t."""
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    states, clouds = [], []
    for t in range(steps):
        mesh = TriMesh(tri + [t, 0.0], tri, np.array([[0, 1, 2]]))
        states.append(SystemState(mesh, [0.0, 10.0 - t], 0.5, [0.0, -1.0], np.zeros(3, bool)))
        clouds.append(mesh.vertices.copy())
    return Trajectory(states, MaterialClass.NEUTRAL, {"seed": 0}, clouds)


def toy_predictor(s, pts):
    """Exact when grounded, half speed when not."""
    dx = 1.0 if pts is not None and len(pts) else 0.5
    return s.with_positions(s.positions + [dx, 0.0], s.collider_center + s.collider_velocity)


@pytest.fixture(scope="module")
def trajs():
    return simulate_many(ScenarioConfig(steps=12, collider_travel=0.3 * 11 / 49), CameraConfig(), [3, 4])


@pytest.fixture(scope="module")
def params(trajs):
    cfg = TrainConfig(model=ModelConfig(latent_dim=8, num_blocks=2))
    p = init_params(cfg.model, 0)
    p.norm = fit_normalizer(samples_from(trajs), cfg)
    return p


def test_parse_k():
    assert parse_k("inf") == INF and parse_k("5") == 5
    with pytest.raises(ValueError):
        parse_k("0")
    assert k_label(INF) == "inf" and k_label(2) == "2"
    with pytest.raises(ValueError):
        RolloutConfig(ks=(1, 2.5))


def test_grounding_schedule():
    assert [t for t in range(12) if grounded_at(t, 5)] == [0, 5, 10]
    assert all(grounded_at(t, 1) for t in range(12))
    assert not any(grounded_at(t, INF) for t in range(100))


def loop_mse(p, t):
    total, count = 0.0, 0
    for a, b in zip(p, t):
        for u, v in zip(a, b):
            for x, y in zip(u, v):
                total += (x - y) ** 2
                count += 1
    return total / count


def test_rollout_mse_loop_oracle():
    rng = np.random.default_rng(0)
    p, t = rng.normal(size=(6, 7, 2)), rng.normal(size=(6, 7, 2))
    assert rollout_mse(p, t) == pytest.approx(loop_mse(p, t), rel=1e-12)
    with pytest.raises(ValueError):
        rollout_mse(p, t[:5])


@given(st.floats(-1.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_constant_offset(delta):
    t = np.random.default_rng(1).normal(size=(5, 4, 2))
    # per-node, per-coordinate mean: a uniform offset costs delta squared
    assert rollout_mse(t + delta, t) == pytest.approx(delta * delta, rel=1e-9, abs=1e-15)


def test_rollout_with_toy_predictor():
    tr = toy_trajectory(6)
    r1 = rollout(toy_predictor, tr, 1)
    np.testing.assert_array_equal(r1.positions, tr.positions)
    rinf = rollout(toy_predictor, tr, INF)
    np.testing.assert_allclose(rinf.positions[:, 0, 0] - tr.positions[:, 0, 0], -0.5 * np.arange(6))
    # k=2 is grounded at t=0, 2, 4: errors 0, 0.5, 0.5, 1, 1, 1.5
    r2 = rollout(toy_predictor, tr, 2)
    np.testing.assert_allclose(tr.positions[:, 0, 0] - r2.positions[:, 0, 0], [0, 0, 0.5, 0.5, 1.0, 1.0])
    assert capped_rollout_mse(r2, tr) == pytest.approx(np.mean(np.array([0, 0.5, 0.5, 1, 1]) ** 2 / 2))


def test_collider_is_scripted(trajs, params):
    tr = trajs[0]
    r = rollout(params, tr, 2)
    assert len(r.states) == len(tr)
    np.testing.assert_array_equal(np.stack([s.collider_center for s in r.states]), tr.collider_centers)


def test_m_plus_10_hand_trace():
    tr = toy_trajectory(20)
    # after m exact grounded steps, ungrounded step j lags by 0.5 (j + 1) in x only
    expect = np.mean([(0.5 * (j + 1)) ** 2 / 2 for j in range(10)])
    for m in (0, 3, 9):
        assert m_plus_10_loss(toy_predictor, tr, m) == pytest.approx(expect, rel=1e-12)
    assert expect == pytest.approx(4.8125)
    with pytest.raises(ValueError):
        m_plus_10_loss(toy_predictor, tr, 10)


def test_divergence_is_capped():
    tr = toy_trajectory(6)

    def bad(s, pts):
        if s.positions[0, 0] >= 2:
            raise NonFiniteError("boom")
        return toy_predictor(s, pts)

    r = rollout(bad, tr, 1)
    assert r.diverged and r.diverged_at == 3 and len(r.states) == 3
    assert capped_rollout_mse(r, tr) == pytest.approx((0 + 0 + 3 * DIVERGED_MSE) / 5)
    assert DIVERGED_MSE == pytest.approx(2 * 2.4**2)


def test_rollout_iou(trajs):
    tr = trajs[0]
    assert rollout_iou(tr, tr) == 1.0
    sq = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
    tris = np.array([[0, 1, 2], [0, 2, 3]])

    def st_(v):
        return SystemState(TriMesh(v, sq, tris), [5.0, 5.0], 0.1, [0.0, 0.0], np.zeros(4, bool))

    a, b = [st_(sq)], [st_(sq + [0.5, 0.0])]
    assert rollout_iou(a, b, 512) == pytest.approx(1 / 3, abs=0.01)


def test_alpha_baseline_skips_empty(trajs):
    tr = trajs[1]
    clouds = list(tr.point_clouds)
    clouds[2] = np.empty((0, 2))
    clouds[4] = clouds[4][:2]
    ab = alpha_shape_baseline(tr, 0.5, clouds=clouds)
    assert ab.skipped == [2, 4]
    assert np.isnan(ab.iou[2]) and np.isnan(ab.iou[4])
    assert np.all((ab.iou[~np.isnan(ab.iou)] >= 0) & (ab.iou[~np.isnan(ab.iou)] <= 1))
    again = alpha_shape_baseline(tr, 0.5, clouds=clouds)
    np.testing.assert_array_equal(ab.iou, again.iou)


def test_normalized_benefit():
    b = normalized_benefit({1: 1.0, 2: 2.0, 5: 3.0}, 5.0)
    assert b == {1: 1.0, 2: 0.75, 5: 0.5}
    nan = normalized_benefit({1: 2.0, 2: 2.0}, 2.0)
    assert all(math.isnan(v) for v in nan.values())
    with pytest.raises(ValueError):
        normalized_benefit({2: 1.0}, 3.0)


def test_evaluate_report(trajs, params, tmp_path):
    cfg = RolloutConfig(ks=(1, 5, INF), m=1)
    rep = evaluate(params, trajs, cfg, with_m_plus_10=True, with_alpha=True, dump_dir=tmp_path / "dump")
    assert len(rep.rows) == 2 * 3
    assert rep.ks() == ["1", "5", "inf"]
    assert rep.benefit()["1"] == 1.0 or math.isnan(rep.benefit()["1"])
    rep.write(tmp_path / "out")
    rows = read_rows(tmp_path / "out" / "rollouts.csv")
    assert [float(r["rollout_mse"]) for r in rows] == [r["rollout_mse"] for r in rep.rows]
    doc = json.loads((tmp_path / "out" / "metrics.json").read_text())
    assert set(doc["per_k"]) == {"1", "5", "inf"}
    assert "m_plus_10" in doc and "alpha_shape" in doc
    assert (tmp_path / "dump" / "traj001_kinf.json").exists()
    par = evaluate(params, trajs, cfg, with_m_plus_10=False, with_alpha=False, workers=2)
    assert [r["rollout_mse"] for r in par.rows] == [r["rollout_mse"] for r in rep.rows]


def test_ungrounded_equals_empty_clouds(trajs, params):
    tr = trajs[0]
    empty = Trajectory(tr.states, tr.material, tr.scenario, [np.empty((0, 2))] * len(tr))
    a = rollout(params, tr, INF)
    b = rollout(params, empty, 1)
    np.testing.assert_array_equal(a.positions, b.positions)


def test_report_without_inf_has_no_benefit():
    rep = MetricReport(rows=[{"k": "1", "rollout_mse": 1.0, "rollout_iou": 1.0, "diverged": 0}])
    assert rep.benefit() == {}
