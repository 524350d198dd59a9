#!/usr/bin/env python3
"""
Tests for Success/Precision, the class-agnostic driver and cost accounting.
"""

import json

import numpy as np
import pytest

from data_io import SETTINGS, Frame, Sequence, SynthConfig, resolve_setting, synth_sequence
from evaluation import (EvalConfig, LeakageError, MetricError, analytic_param_count, check_leakage,
                        count_params_flops, evaluate, flop_breakdown, run_class_agnostic, success_precision)
from geometry import Box3D, rigid_transform_box
from model import ModelConfig, _linear_shapes, init_params
from point_ops import PointCloud
from tracker import TrackerConfig, TrackResult


def _gt_sequence(seq_id="s", n_frames=6, category="Car"):
    boxes = [Box3D([0.25 * t, 0.0, 0.0], [0.5, 0.5, 0.5], 0.1 * t) for t in range(n_frames)]
    return Sequence([Frame(PointCloud(np.zeros((0, 3))), b) for b in boxes], category, seq_id)


def _shifted(seq, dx):
    boxes = [seq.frames[0].gt.copy()]
    boxes += [Box3D(f.gt.center + [dx, 0.0, 0.0], f.gt.size, f.gt.yaw) for f in seq.frames[1:]]
    return TrackResult(seq.id, boxes, [0.0] * len(boxes))


def test_evaluate_examples():
    seq = _gt_sequence()
    perfect = evaluate([_shifted(seq, 0.0)], [seq])
    assert perfect.success == pytest.approx(100.0) and perfect.precision == pytest.approx(100.0)
    assert perfect.frames == 5

    one_meter = evaluate([_shifted(seq, 1.0)], [seq])
    assert one_meter.success == 0.0
    assert one_meter.precision == pytest.approx(100.0 * 51 / 101, abs=1e-9)
    assert one_meter.precision == pytest.approx(50.495, abs=1e-3)

    far = evaluate([_shifted(seq, 10.0)], [seq])
    assert (far.success, far.precision) == (0.0, 0.0)


def test_evaluate_rejects_misaligned_input():
    seq = _gt_sequence()
    short = TrackResult(seq.id, [f.gt for f in seq.frames[:-1]], [0.0] * 5)
    with pytest.raises(MetricError):
        evaluate([short], [seq])
    with pytest.raises(MetricError):
        evaluate([_shifted(seq, 0.0)], [_gt_sequence("other")])


def _sweep_oracle(ious, dists, n=101, max_distance=2.0):
    success = precision = 0.0
    for i in range(n):
        t_iou, t_dist = i / (n - 1), max_distance * i / (n - 1)
        success += sum(1 for v in ious if v >= t_iou and v > 0) / len(ious)
        precision += sum(1 for d in dists if d <= t_dist) / len(dists)
    return 100.0 * success / n, 100.0 * precision / n


def test_success_precision_match_threshold_sweep():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ious = rng.uniform(0, 1, size=30) * (rng.random(30) > 0.2)
        dists = rng.uniform(0, 3, size=30)
        s, p, s_curve, p_curve = success_precision(ious, dists, EvalConfig())
        oracle_s, oracle_p = _sweep_oracle(ious, dists)
        assert s == pytest.approx(oracle_s, abs=1e-9)
        assert p == pytest.approx(oracle_p, abs=1e-9)
        assert len(s_curve) == len(p_curve) == 101
        assert np.all(np.diff(s_curve) <= 0) and np.all(np.diff(p_curve) >= 0)


def test_metrics_are_rigid_invariant():
    rng = np.random.default_rng(1)
    seq = _gt_sequence(n_frames=12)
    noisy = [seq.frames[0].gt.copy()]
    noisy += [Box3D(f.gt.center + rng.normal(scale=0.2, size=3), f.gt.size, f.gt.yaw + rng.normal(scale=0.2))
              for f in seq.frames[1:]]
    pred = TrackResult(seq.id, noisy, [0.0] * len(noisy))
    yaw, shift = 2.2, np.array([-40.0, 13.0, 0.7])
    moved_seq = Sequence([Frame(f.cloud, rigid_transform_box(f.gt, yaw, shift)) for f in seq.frames],
                         seq.category, seq.id)
    moved_pred = TrackResult(seq.id, [rigid_transform_box(b, yaw, shift) for b in noisy], pred.ms)
    for mode in ("3d", "bev"):
        a = evaluate([pred], [seq], EvalConfig(iou_mode=mode))
        b = evaluate([moved_pred], [moved_seq], EvalConfig(iou_mode=mode))
        assert a.success == pytest.approx(b.success, abs=1e-9)
        assert a.precision == pytest.approx(b.precision, abs=1e-9)


def test_per_category_and_per_sequence_breakdown():
    car, van = _gt_sequence("car", 4, "Car"), _gt_sequence("van", 7, "Van")
    report = evaluate([_shifted(car, 0.0), _shifted(van, 10.0)], [car, van])
    assert report.frames == 9
    assert report.per_category["Car"]["frames"] == 3 and report.per_category["Van"]["frames"] == 6
    assert report.per_sequence["car"]["success"] == pytest.approx(100.0)
    assert report.per_sequence["van"]["precision"] == 0.0
    json.dumps(report.to_dict())


def _desk_pool():
    sequences = []
    for i, category in enumerate(("Car", "Van", "Pedestrian", "Cyclist")):
        for scene in (3, 19):
            cfg = SynthConfig(n_frames=3, size=(0.8, 0.5, 0.6), density=150.0, speed=(0.05, 0.1),
                              n_distractors=0, ground_points=20, scene_margin=1.0, seed=10 * i + scene,
                              category=category, scene=scene)
            sequences.append(synth_sequence(cfg))
    return sequences


@pytest.fixture(scope="module")
def desk_params():
    return init_params(ModelConfig.desk(), seed=0)


def test_class_agnostic_pools(desk_params):
    pool = _desk_pool()
    manifest = {"categories": ["Pedestrian", "Van", "Cyclist"],
                "sequence_ids": [s.id for s in pool if s.scene == 3 and s.category != "Car"]}
    report = run_class_agnostic("1", desk_params, pool, manifest, TrackerConfig(search_margin=0.5))
    assert report.setting == "setting-1"
    assert list(report.unseen.per_category) == ["Car"]
    assert set(report.observed.per_category) == {"Pedestrian", "Van", "Cyclist"}
    assert report.unseen.frames == 2 * 2 and report.observed.frames == 3 * 2
    assert json.loads(json.dumps(report.to_dict()))["unseen"]["frames"] == 4


def test_class_agnostic_accepts_a_resolved_setting(desk_params):
    pool = _desk_pool()
    manifest = {"categories": ["Car", "Van", "Cyclist"],
                "sequence_ids": [s.id for s in pool if s.scene == 3 and s.category != "Pedestrian"]}
    report = run_class_agnostic(resolve_setting("2"), desk_params, pool, manifest, TrackerConfig(search_margin=0.5))
    assert report.setting == "setting-2"
    assert list(report.unseen.per_category) == ["Pedestrian"]
    with pytest.raises(LeakageError):
        run_class_agnostic(SETTINGS["setting-2"], desk_params, pool, {"categories": ["Pedestrian"]})


def test_leakage_is_refused(desk_params):
    pool = _desk_pool()
    with pytest.raises(LeakageError):
        run_class_agnostic("1", desk_params, pool, {"categories": ["Car", "Van"]})
    test_ids = [s.id for s in pool if s.scene == 19]
    with pytest.raises(LeakageError):
        check_leakage("setting-2", {"categories": ["Car"], "sequence_ids": test_ids[:1]}, pool)


def test_linear_layer_parameter_count():
    assert sum(int(np.prod(s)) for s in _linear_shapes("fc", 2, 3).values()) == 9


def test_doubling_depth_doubles_transformer_flops():
    shallow = ModelConfig.desk(ttm_layers=1, mfa_samples=())
    deep = ModelConfig.desk(ttm_layers=2, mfa_samples=(16,))
    ratio = flop_breakdown(deep)["ttm"] / flop_breakdown(shallow)["ttm"]
    assert ratio == pytest.approx(2.0, abs=0.05)
    six = ModelConfig.desk(ttm_layers=6, mfa_samples=(4, 8, 12, 16, 24))
    assert flop_breakdown(six)["ttm"] == 2 * flop_breakdown(ModelConfig.desk())["ttm"]


def test_param_count_matches_checkpoint(tmp_path):
    for config in (ModelConfig.desk(), ModelConfig.desk(use_mfa=False, use_segmentation=False), ModelConfig()):
        params = init_params(config, seed=1)
        assert analytic_param_count(config) == params.num_elements()
    config = ModelConfig.desk()
    init_params(config).save(str(tmp_path))
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["total_bytes"] == 8 * analytic_param_count(config)


def test_cost_report(desk_params):
    report = count_params_flops(ModelConfig.desk(), runs=3, params=desk_params)
    assert report.params > 0 and report.flops > 0 and report.ms > 0
    assert report.fps == pytest.approx(1000.0 / report.ms)
    assert report.flops == sum(report.flops_by_component.values())
    unmeasured = count_params_flops(ModelConfig.desk(), measure=False)
    assert np.isnan(unmeasured.ms) and unmeasured.params == report.params
