#!/usr/bin/env python3
"""
Tests for the one-stream network: encoder, transformer layers, multi-scale
aggregation, segmentation, BEV head and the end-to-end gradient check.
"""

import math

import numpy as np
import pytest

from model import (HEATMAP_BIAS, ModelConfig, ModelConfigError, ModelParams, augment_features, bev_head_forward,
                   init_params, local_encode, mfa_forward, model_forward, model_gradcheck, one_stream_forward,
                   parameter_shapes, random_clouds, segment_scores, ttm_forward)
from point_ops import BevGrid, PointCloud, feature_propagation
from tensor_core import Tensor, no_grad, reduce_sum


@pytest.fixture
def desk():
    config = ModelConfig.desk()
    return config, init_params(config, seed=0)


def test_config_validation():
    with pytest.raises(ModelConfigError):
        ModelConfig.desk(feat_dim=6)
    with pytest.raises(ModelConfigError):
        ModelConfig.desk(mfa_samples=(16, 8))
    with pytest.raises(ModelConfigError):
        ModelConfig.desk(mfa_samples=(8,))
    with pytest.raises(ModelConfigError):
        ModelConfig.desk(mfa_direction="sideways")
    assert ModelConfig().augmented_dim == 68


def test_init_params(desk):
    config, params = desk
    assert list(params) == list(parameter_shapes(config))
    assert np.allclose(params["head.heatmap.bias"].data, HEATMAP_BIAS)
    assert HEATMAP_BIAS == pytest.approx(-math.log(9.0))
    assert np.array_equal(params["ttm.0.norm1.gain"].data, np.ones(config.feat_dim))
    assert np.array_equal(init_params(config, seed=0)["ttm.1.query.weight"].data, params["ttm.1.query.weight"].data)


def test_attention_keys_carry_no_bias(desk):
    config, params = desk
    names = list(parameter_shapes(config))
    assert all(f"ttm.{i}.key.weight" in names and f"ttm.{i}.key.bias" not in names for i in range(config.ttm_layers))
    assert "ttm.0.query.bias" in names and "ttm.0.value.bias" in names


def test_params_save_load(desk, tmp_path):
    config, params = desk
    params.save(str(tmp_path), extra_arrays={"optim.step": np.array([3.0])}, meta={"step": 3})
    loaded, rest, meta = ModelParams.load(str(tmp_path))
    assert loaded.config == config
    assert all(np.array_equal(loaded[n].data, params[n].data) for n in params)
    assert list(rest) == ["optim.step"] and meta["step"] == 3


def test_local_encode_isolated_point(desk):
    config, params = desk
    feats = local_encode(PointCloud([[0.0, 0.0, 0.0]]), params, config)
    assert feats.shape == (1, config.feat_dim)
    assert np.all(np.isfinite(feats.data))


def test_local_encode_translation_invariant(desk):
    config, params = desk
    coords = np.random.default_rng(1).uniform(-0.4, 0.4, size=(16, 3))
    base = local_encode(PointCloud(coords), params, config).data
    moved = local_encode(PointCloud(coords + [5.0, -3.0, 1.0]), params, config).data
    assert np.allclose(base, moved, atol=1e-9)


def test_local_encode_permutation_equivariant(desk):
    config, params = desk
    rng = np.random.default_rng(2)
    coords = rng.uniform(-0.4, 0.4, size=(16, 3))
    perm = rng.permutation(16)
    base = local_encode(PointCloud(coords), params, config).data
    permuted = local_encode(PointCloud(coords[perm]), params, config).data
    assert np.allclose(permuted, base[perm], atol=1e-12)


def _joint_inputs(config, params, rng, n_t=None):
    template, search = random_clouds(config, rng)
    if n_t is not None:
        template = template.subset(np.arange(n_t))
    coords = np.vstack([template.coords, search.coords])
    feats = Tensor(rng.normal(size=(len(coords), config.feat_dim)))
    return coords, feats, len(template)


def test_ttm_rows_and_recomposition(desk):
    config, params = desk
    coords, feats, n_t = _joint_inputs(config, params, np.random.default_rng(3))
    _, decomposition = ttm_forward(coords, feats, params, config, 0, n_t, collect=True)
    template_rows, search_rows = decomposition.row_sums()
    assert np.allclose(template_rows, 1.0, atol=1e-10) and np.allclose(search_rows, 1.0, atol=1e-10)
    assert np.max(np.abs(decomposition.recompose() - decomposition.output)) < 1e-10


def test_ttm_without_template_is_search_self_attention(desk):
    config, params = desk
    coords, feats, n_t = _joint_inputs(config, params, np.random.default_rng(4))
    alone, decomposition = ttm_forward(coords[n_t:], Tensor(feats.data[n_t:]), params, config, 1, 0, collect=True)
    assert decomposition.w_tt.shape == (config.heads, 0, 0)
    masked, _ = ttm_forward(coords, feats, params, config, 1, n_t, cross_attention=False)
    assert np.allclose(alone.data, masked.data[n_t:], atol=1e-12)


def test_one_stream_output_sizes(desk):
    config, params = desk
    template, search = random_clouds(config, np.random.default_rng(5))
    outputs, _ = one_stream_forward(template, search, params, config)
    assert [len(o.coords) for o in outputs] == [8, 16, 32]
    assert all(o.feats.shape == (len(o.coords), config.feat_dim) for o in outputs)
    assert np.array_equal(outputs[-1].coords, search.coords)
    assert np.array_equal(outputs[1].coords[:8], outputs[0].coords)

    single = ModelConfig.desk(ttm_layers=1, mfa_samples=())
    outputs, _ = one_stream_forward(template, search, init_params(single), single)
    assert len(outputs) == 1


def test_one_stream_full_scale_sizes():
    config = ModelConfig()
    params = init_params(config, seed=0)
    template, search = random_clouds(config, np.random.default_rng(6))
    with no_grad():
        outputs, _ = one_stream_forward(template, search, params, config)
    assert [o.feats.shape for o in outputs] == [(256, 64), (512, 64), (1024, 64)]


def test_attention_identity_across_random_inputs(desk):
    config, params = desk
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        template, search = random_clouds(config, rng)
        with no_grad():
            _, diagnostics = one_stream_forward(template, search, params, config, collect=True)
        assert len(diagnostics) == config.ttm_layers
        for d in diagnostics:
            assert d.output.shape[0] == config.heads
            worst = max(worst, float(np.max(np.abs(d.recompose() - d.output))))
            for rows in d.row_sums():
                assert np.allclose(rows, 1.0, atol=1e-10)
    assert worst < 1e-10


def test_masked_cross_attention_isolates_search(desk):
    config, params = desk
    rng = np.random.default_rng(8)
    template_a, search = random_clouds(config, rng)
    template_b = PointCloud(rng.uniform(-0.5, 0.5, size=(config.n_template, 3)) + [0.3, -0.2, 0.1])
    with no_grad():
        isolated_a, _ = one_stream_forward(template_a, search, params, config, cross_attention=False)
        isolated_b, _ = one_stream_forward(template_b, search, params, config, cross_attention=False)
        joint_a, _ = one_stream_forward(template_a, search, params, config)
        joint_b, _ = one_stream_forward(template_b, search, params, config)
    for a, b in zip(isolated_a, isolated_b):
        assert np.array_equal(a.feats.data, b.feats.data)
    assert not np.allclose(joint_a[-1].feats.data, joint_b[-1].feats.data)


def _layer_outputs(config, params, seed):
    template, search = random_clouds(config, np.random.default_rng(seed))
    outputs, _ = one_stream_forward(template, search, params, config)
    return outputs


def test_mfa_preserves_constant_features(desk):
    config, params = desk
    outputs = _layer_outputs(config, params, 9)
    d = config.feat_dim
    constant = np.linspace(0.5, 1.5, d)
    for o in outputs:
        o.feats = Tensor(np.tile(constant, (len(o.coords), 1)))
    for j in range(config.ttm_layers - 1):
        params[f"mfa.{j}.weight"].data = np.vstack([np.eye(d), np.zeros((d, d))])
        params[f"mfa.{j}.bias"].data = np.zeros(d)
    fused = mfa_forward(outputs, params, config).data
    assert fused.shape == (config.n_search, d)
    assert np.allclose(fused, constant, atol=1e-12)


def test_mfa_exact_match_before_combine(desk):
    config, params = desk
    outputs = _layer_outputs(config, params, 10)
    propagated = feature_propagation(PointCloud(outputs[0].coords, outputs[0].feats), outputs[1].coords).data
    assert np.array_equal(propagated[:len(outputs[0].coords)], outputs[0].feats.data)


def test_mfa_directions_differ(desk):
    config, params = desk
    outputs = _layer_outputs(config, params, 11)
    specific = mfa_forward(outputs, params, config, "specific").data
    usual = mfa_forward(outputs, params, config, "usual").data
    assert specific.shape == usual.shape == (config.n_search, config.feat_dim)
    assert not np.allclose(specific, usual)


def test_segment_scores(desk):
    config, params = desk
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(32, config.feat_dim)) * 3
    scores = segment_scores(Tensor(feats), params).data
    assert np.all((scores > 0) & (scores < 1))
    perm = rng.permutation(32)
    assert np.allclose(segment_scores(Tensor(feats[perm]), params).data, scores[perm], atol=1e-12)

    for name in ("seg.0.weight", "seg.0.bias", "seg.1.weight", "seg.1.bias"):
        params[name].data = np.zeros_like(params[name].data)
    assert np.array_equal(segment_scores(Tensor(feats), params).data, np.full(32, 0.5))


def test_augment_features_layout():
    rng = np.random.default_rng(13)
    scores, coords, feats = rng.uniform(size=10), rng.normal(size=(10, 3)), rng.normal(size=(10, 64))
    out = augment_features(Tensor(scores), coords, Tensor(feats)).data
    assert out.shape == (10, 68)
    assert np.array_equal(out[:, 0], scores)
    assert np.array_equal(out[:, 1:4], coords)
    assert np.array_equal(out[:, 4:], feats)


def test_bev_head_shapes_and_shift_equivariance():
    grid = BevGrid((-2.4, 2.4), (-2.4, 2.4), (-2.0, 2.0), 0.3)
    config = ModelConfig.desk(bev_grid=grid)
    params = init_params(config, seed=1)
    rng = np.random.default_rng(14)
    block = rng.normal(size=(config.augmented_dim, 4, 4))
    bev = np.zeros((config.augmented_dim, grid.ny, grid.nx))
    bev[:, 5:9, 5:9] = block
    shifted = np.zeros_like(bev)
    shifted[:, 5:9, 6:10] = block

    out = bev_head_forward(Tensor(bev), params, config)
    moved = bev_head_forward(Tensor(shifted), params, config)
    assert out.heatmap.shape == (16, 16) and out.zmap.shape == (16, 16) and out.offset_rot.shape == (3, 16, 16)
    assert np.all((out.heatmap.data > 0) & (out.heatmap.data < 1))
    rows = slice(3, 13)
    assert np.allclose(moved.heatmap.data[rows, 4:13], out.heatmap.data[rows, 3:12], atol=1e-12)
    assert np.allclose(moved.offset_rot.data[:, rows, 4:13], out.offset_rot.data[:, rows, 3:12], atol=1e-12)
    assert np.allclose(moved.zmap.data[rows, 4:13], out.zmap.data[rows, 3:12], atol=1e-12)


def test_model_forward_contract(desk):
    config, params = desk
    template, search = random_clouds(config, np.random.default_rng(15))
    first = model_forward(template, search, params, config)
    second = model_forward(template, search, params, config)
    grid = config.bev_grid
    assert first.head.heatmap.shape == (grid.ny, grid.nx)
    assert first.head.offset_rot.shape == (3, grid.ny, grid.nx)
    assert first.head.zmap.shape == (grid.ny, grid.nx)
    assert first.seg_scores.shape == (config.n_search,)
    assert first.head.occupancy.shape == (grid.ny, grid.nx)
    assert np.array_equal(first.head.heatmap.data, second.head.heatmap.data)
    assert np.array_equal(first.head.offset_rot.data, second.head.offset_rot.data)


def test_every_parameter_receives_gradient(desk):
    config, params = desk
    rng = np.random.default_rng(16)
    template, search = random_clouds(config, rng)
    result = model_forward(template, search, params, config)
    grid = config.bev_grid
    loss = (reduce_sum(result.head.heatmap * rng.normal(size=(grid.ny, grid.nx)))
            + reduce_sum(result.head.offset_rot * rng.normal(size=(3, grid.ny, grid.nx)))
            + reduce_sum(result.head.zmap * rng.normal(size=(grid.ny, grid.nx)))
            + reduce_sum(result.seg_scores * rng.normal(size=config.n_search)))
    loss.backward()
    silent = [name for name, t in params.items() if t.grad is None or np.max(np.abs(t.grad)) <= 1e-10]
    assert not silent, silent


def test_model_runs_without_template(desk):
    config, params = desk
    _, search = random_clouds(config, np.random.default_rng(17))
    with no_grad():
        result = model_forward(PointCloud(np.zeros((0, 3))), search, params, config)
    assert np.all(np.isfinite(result.head.heatmap.data))


def test_end_to_end_gradient_check():
    reports = model_gradcheck(ModelConfig.desk(), seed=0, tol=1e-3)
    failed = [(r.op_name, r.max_rel_error) for r in reports if not r.passed]
    assert not failed, failed
    print(f"✅ {len(reports)} parameter tensors pass the end-to-end gradient check")


if __name__ == "__main__":
    test_end_to_end_gradient_check()
