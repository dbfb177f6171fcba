import numpy as np
import pytest

from proxytr import tensor as T
from proxytr.attention import (Encoder, MultiHeadAttention, ProxySequenceState, check_mask,
                               group_mask, grouped_knn)
from proxytr.config import ModelConfig, model_preset, seed_grid_shape
from proxytr.errors import DimensionError, DomainError, UsageError
from proxytr.model import CompletionModel
from proxytr.nn import Linear
from proxytr.proxy import EdgeConv, ProxyExtractor, plan_extractor
from proxytr.querygen import NoiseSpec, noise_centers, select_indices
from proxytr.rebuild import FoldingHead, assemble, gt_local_patches, seed_grid
from proxytr.tensor import Tensor


def small_cfg(**kw):
    return model_preset("gradcheck", **kw)


def test_edgeconv_matches_concat_form():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2, 10, 3))
    feats = rng.normal(size=(2, 10, 4))
    conv = EdgeConv(4, 5, np.random.default_rng(1), dtype=np.float64)
    cfg = small_cfg()
    plan = plan_extractor(pts, cfg.resolved_edge_layers()[:1])
    level = plan.levels[0]
    got = conv(Tensor(feats), level).data
    W, b = conv.linear.weight.data, conv.linear.bias.data
    want = np.empty_like(got)
    for bi in range(2):
        for i, src in enumerate(level.down[bi]):
            fi = feats[bi, src]
            rows = [np.concatenate([fi, feats[bi, j] - fi]) @ W + b for j in level.neighbors[bi, i]]
            want[bi, i] = np.max(rows, axis=0)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_proxy_features_add_position_term():
    cfg = small_cfg()
    ext = ProxyExtractor(cfg, np.random.default_rng(0), np.float64)
    pts = np.random.default_rng(1).normal(size=(2, 12, 3))
    out = ext(pts)
    assert out.centers.shape == (2, cfg.n_proxies, 3)
    pos = ext.pos_embed(Tensor(out.centers)).data
    np.testing.assert_allclose(out.features.data, out.local.data + pos, atol=1e-12)


def test_extractor_rejects_too_few_points():
    ext = ProxyExtractor(small_cfg(), np.random.default_rng(0), np.float64)
    with pytest.raises(DomainError):
        ext(np.zeros((1, 3, 3)))


def test_group_mask_blocks_both_directions():
    m = group_mask(3, 2)
    assert m[:3, :3].all() and m[3:, 3:].all()
    assert not m[:3, 3:].any() and not m[3:, :3].any()


def test_check_mask_rejects_empty_row_and_bad_shape():
    with pytest.raises(DomainError):
        check_mask(np.array([[True, False], [False, False]]), 2, 2)
    with pytest.raises(UsageError):
        check_mask(np.ones((2, 3), bool), 2, 2)


def test_grouped_knn_stays_inside_groups():
    coords = np.random.default_rng(0).normal(size=(2, 7, 3))
    idx = grouped_knn(coords, 3, [5, 2])
    assert (idx[:, :5] < 5).all()
    assert ((idx[:, 5:] >= 5)).all()
    # the size-2 group pads by repeating its last neighbour
    assert (idx[:, 5:, 2] == idx[:, 5:, 1]).all()


def test_masked_keys_do_not_influence_output():
    rng = np.random.default_rng(0)
    att = MultiHeadAttention(8, 2, rng, np.float64)
    x = rng.normal(size=(1, 5, 8))
    mask = group_mask(3, 2)
    a = att(Tensor(x), Tensor(x), Tensor(x), mask).data
    y = x.copy()
    y[:, 3:] += 10.0
    b = att(Tensor(y), Tensor(y), Tensor(y), mask).data
    np.testing.assert_allclose(a[:, :3], b[:, :3], atol=1e-12)


def test_encoder_permutation_equivariance():
    cfg = small_cfg(enc_depth=2)
    enc = Encoder(cfg, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(1)
    coords = rng.normal(size=(1, 6, 3))
    feats = rng.normal(size=(1, 6, cfg.width))
    perm = rng.permutation(6)
    a = enc(ProxySequenceState(coords, Tensor(feats))).features.data
    b = enc(ProxySequenceState(coords[:, perm], Tensor(feats[:, perm]))).features.data
    np.testing.assert_allclose(a[:, perm], b, atol=1e-10)


def test_select_indices_ties_and_order():
    scores = np.array([[0.5, 0.9, 0.5, 0.9, 0.1]])
    assert select_indices(scores, 3).tolist() == [[0, 1, 3]]
    with pytest.raises(DomainError):
        select_indices(scores, 6)


def test_noise_within_bound():
    gt = np.random.default_rng(0).normal(size=(2, 50, 3))
    clean, noisy = noise_centers(gt, NoiseSpec(8, 0.05), np.random.default_rng(1))
    diag = np.linalg.norm(gt.max(1) - gt.min(1), axis=-1)
    assert (np.abs(noisy - clean) <= 0.05 * diag[:, None, None] + 1e-12).all()
    zero, same = noise_centers(gt, NoiseSpec(8, 0.0), np.random.default_rng(1))
    np.testing.assert_array_equal(zero, same)


def test_seed_grid_and_shape_helper():
    assert seed_grid(4, 8).shape == (32, 2)
    assert seed_grid_shape(32) == (8, 4)
    with pytest.raises(DomainError):
        seed_grid_shape(0)


def test_folding_head_matches_concat_form():
    cfg = small_cfg()
    head = FoldingHead(cfg, np.random.default_rng(0), np.float64)
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(1, 3, cfg.width))
    centers = rng.normal(size=(1, 3, 3))
    got = head(Tensor(feats), centers).data
    seeds = seed_grid(*cfg.patch_grid)
    for m in range(3):
        inp = np.concatenate([np.repeat(feats[0, m][None], len(seeds), 0), seeds], axis=1)
        h = np.maximum(inp @ head.hidden.weight.data + head.hidden.bias.data, 0)
        want = h @ head.out.weight.data + head.out.bias.data + centers[0, m]
        np.testing.assert_allclose(got[0, m], want, atol=1e-12)


def test_assemble_modes():
    partial = np.arange(12.0).reshape(1, 4, 3)
    patches = Tensor(np.ones((1, 2, 3, 3)))
    assert assemble("adapointr", partial, patches).shape == (1, 6, 3)
    out = assemble("pointr", partial, patches).data
    np.testing.assert_array_equal(out[0, :4], partial[0])
    with pytest.raises(UsageError):
        assemble("other", partial, patches)


def test_gt_local_patches_are_nearest():
    gt = np.random.default_rng(0).normal(size=(1, 30, 3))
    centers = gt[:, :2]
    patches = gt_local_patches(gt, centers, 4)
    assert patches.shape == (1, 2, 4, 3)
    np.testing.assert_array_equal(patches[0, 0, 0], gt[0, 0])


@pytest.mark.parametrize("name,total", [("pcn", 16384), ("shapenet55", 8192), ("desk", 1024)])
def test_preset_output_counts(name, total):
    assert model_preset(name).output_count == total


def test_config_round_trip_and_unknown_keys():
    cfg = model_preset("desk")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(UsageError):
        ModelConfig.from_dict({"bogus": 1})


def test_model_output_shapes_and_subset_property():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2, 12, 3))
    ada = CompletionModel(small_cfg(), seed=0)
    assert ada.complete(pts).shape == (2, 16, 3)
    pt = CompletionModel(small_cfg(mode="pointr"), seed=0)
    out = pt.complete(pts)
    assert out.shape == (2, pt.config.output_count, 3)
    np.testing.assert_array_equal(out[:, :12], pts.astype(out.dtype))


def test_model_rejects_wrong_input_size():
    with pytest.raises(DimensionError):
        CompletionModel(small_cfg()).complete(np.zeros((1, 5, 3)))


def test_denoise_queries_leave_normal_outputs_alone():
    cfg = small_cfg()
    model = CompletionModel(cfg, seed=3)
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(2, 12, 3))
    gt = rng.normal(size=(2, 20, 3))
    with T.no_grad():
        clean = model(pts).dense.data
        noisy = model(pts, gt, rng=np.random.default_rng(5))
    assert noisy.denoise_patches is not None
    np.testing.assert_allclose(noisy.dense.data, clean, atol=1e-12)


def test_linear_rejects_width_mismatch():
    lin = Linear(3, 2, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        lin(Tensor(np.zeros((1, 4), np.float32)))


def test_pointr_mode_has_no_denoise_queries():
    model = CompletionModel(small_cfg(mode="pointr"), seed=0)
    rng = np.random.default_rng(0)
    result = model(rng.normal(size=(1, 12, 3)), rng.normal(size=(1, 20, 3)))
    assert result.denoise_patches is None
