import json
from collections import Counter

import numpy as np
import pytest

from proxytr import datagen, metrics
from proxytr.errors import DegenerateInputError, DomainError


def _multiset(points):
    return Counter(map(tuple, np.round(points, 12)))


def test_crop_removes_farthest_from_viewpoint():
    cloud = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0.0, 1.0, 0]])
    view = np.array([1.0, 0, 0])
    kept, removed = datagen.crop_split(cloud, view, 1)
    # brute-force ranking of distances to the viewpoint at radius 2
    d = [np.linalg.norm(p - 2 * view) for p in cloud]
    assert removed.tolist() == [int(np.argmax(d))] == [1]
    assert kept.tolist() == [0, 2]


def test_crop_partition_is_multiset_complete():
    rng = np.random.default_rng(0)
    complete = datagen.make_primitive("box", None, 400, rng)
    for _ in range(5):
        view = datagen.random_viewpoint(rng)
        n = datagen.sample_n_removed(rng, len(complete))
        kept, removed = datagen.crop_split(complete, view, n)
        assert len(removed) == n
        assert _multiset(np.concatenate([complete[kept], complete[removed]])) == _multiset(complete)
        sample = datagen.crop_partial(complete, view, n, rng, n_input=128)
        assert sample.partial.shape == (128, 3)


def test_crop_errors():
    cloud = np.eye(3)
    with pytest.raises(DomainError):
        datagen.crop_split(cloud, [1.0, 0, 0], 3)
    with pytest.raises(DomainError):
        datagen.crop_split(cloud, [2.0, 0, 0], 1)


def test_training_crop_range_and_eval_difficulties():
    rng = np.random.default_rng(1)
    draws = [datagen.sample_n_removed(rng, 8192) for _ in range(2000)]
    assert min(draws) >= 2048 and max(draws) <= 6144
    assert min(draws) < 2300 and max(draws) > 5900
    assert [datagen.difficulty_for(n, 8192) for n in (2048, 4096, 6144, 3000)] == \
        ["simple", "moderate", "hard", "random"]
    assert len(datagen.EVAL_VIEWPOINTS) == 8
    np.testing.assert_allclose(np.linalg.norm(datagen.EVAL_VIEWPOINTS, axis=1), 1.0)


def test_upsampling_replicates_existing_points():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(10, 3))
    out = datagen.resample(pts, 25, rng)
    assert out.shape == (25, 3)
    assert set(map(tuple, out)) <= set(map(tuple, pts))


def test_render_single_point_on_axis():
    cam = datagen.CameraModel(eye=(3.0, 0, 0))
    depth = datagen.render_depth(np.array([[0.0, 0, 0]]), cam)
    valid = np.argwhere(np.isfinite(depth))
    assert valid.tolist() == [[100, 100]]
    assert depth[100, 100] == pytest.approx(3.0)


def test_render_zbuffer_and_frustum():
    cam = datagen.CameraModel(eye=(3.0, 0, 0))
    depth = datagen.render_depth(np.array([[0.0, 0, 0], [1.0, 0, 0]]), cam)
    assert depth[100, 100] == pytest.approx(2.0)
    depth = datagen.render_depth(np.array([[0.0, 50.0, 0], [0.0, 0, 0]]), cam)
    assert np.isfinite(depth).sum() == 1
    with pytest.raises(DegenerateInputError):
        datagen.render_depth(np.array([[5.0, 0, 0]]), cam)
    with pytest.raises(DomainError):
        datagen.CameraModel(eye=(0.0, 0, 0))


def test_backproject_roundtrip_noise_free():
    rng = np.random.default_rng(3)
    cloud = datagen.make_primitive("cylinder", None, 8192, rng)
    cam = datagen.CameraModel(eye=tuple(3.0 * datagen.EVAL_VIEWPOINTS[0]))
    depth, winner = datagen.render_index(cloud, cam)
    lifted = datagen.backproject(depth, cam)
    visible = cloud[winner[winner >= 0]]
    assert metrics.chamfer(lifted, visible, "cd_l2") < 1e-3


def test_noised_backproject_spread_and_count():
    rng = np.random.default_rng(4)
    cloud = datagen.make_primitive("sphere", None, 4096, rng)
    cam = datagen.CameraModel(eye=(0.0, 3.0, 0.0))
    clean = datagen.noised_backproject(cloud, cam, 0.0, np.random.default_rng(0), resample_output=False)
    noisy = datagen.noised_backproject(cloud, cam, 0.02, np.random.default_rng(0), resample_output=False)
    depth = datagen.render_depth(cloud, cam)
    span = np.ptp(depth[np.isfinite(depth)])
    # each point moves along its pixel ray by at most 2% of the depth range,
    # so its displacement is bounded by that times the ray/axis secant
    shift = np.linalg.norm(noisy.partial - clean.partial, axis=1)
    assert shift.max() <= 0.02 * span * 1.2
    assert shift.mean() > 0.002 * span
    sample = datagen.noised_backproject(cloud, cam, 0.02, rng, n_input=512)
    assert sample.partial.shape == (512, 3)
    with pytest.raises(DegenerateInputError):
        datagen.noised_backproject(cloud[:5], cam, 0.0, rng)


def test_primitives():
    rng = np.random.default_rng(5)
    sphere = datagen.make_primitive("sphere", None, 500, rng)
    np.testing.assert_allclose(np.linalg.norm(sphere, axis=1), 1.0, atol=1e-6)
    box = datagen.make_primitive("box", {"size": (1.0, 2.0, 3.0)}, 500, np.random.default_rng(6))
    # normalisation is a uniform scale and shift, so each point still lies on a face plane
    lo, hi = box.min(axis=0), box.max(axis=0)
    on_face = np.isclose(box, lo, atol=1e-9) | np.isclose(box, hi, atol=1e-9)
    assert np.all(on_face.any(axis=1))
    a = datagen.make_primitive("cylinder", None, 64, np.random.default_rng(7))
    b = datagen.make_primitive("cylinder", None, 64, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(DomainError):
        datagen.make_primitive("box", {"size": (1, -1, 1)}, 64, rng)
    with pytest.raises(DomainError):
        datagen.make_primitive("sphere", None, 4, rng)
    with pytest.raises(DomainError):
        datagen.make_primitive("torus", None, 64, rng)


def test_streams_are_seed_deterministic_and_parallel_safe(monkeypatch):
    kw = dict(method="crop", n_complete=256, n_input=64, views=2)
    serial = datagen.synth_items(4, 9, **kw)
    monkeypatch.setenv("PROXYTR_THREADS", "3")
    parallel = datagen.synth_items(4, 9, **kw)
    for a, b in zip(serial, parallel):
        np.testing.assert_array_equal(a.complete, b.complete)
        for pa, pb in zip(a.partials, b.partials):
            np.testing.assert_array_equal(pa.partial, pb.partial)
            assert pa.partial.shape == (64, 3)


def test_eval_items_cover_fixed_views_and_levels():
    item = datagen.synth_item(0, 1, n_complete=200, n_input=40, fixed_views=True, difficulty="all")
    assert len(item.partials) == 24
    assert Counter(s.difficulty for s in item.partials) == {"simple": 8, "moderate": 8, "hard": 8}
    item = datagen.synth_item(0, 1, method="backproject", n_complete=2048, n_input=64)
    assert len(item.partials) == 16


def test_write_and_load_dataset(tmp_path):
    items = datagen.synth_items(2, 3, n_complete=128, n_input=32, views=2)
    datagen.write_dataset(tmp_path, "train", items)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert [e["id"] for e in manifest["splits"]["train"]] == ["000000", "000001"]
    assert (tmp_path / "train" / "000001_partial_1.xyz").exists()
    rows = list(datagen.load_split(tmp_path, "train"))
    assert len(rows) == 4
    np.testing.assert_allclose(rows[0][3], items[0].partials[0].partial, atol=1e-8)
