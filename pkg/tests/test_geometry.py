import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proxytr import geometry
from proxytr.errors import DegenerateInputError, DomainError, ParseError

from helpers import brute_knn


def _is_greedy_maxmin(cloud, idx):
    """Definitional check: each pick attains the max over remaining points of
    the min distance to the already-picked prefix."""
    cloud = np.asarray(cloud, float)
    for i in range(1, len(idx)):
        prefix = cloud[idx[:i]]
        mind = [min(np.linalg.norm(p - q) for q in prefix) for p in cloud]
        if not np.isclose(mind[idx[i]], max(mind), rtol=0, atol=1e-12):
            return False
    return True


def test_fps_trivial_and_collinear():
    assert list(geometry.fps([[0.0, 0.0, 0.0]], 1)) == [0]
    line = [[x, 0.0, 0.0] for x in range(4)]
    assert set(geometry.fps(line, 2, start=0)) == {0, 3}


def test_fps_unit_square_tie_break():
    square = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]]
    got = list(geometry.fps(square, 3, start=0))
    # exhaustive oracle: every valid greedy order, then the lowest-index choice at each tie
    valid = [order for order in itertools.permutations(range(4), 3)
             if order[0] == 0 and _is_greedy_maxmin(square, list(order))]
    assert got == list(min(valid))
    assert got == [0, 3, 1]


def test_fps_rejects_too_many():
    with pytest.raises(DomainError):
        geometry.fps(np.zeros((3, 3)), 4)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 128), st.integers(0, 2**31 - 1))
def test_fps_definition_and_determinism(n, seed):
    rng = np.random.default_rng(seed)
    cloud = rng.uniform(-1, 1, (n, 3))
    m = int(rng.integers(1, min(n, 16) + 1))
    start = int(rng.integers(0, n))
    idx = geometry.fps(cloud, m, start)
    assert len(set(idx.tolist())) == m
    assert idx[0] == start
    assert _is_greedy_maxmin(cloud, idx)
    np.testing.assert_array_equal(idx, geometry.fps(cloud, m, start))


def test_fps_batch_matches_single():
    rng = np.random.default_rng(0)
    clouds = rng.normal(size=(3, 50, 3))
    batch = geometry.fps(clouds, 10)
    for b in range(3):
        np.testing.assert_array_equal(batch[b], geometry.fps(clouds[b], 10))


def test_knn_examples():
    ref = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [5, 0, 0]], float)
    assert geometry.knn(ref, ref[2:3], 1)[0, 0] == 2
    np.testing.assert_array_equal(geometry.knn(ref, [[1, 0, 0]], 2), [[1, 0]])
    with pytest.raises(DomainError):
        geometry.knn(ref, ref, 5)


@pytest.mark.parametrize("method", ["grid", "brute", "auto"])
def test_knn_equals_brute_force(method):
    rng = np.random.default_rng(11)
    for _ in range(40):
        n = int(rng.integers(1, 257))
        ref = rng.uniform(-1, 1, (n, 3))
        qs = np.concatenate([rng.uniform(-1.5, 1.5, (5, 3)), ref[:3]])
        k = int(rng.integers(1, min(n, 12) + 1))
        np.testing.assert_array_equal(geometry.knn(ref, qs, k, method=method), brute_knn(ref, qs, k))


def test_knn_grid_exact_on_lattice_ties():
    # integer lattice makes many exact distance ties
    g = np.array(list(itertools.product(range(5), repeat=3)), float)
    qs = g[[0, 31, 62, 124]] + 0.0
    for k in (1, 6, 7, 27):
        np.testing.assert_array_equal(geometry.knn(g, qs, k, method="grid"), brute_knn(g, qs, k))


def test_knn_far_query_and_batch():
    rng = np.random.default_rng(3)
    ref = rng.uniform(-1, 1, (100, 3))
    far = np.array([[50.0, -40.0, 10.0]])
    np.testing.assert_array_equal(geometry.knn(ref, far, 4), brute_knn(ref, far, 4))
    batch_ref = rng.uniform(-1, 1, (2, 70, 3))
    batch_q = batch_ref[:, :9]
    out = geometry.knn_batch(batch_ref, batch_q, 5)
    for b in range(2):
        np.testing.assert_array_equal(out[b], brute_knn(batch_ref[b], batch_q[b], 5))


def test_normalize_examples():
    pts, c, s = geometry.normalize([[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_allclose(pts, [[-1, 0, 0], [1, 0, 0]])
    np.testing.assert_allclose(c, 0)
    assert s == 1
    pts, c, s = geometry.normalize([[0, 0, 0], [0, 0, 2]])
    np.testing.assert_allclose(pts, [[0, 0, -1], [0, 0, 1]])
    np.testing.assert_allclose(c, [0, 0, 1])
    assert s == 1
    with pytest.raises(DegenerateInputError):
        geometry.normalize([[1, 2, 3], [1, 2, 3]])


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(0, 10**6))
def test_normalize_invariants_and_roundtrip(n, seed):
    rng = np.random.default_rng(seed)
    cloud = rng.normal(size=(n, 3)) * rng.uniform(0.1, 10) + rng.normal(size=3)
    pts, c, s = geometry.normalize(cloud)
    assert np.linalg.norm(pts.mean(axis=0)) < 1e-6
    assert abs(np.max(np.linalg.norm(pts, axis=1)) - 1) < 1e-6
    np.testing.assert_allclose(geometry.denormalize(pts, c, s), cloud, atol=1e-6)


def test_xyz_roundtrip_and_comments(tmp_path):
    path = tmp_path / "a.xyz"
    cloud = np.array([[0.5, -1.25, 3.0], [1e-3, 2.0, -0.75]])
    geometry.write_xyz(path, cloud)
    text = path.read_text()
    assert text.splitlines()[0] == "0.50000000 -1.25000000 3.00000000"
    path.write_text("# header\n" + text)
    np.testing.assert_allclose(geometry.read_xyz(path), cloud)


def test_xyz_parse_error_names_line(tmp_path):
    path = tmp_path / "bad.xyz"
    path.write_text("# c\n1 2 3\n1 2\n")
    with pytest.raises(ParseError, match=":3:"):
        geometry.read_xyz(path)
