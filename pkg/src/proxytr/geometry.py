"""Non-differentiable point cloud kernels: sampling, neighbour search, I/O.

Clouds are plain ``(n, 3)`` float arrays. Every distance tie is broken by
the lower point index so results do not depend on platform or evaluation
order.
"""

from __future__ import annotations

import os
from collections import defaultdict

import numpy as np

from .errors import DegenerateInputError, DomainError, ParseError
from .validation import check_cloud, check_count

GRID_MIN_POINTS = 64


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances, computed from coordinate differences."""
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def fps(cloud, m: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling.

    Greedily picks ``m`` indices, each maximising the distance to the points
    already chosen. Accepts one cloud ``(n, 3)`` or a batch ``(B, n, 3)``; a
    batch returns ``(B, m)`` indices.
    """
    pts = np.asarray(cloud, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    n = pts.shape[1]
    if n == 0:
        raise DomainError("fps: empty cloud")
    m = check_count(m, "fps sample count", 1, n)
    start = check_count(start, "fps start index", 0, n - 1)
    B = pts.shape[0]
    rows = np.arange(B)
    out = np.empty((B, m), dtype=np.int64)
    out[:, 0] = start
    last = pts[:, start]
    mind = np.full((B, n), np.inf)
    for i in range(1, m):
        d = pts - last[:, None, :]
        np.minimum(mind, np.einsum("bij,bij->bi", d, d), out=mind)
        nxt = np.argmax(mind, axis=1)
        out[:, i] = nxt
        last = pts[rows, nxt]
    return out[0] if single else out


def _brute_knn(ref: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    d = sq_dists(queries, ref)
    order = np.argsort(d, axis=1, kind="stable")
    return order[:, :k]


class _Grid:
    """Uniform hash grid over a reference cloud."""

    def __init__(self, ref: np.ndarray):
        self.ref = ref
        lo, hi = ref.min(axis=0), ref.max(axis=0)
        diameter = float(np.linalg.norm(hi - lo))
        self.cell = diameter / np.cbrt(len(ref)) if diameter > 0 else 1.0
        self.origin = lo
        keys = np.floor((ref - lo) / self.cell).astype(np.int64)
        self.cells: dict[tuple, list[int]] = defaultdict(list)
        for i, key in enumerate(map(tuple, keys)):
            self.cells[key].append(i)
        self.cells = {key: np.asarray(v) for key, v in self.cells.items()}
        self.hi_cell = keys.max(axis=0)

    def query(self, q: np.ndarray, k: int) -> np.ndarray:
        home = np.floor((q - self.origin) / self.cell).astype(np.int64)
        found: list[np.ndarray] = []
        # Chebyshev ring distance from the home cell to the occupied block
        r = int(max(0, np.max(-home), np.max(home - self.hi_cell)))
        r_all = int(max(np.max(np.abs(home)), np.max(np.abs(home - self.hi_cell))))
        while True:
            for key in _shell(home, r):
                idx = self.cells.get(key)
                if idx is not None:
                    found.append(idx)
            if found:
                cand = np.concatenate(found)
                if len(cand) >= k:
                    diff = self.ref[cand] - q
                    d = np.einsum("ij,ij->i", diff, diff)
                    order = np.lexsort((cand, d))[:k]
                    kth = d[order[-1]]
                    # points beyond ring r sit at least r * cell away
                    if kth < (r * self.cell) ** 2 or r >= r_all:
                        return cand[order]
            r += 1


def _shell(home: np.ndarray, r: int):
    x0, y0, z0 = (int(v) for v in home)
    if r == 0:
        yield (x0, y0, z0)
        return
    for dx in range(-r, r + 1):
        for dy in range(-r, r + 1):
            if abs(dx) == r or abs(dy) == r:
                for dz in range(-r, r + 1):
                    yield (x0 + dx, y0 + dy, z0 + dz)
            else:
                yield (x0 + dx, y0 + dy, z0 - r)
                yield (x0 + dx, y0 + dy, z0 + r)


def knn(reference, queries, k: int, method: str = "auto") -> np.ndarray:
    """Exact k nearest neighbours of each query within ``reference``.

    Returns a ``(len(queries), k)`` index matrix, each row ascending by
    distance with ties broken by index. ``method`` is ``"auto"`` (grid from
    64 reference points up), ``"grid"`` or ``"brute"``.
    """
    ref = check_cloud(reference, "reference")
    qs = check_cloud(queries, "queries")
    k = check_count(k, "k", 1, len(ref))
    if method == "auto":
        method = "grid" if len(ref) >= GRID_MIN_POINTS else "brute"
    if method == "brute":
        return _brute_knn(ref, qs, k)
    if method != "grid":
        raise DomainError(f"unknown knn method {method!r}")
    grid = _Grid(ref)
    return np.stack([grid.query(q, k) for q in qs]).astype(np.int64)


def knn_batch(reference: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Brute-force knn over a batch ``(B, n, 3)`` x ``(B, m, 3)`` -> ``(B, m, k)``."""
    reference = np.asarray(reference, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64)
    if k > reference.shape[1]:
        raise DomainError(f"k={k} exceeds reference size {reference.shape[1]}")
    out = np.empty(queries.shape[:2] + (k,), dtype=np.int64)
    step = max(1, 2_000_000 // max(1, reference.shape[0] * reference.shape[0]))
    for b0 in range(0, queries.shape[0], step):
        d = sq_dists(queries[b0:b0 + step], reference[b0:b0 + step])
        out[b0:b0 + step] = np.argsort(d, axis=-1, kind="stable")[..., :k]
    return out


def normalize(cloud) -> tuple[np.ndarray, np.ndarray, float]:
    """Centre on the centroid and scale so the farthest point has norm 1.

    Returns ``(normalized, centroid, scale)``; the input is recovered by
    ``normalized * scale + centroid``.
    """
    pts = check_cloud(cloud, min_points=1)
    centroid = pts.mean(axis=0)
    centred = pts - centroid
    scale = float(np.max(np.linalg.norm(centred, axis=1)))
    if not scale > 0:
        raise DegenerateInputError("normalize: all points are identical")
    return centred / scale, centroid, scale


def denormalize(cloud, centroid, scale: float) -> np.ndarray:
    return np.asarray(cloud) * scale + np.asarray(centroid)


def read_xyz(path: str | os.PathLike) -> np.ndarray:
    """Parse an XYZ text file: three floats per line, ``#`` lines are comments."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            try:
                if len(parts) != 3:
                    raise ValueError
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(f"{path}:{lineno}: malformed XYZ line {text!r}") from None
    if not rows:
        raise DomainError(f"{path}: no points")
    return np.asarray(rows, dtype=np.float64)


def write_xyz(path: str | os.PathLike, cloud) -> None:
    pts = check_cloud(cloud)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in pts:
            fh.write(f"{x:.8f} {y:.8f} {z:.8f}\n")
