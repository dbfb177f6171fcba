"""Point proxies: FPS centres with hierarchical edge-convolution features.

The geometric part of the extractor (which points survive each
downsampling step and who their neighbours are) depends only on the input
coordinates, so it is computed once as an :class:`ExtractorPlan` and can be
cached across training steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from . import tensor as T
from .config import EdgeLayerSpec, ModelConfig
from .errors import DomainError
from .nn import MLP, Linear, Module
from .tensor import Tensor


@dataclass
class LevelPlan:
    down: np.ndarray       # (B, n_out) indices into the previous level
    neighbors: np.ndarray  # (B, n_out, k) indices into the previous level
    points: np.ndarray     # (B, n_out, 3) coordinates kept at this level


@dataclass
class ExtractorPlan:
    levels: list[LevelPlan]

    @property
    def centers(self) -> np.ndarray:
        return self.levels[-1].points

    def subset(self, rows) -> ExtractorPlan:
        return ExtractorPlan([LevelPlan(lv.down[rows], lv.neighbors[rows], lv.points[rows])
                              for lv in self.levels])

    @staticmethod
    def stack(plans: list[ExtractorPlan]) -> ExtractorPlan:
        levels = []
        for parts in zip(*(p.levels for p in plans)):
            levels.append(LevelPlan(np.concatenate([lv.down for lv in parts]),
                                    np.concatenate([lv.neighbors for lv in parts]),
                                    np.concatenate([lv.points for lv in parts])))
        return ExtractorPlan(levels)


def plan_extractor(points: np.ndarray, layers: list[EdgeLayerSpec]) -> ExtractorPlan:
    """FPS downsampling and kNN grouping for every edge-conv level of a batch."""
    pts = np.asarray(points, dtype=np.float64)
    levels = []
    for spec in layers:
        n = pts.shape[1]
        if spec.n_out > n:
            raise DomainError(f"edge layer keeps {spec.n_out} points but only {n} remain")
        if spec.k > n:
            raise DomainError(f"edge layer needs k={spec.k} neighbours but only {n} points remain")
        down = np.arange(n)[None].repeat(len(pts), 0) if spec.n_out == n else geometry.fps(pts, spec.n_out)
        kept = np.take_along_axis(pts, down[..., None], axis=1)
        nbrs = geometry.knn_batch(pts, kept, spec.k)
        levels.append(LevelPlan(down, nbrs, kept))
        pts = kept
    return ExtractorPlan(levels)


class EdgeConv(Module):
    """Edge convolution: Linear([f_i, f_j - f_i]) max-pooled over the k neighbours j.

    The linear map on the concatenation splits as
    ``f_i (W_a - W_b) + f_j W_b + b``, so neighbour features are projected
    before they are gathered.
    """

    def __init__(self, c_in: int, c_out: int, rng, use_diff: bool = True, dtype=np.float32):
        self.linear = Linear((2 if use_diff else 1) * c_in, c_out, rng, dtype=dtype)
        self._c_in = c_in
        self._use_diff = use_diff

    def forward(self, feats: Tensor, level: LevelPlan) -> Tensor:
        w = self.linear.weight
        if not self._use_diff:
            proj = T.matmul(feats, w)
            return T.take_rows(proj, level.neighbors).max(axis=2) + self.linear.bias
        c = self._c_in
        w_self, w_nbr = w[:c], w[c:]
        nbr = T.take_rows(T.matmul(feats, w_nbr), level.neighbors)       # (B, n, k, C)
        centre = T.matmul(T.take_rows(feats, level.down), w_self - w_nbr)  # (B, n, C)
        pooled = nbr.max(axis=2)
        return pooled + centre + self.linear.bias


def edge_conv(points: np.ndarray, feats: Tensor, layer: EdgeConv, k: int, n_out: int,
              start: int = 0) -> tuple[np.ndarray, Tensor]:
    """One downsample-group-convolve step on a single batch: returns (kept points, features)."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.shape[1] < k or pts.shape[1] < n_out:
        raise DomainError(f"edge_conv: {pts.shape[1]} points, need k={k} and n_out={n_out}")
    if feats.shape[-2] != pts.shape[1]:
        raise DomainError("edge_conv: feature rows do not match point count")
    down = geometry.fps(pts, n_out, start)
    kept = np.take_along_axis(pts, down[..., None], axis=1)
    level = LevelPlan(down, geometry.knn_batch(pts, kept, k), kept)
    squeeze = feats.ndim == 2
    if squeeze:
        feats = feats.reshape(1, *feats.shape)
    out = layer(feats, level)
    return (kept[0], out.reshape(out.shape[1:])) if squeeze else (kept, out)


@dataclass
class ProxySet:
    centers: np.ndarray   # (B, N, 3)
    features: Tensor      # (B, N, C), F_i = F'_i + phi(p_i)
    local: Tensor         # (B, N, C), F'_i before the positional term


class ProxyExtractor(Module):
    """Stem linear, edge-conv stack, projection to the transformer width, plus
    a positional MLP on the centre coordinates."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        layers = cfg.resolved_edge_layers()
        use_diff = cfg.extractor == "dgcnn"
        self.stem = Linear(3, cfg.stem_width, rng, dtype=dtype)
        widths = [cfg.stem_width] + [spec.width for spec in layers]
        self.convs = [EdgeConv(a, b, rng, use_diff, dtype) for a, b in zip(widths[:-1], widths[1:])]
        self.project = Linear(widths[-1], cfg.width, rng, dtype=dtype)
        self.pos_embed = MLP([3, cfg.width // 2, cfg.width], rng, dtype=dtype)
        self._layers = layers
        self._dtype = dtype

    def plan(self, points: np.ndarray) -> ExtractorPlan:
        return plan_extractor(points, self._layers)

    def forward(self, points: np.ndarray, plan: ExtractorPlan | None = None) -> ProxySet:
        points = np.asarray(points)
        if points.shape[1] < self._layers[-1].n_out:
            raise DomainError(f"cloud has {points.shape[1]} points, fewer than "
                              f"{self._layers[-1].n_out} proxies")
        plan = plan if plan is not None else self.plan(points)
        feats = self.stem(Tensor(points.astype(self._dtype)))
        for i, (conv, level) in enumerate(zip(self.convs, plan.levels)):
            feats = conv(feats, level)
            if i < len(self.convs) - 1:
                feats = T.relu(feats)
        local = self.project(feats)
        centers = plan.centers
        return ProxySet(centers, local + self.pos_embed(Tensor(centers.astype(self._dtype))), local)


def positional_embed(mlp: MLP, p: np.ndarray, dtype=np.float32) -> Tensor:
    return mlp(Tensor(np.asarray(p, dtype=dtype)))
