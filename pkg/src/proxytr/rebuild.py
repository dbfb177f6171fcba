"""Folding head and assembly of the dense output cloud."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from . import tensor as T
from .config import ModelConfig
from .errors import UsageError
from .nn import Linear, Module
from .tensor import Tensor


def seed_grid(gx: int, gy: int) -> np.ndarray:
    """(gx * gy, 2) lattice on [-1, 1]^2."""
    xs, ys = np.meshgrid(np.linspace(-1, 1, gx), np.linspace(-1, 1, gy), indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


class FoldingHead(Module):
    """Two-layer MLP on [proxy feature, 2-D seed] giving one 3-D offset per seed."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        C = cfg.width
        hidden = cfg.fold_ratio * C
        self.hidden = Linear(C + 2, hidden, rng, dtype=dtype)
        self.out = Linear(hidden, 3, rng, dtype=dtype)
        self._seeds = seed_grid(*cfg.patch_grid).astype(dtype)
        self._c = C

    @property
    def patch_size(self) -> int:
        return len(self._seeds)

    def offsets(self, features: Tensor) -> Tensor:
        """(B, M, C) -> (B, M, S, 3)."""
        B, M, _ = features.shape
        S = self.patch_size
        w = self.hidden.weight
        # Linear([h, s]) = h W_h + s W_s + b, evaluated once per proxy and once per seed
        per_proxy = T.matmul(features, w[:self._c]).reshape(B, M, 1, -1)
        per_seed = T.matmul(Tensor(self._seeds), w[self._c:]) + self.hidden.bias
        h = T.relu(per_proxy + per_seed.reshape(1, 1, S, -1))
        return self.out(h)

    def forward(self, features: Tensor, centers) -> Tensor:
        centers = centers if isinstance(centers, Tensor) else Tensor(
            np.asarray(centers, dtype=features.dtype))
        B, M, _ = centers.shape
        return self.offsets(features) + centers.reshape(B, M, 1, 3)


def fold(proxies, head: FoldingHead, centers=None) -> Tensor:
    """Patches (B, M, S, 3) around each proxy's centre."""
    if proxies.features.shape[1] == 0:
        raise UsageError("fold: no proxies")
    return head(proxies.features, proxies.coords if centers is None else centers)


@dataclass
class CompletionResult:
    coarse: Tensor                 # (B, M, 3) query centres
    dense: Tensor                  # (B, n_out, 3)
    denoise_patches: Tensor | None = None  # (B, k, S, 3)
    denoise_centers: np.ndarray | None = None  # clean gt centres (B, k, 3)
    selected: np.ndarray | None = None  # bank indices of the selected queries
    origin: np.ndarray | None = None    # origin tag per selected query


def assemble(mode: str, partial: np.ndarray, patches: Tensor) -> Tensor:
    """``pointr``: input points followed by predicted patches; ``adapointr``:
    patches only, the input part having been rebuilt by the same head."""
    B, M, S, _ = patches.shape
    flat = patches.reshape(B, M * S, 3)
    if mode == "adapointr":
        return flat
    if mode != "pointr":
        raise UsageError(f"unknown assembly mode {mode!r}")
    inp = Tensor(np.asarray(partial, dtype=patches.dtype))
    return T.concat([inp, flat], axis=1)


def denoise_patches(features: Tensor, gt_centers: np.ndarray, head: FoldingHead) -> Tensor:
    """Patches from noised-query outputs, anchored at the clean ground-truth centres."""
    if features.shape[:2] != np.shape(gt_centers)[:2]:
        raise UsageError(f"{features.shape[:2]} proxies vs {np.shape(gt_centers)[:2]} centres")
    return head(features, gt_centers)


def gt_local_patches(ground_truth: np.ndarray, centers: np.ndarray, size: int) -> np.ndarray:
    """The ``size`` ground-truth points nearest each centre: (B, k, size, 3)."""
    gt = np.asarray(ground_truth, dtype=np.float64)
    idx = geometry.knn_batch(gt, centers, size)  # (B, k, size)
    B, k, s = idx.shape
    return np.take_along_axis(gt, idx.reshape(B, k * s, 1), axis=1).reshape(B, k, s, 3)
