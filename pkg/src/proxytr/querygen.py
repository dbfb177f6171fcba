"""Decoder queries: dynamic queries, the adaptive query bank with score-based
selection, and noised denoising queries with their group mask."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from . import tensor as T
from .attention import ProxySequenceState, group_mask
from .config import ModelConfig
from .errors import DomainError
from .nn import MLP, Linear, Module
from .tensor import Tensor

INPUT, OUTPUT, NOISE = "input", "output", "noise"


@dataclass
class NoiseSpec:
    count: int
    scale: float = 0.05
    distribution: str = "uniform"

    def __post_init__(self):
        if self.count < 0 or self.scale < 0:
            raise DomainError("noise count and scale must be non-negative")
        if self.distribution != "uniform":
            raise DomainError(f"unsupported noise distribution {self.distribution!r}")


@dataclass
class QueryBank:
    coords: Tensor        # (B, K, 3)
    features: Tensor      # (B, K, C)
    origin: np.ndarray    # (K,) origin tags
    scores: Tensor | None = None  # (B, K) in (0, 1)


@dataclass
class NoiseQueries:
    coords: np.ndarray     # noised centres (B, k, 3)
    clean: np.ndarray      # ground-truth centres before noise (B, k, 3)
    features: Tensor       # (B, k, C)


class QueryGenerator(Module):
    """Pools encoder outputs (and, in adaptive mode, input proxies) into global
    vectors, projects them to query coordinates, and embeds each coordinate
    with the pooled vector through a shared MLP."""

    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        C, G = cfg.width, cfg.pooled_width
        self.adaptive = cfg.mode == "adapointr"
        self.pool_out = Linear(C, G, rng, dtype=dtype)
        self.coords_out = Linear(G, 3 * cfg.m_output if self.adaptive else 3 * cfg.n_queries,
                                 rng, dtype=dtype)
        if self.adaptive:
            self.pool_in = Linear(C, G, rng, dtype=dtype)
            self.coords_in = Linear(G, 3 * cfg.m_input, rng, dtype=dtype)
            self.scorer = Linear(C, 1, rng, dtype=dtype)
        self.query_mlp = MLP([3 + G, C, C], rng, dtype=dtype)
        self._dtype = dtype

    def pooled(self, x: Tensor, proj: Linear) -> Tensor:
        return proj(x).max(axis=1)  # (B, G)

    def embed(self, coords, g: Tensor) -> Tensor:
        coords = coords if isinstance(coords, Tensor) else Tensor(np.asarray(coords, self._dtype))
        B, M, _ = coords.shape
        gb = T.broadcast_to(g.reshape(B, 1, g.shape[-1]), (B, M, g.shape[-1]))
        return self.query_mlp(T.concat([coords, gb], axis=-1))

    def _coords(self, g: Tensor, proj: Linear) -> Tensor:
        B = g.shape[0]
        return proj(g).reshape(B, -1, 3)

    def dynamic(self, memory: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Coordinates (B, M, 3), features (B, M, C) and the pooled vector from memory alone."""
        g = self.pooled(memory, self.pool_out)
        coords = self._coords(g, self.coords_out)
        return coords, self.embed(coords, g), g

    def bank(self, inputs: Tensor, memory: Tensor) -> tuple[QueryBank, Tensor]:
        g_in = self.pooled(inputs, self.pool_in)
        g_out = self.pooled(memory, self.pool_out)
        c_in, c_out = self._coords(g_in, self.coords_in), self._coords(g_out, self.coords_out)
        feats = T.concat([self.embed(c_in, g_in), self.embed(c_out, g_out)], axis=1)
        origin = np.array([INPUT] * c_in.shape[1] + [OUTPUT] * c_out.shape[1])
        scores = T.sigmoid(self.scorer(feats)).reshape(feats.shape[0], feats.shape[1])
        return QueryBank(T.concat([c_in, c_out], axis=1), feats, origin, scores), g_out


def dynamic_queries(memory: ProxySequenceState, M: int, gen: QueryGenerator):
    if memory.features.shape[1] == 0:
        raise DomainError("dynamic_queries: empty memory")
    coords, feats, _ = gen.dynamic(memory.features)
    if coords.shape[1] != M:
        raise DomainError(f"generator emits {coords.shape[1]} queries, not {M}")
    return coords, feats


def adaptive_bank(inputs: Tensor, memory: ProxySequenceState, gen: QueryGenerator) -> QueryBank:
    if inputs.shape[1] == 0 or memory.features.shape[1] == 0:
        raise DomainError("adaptive_bank: empty inputs or memory")
    return gen.bank(inputs, memory.features)[0]


def select_indices(scores: np.ndarray, M: int) -> np.ndarray:
    """Top-``M`` indices per row by score (ties to the lower index), returned ascending."""
    scores = np.atleast_2d(np.asarray(scores))
    K = scores.shape[-1]
    if M > K or M < 1:
        raise DomainError(f"cannot select {M} queries from a bank of {K}")
    top = np.argsort(-scores, axis=-1, kind="stable")[:, :M]
    return np.sort(top, axis=-1)


def select_queries(bank: QueryBank, M: int) -> tuple[QueryBank, np.ndarray]:
    """Keep the ``M`` best-scoring candidates. Features are scaled by their
    score so the scorer receives gradient through the kept queries."""
    idx = select_indices(bank.scores.data, M)
    B = idx.shape[0]
    scores = T.take_rows(bank.scores.reshape(B, -1, 1), idx)  # (B, M, 1)
    feats = T.take_rows(bank.features, idx) * scores
    picked = QueryBank(T.take_rows(bank.coords, idx), feats,
                       bank.origin[idx], scores.reshape(B, M))
    return picked, idx


def noise_centers(ground_truth: np.ndarray, spec: NoiseSpec, rng: np.random.Generator
                  ) -> tuple[np.ndarray, np.ndarray]:
    """FPS centres of each ground-truth cloud and their uniformly noised copies.

    The noise per axis lies in [-s * diag, s * diag] with diag the cloud's
    bounding-box diagonal.
    """
    gt = np.asarray(ground_truth, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    if spec.count > gt.shape[1]:
        raise DomainError(f"{spec.count} denoise queries but only {gt.shape[1]} gt points")
    clean = np.take_along_axis(gt, geometry.fps(gt, spec.count)[..., None], axis=1)
    diag = np.linalg.norm(gt.max(axis=1) - gt.min(axis=1), axis=-1)  # (B,)
    bound = spec.scale * diag[:, None, None]
    noise = rng.uniform(-1.0, 1.0, size=clean.shape) * bound
    return clean, clean + noise


def denoise_queries(ground_truth: np.ndarray, g_memory: Tensor, spec: NoiseSpec,
                    rng: np.random.Generator, gen: QueryGenerator, n_normal: int
                    ) -> tuple[NoiseQueries, np.ndarray]:
    """Noised queries through the shared query MLP, plus the group mask that
    isolates them from the ``n_normal`` regular queries in both directions."""
    clean, noisy = noise_centers(ground_truth, spec, rng)
    feats = gen.embed(noisy, g_memory)
    return NoiseQueries(noisy, clean, feats), group_mask(n_normal, spec.count)
