"""Transformer encoder/decoder over proxy sequences.

Blocks use pre-norm residuals. The first block of each stack is
geometry-aware: a kNN edge path over the sequence coordinates runs beside
attention and the two are fused by a linear map back to the model width.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from . import tensor as T
from .config import ModelConfig
from .errors import DimensionError, DomainError, UsageError
from .nn import MLP, LayerNorm, Linear, Module
from .tensor import Tensor


@dataclass
class ProxySequenceState:
    coords: np.ndarray  # (B, L, 3)
    features: Tensor    # (B, L, C)

    def __post_init__(self):
        if self.coords.shape[:2] != self.features.shape[:2]:
            raise DimensionError(
                f"coords {self.coords.shape} and features {self.features.shape} disagree")


def group_mask(n_normal: int, n_noise: int) -> np.ndarray:
    """Block-diagonal attention mask: each group attends only within itself."""
    n = n_normal + n_noise
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_normal, :n_normal] = True
    mask[n_normal:, n_normal:] = True
    return mask


def check_mask(mask: np.ndarray, n_queries: int, n_keys: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-2:] != (n_queries, n_keys):
        raise UsageError(f"mask shape {mask.shape} does not cover ({n_queries}, {n_keys})")
    if not np.all(mask.any(axis=-1)):
        raise DomainError("attention mask blocks every key for some query")
    return mask


def grouped_knn(coords: np.ndarray, k: int, groups: list[int] | None = None) -> np.ndarray:
    """kNN indices (B, L, k) over the sequence, restricted to each contiguous group.

    A group smaller than ``k`` repeats its farthest member; max-pooling over
    a repeated neighbour is the same as over the set.
    """
    B, L, _ = coords.shape
    groups = groups or [L]
    if sum(groups) != L:
        raise UsageError("groups do not partition the sequence")
    if groups[0] < k:
        raise DomainError(f"{groups[0]} points is fewer than k_geo={k}")
    out = np.empty((B, L, k), dtype=np.int64)
    start = 0
    for size in groups:
        if size == 0:
            continue
        part = coords[:, start:start + size]
        kk = min(k, size)
        idx = geometry.knn_batch(part, part, kk) + start
        if kk < k:
            idx = np.concatenate([idx, np.repeat(idx[..., -1:], k - kk, axis=-1)], axis=-1)
        out[:, start:start + size] = idx
        start += size
    return out


class MultiHeadAttention(Module):
    def __init__(self, width: int, heads: int, rng, dtype=np.float32):
        if width % heads:
            raise DomainError(f"width {width} not divisible by {heads} heads")
        self.wq = Linear(width, width, rng, bias=False, dtype=dtype)
        self.wk = Linear(width, width, rng, bias=False, dtype=dtype)
        self.wv = Linear(width, width, rng, bias=False, dtype=dtype)
        self.wo = Linear(width, width, rng, dtype=dtype)
        self._heads = heads
        self._width = width

    def _split(self, x: Tensor) -> Tensor:
        B, L, C = x.shape
        return x.reshape(B, L, self._heads, C // self._heads).transpose(0, 2, 1, 3)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
        for t in (q, k, v):
            if t.shape[-1] != self._width:
                raise DimensionError(f"attention width {self._width}, got input {t.shape}")
        B, Lq, C = q.shape
        dk = C // self._heads
        Q, K, V = self._split(self.wq(q)), self._split(self.wk(k)), self._split(self.wv(v))
        scores = T.matmul(Q, K.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dk))
        if mask is not None:
            mask = check_mask(mask, Lq, k.shape[1])
            mask = mask[:, None] if mask.ndim == 3 else mask
        attn = T.softmax(scores, axis=-1, mask=mask)
        out = T.matmul(attn, V).transpose(0, 2, 1, 3).reshape(B, Lq, C)
        return self.wo(out)


def mha(q: Tensor, k: Tensor, v: Tensor, mask, layer: MultiHeadAttention) -> Tensor:
    return layer(q, k, v, mask)


class KnnPath(Module):
    """max over j in kNN(i) of Linear([V_i, V_j - V_i])."""

    def __init__(self, width: int, rng, dtype=np.float32):
        self.linear = Linear(2 * width, width, rng, dtype=dtype)
        self._width = width

    def forward(self, x: Tensor, neighbors: np.ndarray) -> Tensor:
        c = self._width
        w = self.linear.weight
        w_self, w_nbr = w[:c], w[c:]
        nbr = T.take_rows(T.matmul(x, w_nbr), neighbors).max(axis=2)
        return nbr + T.matmul(x, w_self - w_nbr) + self.linear.bias


class FeedForward(Module):
    def __init__(self, width: int, ratio: int, rng, dtype=np.float32):
        self.mlp = MLP([width, ratio * width, width], rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(x)


class EncoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, geometric: bool, dtype=np.float32):
        C = cfg.width
        self.norm1 = LayerNorm(C, dtype)
        self.attn = MultiHeadAttention(C, cfg.heads, rng, dtype)
        if geometric:
            self.knn = KnnPath(C, rng, dtype)
            self.merge = Linear(2 * C, C, rng, dtype=dtype)
        self.norm2 = LayerNorm(C, dtype)
        self.ffn = FeedForward(C, cfg.ffn_ratio, rng, dtype)
        self._geometric = geometric

    def forward(self, x: Tensor, neighbors: np.ndarray | None) -> Tensor:
        h = self.norm1(x)
        a = self.attn(h, h, h)
        if self._geometric:
            a = self.merge(T.concat([a, self.knn(h, neighbors)], axis=-1))
        x = x + a
        return x + self.ffn(self.norm2(x))


class DecoderBlock(Module):
    def __init__(self, cfg: ModelConfig, rng, geometric: bool, dtype=np.float32):
        C = cfg.width
        self.norm1 = LayerNorm(C, dtype)
        self.self_attn = MultiHeadAttention(C, cfg.heads, rng, dtype)
        if geometric:
            self.knn = KnnPath(C, rng, dtype)
            self.merge = Linear(2 * C, C, rng, dtype=dtype)
        self.norm_q = LayerNorm(C, dtype)
        self.norm_kv = LayerNorm(C, dtype)
        self.cross_attn = MultiHeadAttention(C, cfg.heads, rng, dtype)
        self.norm3 = LayerNorm(C, dtype)
        self.ffn = FeedForward(C, cfg.ffn_ratio, rng, dtype)
        self._geometric = geometric

    def forward(self, x: Tensor, memory: Tensor, mask, neighbors) -> Tensor:
        h = self.norm1(x)
        a = self.self_attn(h, h, h, mask)
        if self._geometric:
            a = self.merge(T.concat([a, self.knn(h, neighbors)], axis=-1))
        x = x + a
        m = self.norm_kv(memory)
        x = x + self.cross_attn(self.norm_q(x), m, m)
        return x + self.ffn(self.norm3(x))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.blocks = [EncoderBlock(cfg, rng, geometric=(i == 0), dtype=dtype)
                       for i in range(cfg.enc_depth)]
        self._k = cfg.k_geo

    def neighbors(self, coords: np.ndarray) -> np.ndarray | None:
        if not self.blocks:
            return None
        return grouped_knn(coords, self._k)

    def forward(self, state: ProxySequenceState, neighbors: np.ndarray | None = None
                ) -> ProxySequenceState:
        if self.blocks and neighbors is None:
            neighbors = self.neighbors(state.coords)
        x = state.features
        for block in self.blocks:
            x = block(x, neighbors)
        return ProxySequenceState(state.coords, x)


class Decoder(Module):
    def __init__(self, cfg: ModelConfig, rng, dtype=np.float32):
        self.blocks = [DecoderBlock(cfg, rng, geometric=(i == 0), dtype=dtype)
                       for i in range(cfg.dec_depth)]
        self._k = cfg.k_geo

    def forward(self, queries: ProxySequenceState, memory: ProxySequenceState,
                mask: np.ndarray | None = None, groups: list[int] | None = None
                ) -> ProxySequenceState:
        L = queries.features.shape[1]
        if mask is not None:
            mask = check_mask(mask, L, L)
        neighbors = grouped_knn(queries.coords, self._k, groups) if self.blocks else None
        x = queries.features
        for block in self.blocks:
            x = block(x, memory.features, mask, neighbors)
        return ProxySequenceState(queries.coords, x)


def encode(proxies, encoder: Encoder, neighbors=None) -> ProxySequenceState:
    return encoder(ProxySequenceState(proxies.centers, proxies.features), neighbors)


def decode(queries: ProxySequenceState, memory: ProxySequenceState, mask, decoder: Decoder,
           groups=None) -> ProxySequenceState:
    return decoder(queries, memory, mask, groups)
