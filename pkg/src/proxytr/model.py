"""The assembled completion network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attention import Decoder, Encoder, ProxySequenceState
from .config import ModelConfig
from .errors import DimensionError
from .nn import Module
from .proxy import ExtractorPlan, ProxyExtractor
from .querygen import NoiseSpec, QueryGenerator, denoise_queries, select_queries
from .rebuild import CompletionResult, FoldingHead, assemble, denoise_patches
from .validation import check_cloud_batch


@dataclass
class InputPlan:
    """Geometry that depends on the partial cloud only; reusable across steps."""

    extractor: ExtractorPlan
    encoder_neighbors: np.ndarray | None

    def subset(self, rows) -> InputPlan:
        nb = None if self.encoder_neighbors is None else self.encoder_neighbors[rows]
        return InputPlan(self.extractor.subset(rows), nb)


class CompletionModel(Module):
    """Proxy extractor -> encoder -> query generation -> decoder -> folding head.

    ``mode="pointr"`` concatenates predicted patches with the raw input;
    ``mode="adapointr"`` selects queries from a bank and rebuilds everything
    through the head. Denoising queries are added only in ``adapointr`` mode,
    when a ground truth is passed with ``denoise=True``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        dtype = np.dtype(cfg.dtype)
        rng = np.random.default_rng(seed)
        self.extractor = ProxyExtractor(cfg, rng, dtype)
        self.encoder = Encoder(cfg, rng, dtype)
        self.querygen = QueryGenerator(cfg, rng, dtype)
        self.decoder = Decoder(cfg, rng, dtype)
        self.head = FoldingHead(cfg, rng, dtype)
        self._cfg = cfg
        self._dtype = dtype

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    def prepare(self, partial) -> InputPlan:
        pts = self._check(partial)
        plan = self.extractor.plan(pts)
        return InputPlan(plan, self.encoder.neighbors(plan.centers))

    def _check(self, partial) -> np.ndarray:
        pts = check_cloud_batch(partial, "partial", dtype=np.float64)
        if pts.shape[1] != self._cfg.n_input:
            raise DimensionError(
                f"partial clouds have {pts.shape[1]} points, model expects {self._cfg.n_input}")
        return pts

    def forward(self, partial, ground_truth=None, denoise: bool = True,
                rng: np.random.Generator | None = None, plan: InputPlan | None = None
                ) -> CompletionResult:
        cfg = self._cfg
        pts = self._check(partial)
        plan = plan if plan is not None else self.prepare(pts)
        proxies = self.extractor(pts, plan.extractor)
        memory = self.encoder(ProxySequenceState(proxies.centers, proxies.features),
                              plan.encoder_neighbors)
        selected = origin = None
        if cfg.mode == "adapointr":
            bank, g = self.querygen.bank(proxies.features, memory.features)
            picked, selected = select_queries(bank, cfg.n_queries)
            coords, feats, origin = picked.coords, picked.features, picked.origin
        else:
            coords, feats, g = self.querygen.dynamic(memory.features)
        M = coords.shape[1]
        # denoising queries belong to the adaptive variant only
        use_dn = denoise and ground_truth is not None and cfg.mode == "adapointr"
        k = cfg.n_denoise if use_dn else 0
        mask = groups = noise = None
        q_coords, q_feats = coords.data, feats
        if k:
            gt = check_cloud_batch(ground_truth, "ground_truth", dtype=np.float64)
            rng = rng if rng is not None else np.random.default_rng(0)
            noise, mask = denoise_queries(gt, g, NoiseSpec(k, cfg.noise_scale), rng,
                                          self.querygen, M)
            q_coords = np.concatenate([coords.data, noise.coords.astype(self._dtype)], axis=1)
            q_feats = T.concat([feats, noise.features], axis=1)
            groups = [M, k]
        hidden = self.decoder(ProxySequenceState(q_coords, q_feats), memory, mask, groups)
        h = hidden.features
        h_main = h[:, :M] if k else h
        patches = self.head(h_main, coords)
        dense = assemble(cfg.mode, pts, patches)
        result = CompletionResult(coords, dense, selected=selected, origin=origin)
        if k:
            result.denoise_patches = denoise_patches(h[:, M:], noise.clean, self.head)
            result.denoise_centers = noise.clean
        return result

    def complete(self, partial, plan: InputPlan | None = None) -> np.ndarray:
        """Inference: dense completions as a (B, n_out, 3) array."""
        with T.no_grad():
            return self.forward(partial, plan=plan).dense.data.copy()
