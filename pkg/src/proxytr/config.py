"""Model and training configuration, presets, and the run-config schema."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import DomainError, UsageError

MODES = ("pointr", "adapointr")


@dataclass(frozen=True)
class EdgeLayerSpec:
    width: int
    k: int
    n_out: int  # -1 means "the proxy count"


@dataclass
class ModelConfig:
    mode: str = "adapointr"
    n_input: int = 2048
    n_output: int = 8192
    n_proxies: int = 256
    width: int = 384
    heads: int = 6
    enc_depth: int = 6
    dec_depth: int = 8
    k_geo: int = 8
    stem_width: int = 8
    edge_layers: tuple = (
        EdgeLayerSpec(32, 8, 2048), EdgeLayerSpec(64, 8, 512),
        EdgeLayerSpec(64, 8, 512), EdgeLayerSpec(128, 8, -1),
    )
    extractor: str = "dgcnn"
    n_queries: int = 256
    n_input_queries: int | None = None
    n_output_queries: int | None = None
    global_width: int | None = None
    ffn_ratio: int = 4
    fold_ratio: int = 2
    n_denoise: int = 64
    noise_scale: float = 0.05
    query_kind: str = "dynamic"
    dtype: str = "float32"

    def __post_init__(self):
        self.edge_layers = tuple(
            e if isinstance(e, EdgeLayerSpec) else EdgeLayerSpec(*e) for e in self.edge_layers)
        self.validate()

    def validate(self) -> None:
        if self.mode not in MODES:
            raise DomainError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.width % self.heads:
            raise DomainError(f"width {self.width} not divisible by {self.heads} heads")
        if self.k_geo < 1:
            raise DomainError("k_geo must be >= 1")
        if self.extractor not in ("dgcnn", "pointlike"):
            raise DomainError(f"unknown extractor {self.extractor!r}")
        if self.query_kind == "static":
            raise DomainError("learnable static queries are not supported")
        if self.query_kind != "dynamic":
            raise DomainError(f"unknown query kind {self.query_kind!r}")
        if self.n_denoise < 0 or self.noise_scale < 0:
            raise DomainError("n_denoise and noise_scale must be non-negative")
        if self.dtype not in ("float32", "float64"):
            raise DomainError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.n_proxies > self.n_input:
            raise DomainError("n_proxies exceeds n_input")
        if self.n_output <= (self.n_input if self.mode == "pointr" else 0):
            raise DomainError("n_output leaves nothing to predict")

    @property
    def m_input(self) -> int:
        return self.n_input_queries or self.n_queries

    @property
    def m_output(self) -> int:
        return self.n_output_queries or self.n_queries

    @property
    def pooled_width(self) -> int:
        return self.global_width or 2 * self.width

    @property
    def patch_grid(self) -> tuple[int, int]:
        missing = self.n_output - (self.n_input if self.mode == "pointr" else 0)
        return seed_grid_shape(math.ceil(missing / self.n_queries))

    @property
    def patch_size(self) -> int:
        gx, gy = self.patch_grid
        return gx * gy

    @property
    def output_count(self) -> int:
        base = self.n_input if self.mode == "pointr" else 0
        return base + self.n_queries * self.patch_size

    def resolved_edge_layers(self) -> list[EdgeLayerSpec]:
        return [EdgeLayerSpec(e.width, e.k, self.n_proxies if e.n_out < 0 else e.n_out)
                for e in self.edge_layers]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["edge_layers"] = [list(dataclasses.astuple(e)) for e in self.edge_layers]
        return d

    @classmethod
    def from_dict(cls, data: dict) -> ModelConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown model config keys: {unknown}")
        return cls(**data)


def seed_grid_shape(size: int) -> tuple[int, int]:
    """Most nearly square (gx, gy), gx >= gy, with gx * gy == size."""
    if size < 1:
        raise DomainError("patch size must be positive")
    gy = max(d for d in range(1, int(math.isqrt(size)) + 1) if size % d == 0)
    return size // gy, gy


PRESETS: dict[str, dict] = {
    "pcn": dict(mode="adapointr", n_input=2048, n_output=16384, n_proxies=256, n_queries=512,
                n_denoise=64),
    "shapenet55": dict(mode="adapointr", n_input=2048, n_output=8192, n_proxies=256,
                       n_queries=256, n_denoise=64),
    # widths / 4 (stem kept at 8), proxies 32, shallow stacks
    "desk": dict(mode="adapointr", n_input=256, n_output=1024, n_proxies=32, width=96, heads=6,
                 enc_depth=2, dec_depth=2, k_geo=8, stem_width=8,
                 edge_layers=((8, 8, 256), (16, 8, 64), (16, 8, 64), (32, 8, -1)),
                 n_queries=32, n_denoise=8),
    "gradcheck": dict(mode="adapointr", n_input=12, n_output=16, n_proxies=4, width=16, heads=2,
                      enc_depth=1, dec_depth=1, k_geo=2, stem_width=4,
                      edge_layers=((8, 4, 8), (8, 3, -1)), n_queries=4, n_denoise=2,
                      dtype="float64"),
}


def model_preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(**{**PRESETS[name], **overrides})


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    steps: int = 2000
    denoise_weight: float = 1.0
    loss: str = "l2"
    lr_decay: float = 1.0
    lr_decay_every: int = 0
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if not self.lr >= 0:
            raise DomainError("lr must be >= 0")
        if self.denoise_weight < 0:
            raise DomainError("denoise_weight must be >= 0")
        if self.loss not in ("l1", "l2"):
            raise DomainError(f"loss must be 'l1' or 'l2', got {self.loss!r}")
        if self.batch_size < 1 or self.steps < 0:
            raise DomainError("batch_size must be >= 1 and steps >= 0")

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown train config keys: {unknown}")
        return cls(**data)


TRAIN_PRESETS: dict[str, dict] = {
    "pcn": dict(lr=1e-4, weight_decay=5e-4, batch_size=48, steps=0, loss="l1",
                lr_decay=0.9, lr_decay_every=20),
    "shapenet55": dict(lr=1e-4, weight_decay=5e-4, batch_size=64, steps=0, loss="l2",
                       lr_decay=0.76, lr_decay_every=20),
    "desk": dict(lr=1e-3, weight_decay=5e-4, batch_size=8, steps=2000, loss="l1"),
    "gradcheck": dict(lr=1e-4, batch_size=1, steps=1),
}


def train_preset(name: str, **overrides) -> TrainConfig:
    if name not in TRAIN_PRESETS:
        raise UsageError(f"unknown preset {name!r}")
    return TrainConfig(**{**TRAIN_PRESETS[name], **overrides})


@dataclass
class RunConfig:
    """Everything a CLI run needs; loaded from JSON, then overridden by flags."""

    preset: str = "desk"
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)
    seed: int = 0
    out: str | None = None

    def model_config(self) -> ModelConfig:
        return model_preset(self.preset, **self.model)

    def train_config(self) -> TrainConfig:
        return train_preset(self.preset, **{"seed": self.seed, **self.train})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> RunConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {unknown}")
        run = cls(**data)
        run.model_config()  # validates model keys
        run.train_config()
        unknown_data = sorted(set(run.data) - DATA_KEYS)
        if unknown_data:
            raise UsageError(f"unknown data config keys: {unknown_data}")
        return run

    @classmethod
    def load(cls, path: str | Path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


DATA_KEYS = {"method", "count", "n_complete", "n_input", "views", "difficulty", "noise_frac",
             "fixed_views", "dataset", "split"}
