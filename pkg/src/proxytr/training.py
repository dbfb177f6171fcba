"""Losses, the AdamW optimiser, the training loop and checkpoints."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, TextIO

import numpy as np
from scipy.spatial import cKDTree

from . import checkpoint
from . import tensor as T
from .config import ModelConfig, TrainConfig
from .errors import CheckpointError, DimensionError, DomainError, NonFiniteLossError, UsageError
from .model import CompletionModel, InputPlan
from .nn import Module
from .rebuild import gt_local_patches
from .tensor import Tensor
from .validation import check_cloud_batch


def _brute_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = (np.einsum("bij,bij->bi", a, a)[:, :, None] + np.einsum("bij,bij->bi", b, b)[:, None, :]
         - 2.0 * np.matmul(a, np.swapaxes(b, 1, 2)))
    return np.argmin(d, axis=2), np.argmin(d, axis=1)


def nn_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour indices both ways: a -> b as (B, n) and b -> a as (B, m)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    finite = np.isfinite(a).all() and np.isfinite(b).all()
    if a.shape[1] * b.shape[1] <= 1 << 14 or not finite:
        # non-finite values flow through so the loss check can name the term
        with np.errstate(invalid="ignore", over="ignore"):
            return _brute_pair(a, b)
    ab = np.empty(a.shape[:2], dtype=np.int64)
    ba = np.empty(b.shape[:2], dtype=np.int64)
    for i in range(len(a)):
        ab[i] = cKDTree(b[i]).query(a[i])[1]
        ba[i] = cKDTree(a[i]).query(b[i])[1]
    return ab, ba


def chamfer_loss(pred: Tensor, gt: np.ndarray, convention: str = "l1") -> Tensor:
    """Sum of the two directional mean nearest-neighbour distances, averaged
    over the batch. ``l1``: Euclidean per point; ``l2``: squared Euclidean.

    Nearest-neighbour assignments come from the forward values and are held
    fixed in the backward pass.
    """
    gt = np.asarray(gt)
    if pred.ndim != 3 or gt.ndim != 3 or pred.shape[0] != gt.shape[0]:
        raise DimensionError(f"chamfer_loss: shapes {pred.shape} and {gt.shape}")
    if pred.shape[1] == 0 or gt.shape[1] == 0:
        raise DomainError("chamfer_loss: empty cloud")
    i_pg, i_gp = nn_pair(pred.data, gt)
    gt_near = np.take_along_axis(gt, i_pg[..., None], axis=1).astype(pred.dtype)
    fwd = pred - gt_near
    bwd = T.take_rows(pred, i_gp) - gt.astype(pred.dtype)
    if convention == "l1":
        return T.norm(fwd).mean() + T.norm(bwd).mean()
    if convention == "l2":
        return (fwd * fwd).sum(axis=-1).mean() + (bwd * bwd).sum(axis=-1).mean()
    raise DomainError(f"unknown loss convention {convention!r}")


def loss_j0(coarse: Tensor, gt: np.ndarray, convention: str = "l1") -> Tensor:
    """Coarse centres against the full-resolution ground truth."""
    return chamfer_loss(coarse, gt, convention)


def loss_j1(dense: Tensor, gt: np.ndarray, convention: str = "l1") -> Tensor:
    return chamfer_loss(dense, gt, convention)


def loss_denoise(patches: Tensor, gt_patches: np.ndarray, convention: str = "l1") -> Tensor:
    """Mean over patches of the chamfer loss between each predicted patch and its target."""
    gt_patches = np.asarray(gt_patches)
    if patches.shape[:2] != gt_patches.shape[:2]:
        raise UsageError(f"{patches.shape[:2]} predicted patches vs {gt_patches.shape[:2]} targets")
    B, k, S, _ = patches.shape
    if B * k == 0:
        return Tensor(np.zeros((), dtype=patches.dtype))
    return chamfer_loss(patches.reshape(B * k, S, 3),
                        gt_patches.reshape(B * k, gt_patches.shape[2], 3), convention)


@dataclass
class LossBreakdown:
    j0: float
    j1: float
    j_denoise: float
    total: float


def objective(model: CompletionModel, result, gt: np.ndarray, cfg: TrainConfig
              ) -> tuple[Tensor, LossBreakdown]:
    """Total loss J0 + J1 + lambda * J_denoise and its breakdown."""
    j0 = loss_j0(result.coarse, gt, cfg.loss)
    j1 = loss_j1(result.dense, gt, cfg.loss)
    total = j0 + j1
    jd_value = 0.0
    if result.denoise_patches is not None:
        targets = gt_local_patches(gt, result.denoise_centers, model.head.patch_size)
        jd = loss_denoise(result.denoise_patches, targets, cfg.loss)
        jd_value = float(jd.data)
        total = total + jd * cfg.denoise_weight
    j0v, j1v = float(j0.data), float(j1.data)
    parts = {"j0": j0v, "j1": j1v, "j_denoise": jd_value,
             "total": j0v + j1v + cfg.denoise_weight * jd_value}
    for name, value in parts.items():
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
    return total, LossBreakdown(**parts)


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.lr == 0:
                continue
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data * (1.0 - self.lr * self.weight_decay) - self.lr * update).astype(p.dtype)


def lr_at(cfg: TrainConfig, step: int, n_samples: int) -> float:
    if not cfg.lr_decay_every or cfg.lr_decay == 1.0:
        return cfg.lr
    epoch = step * cfg.batch_size // max(1, n_samples)
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def train_step(model: CompletionModel, optimizer: AdamW, partial: np.ndarray, gt: np.ndarray,
               cfg: TrainConfig, rng: np.random.Generator, plan: InputPlan | None = None,
               denoise: bool = True) -> LossBreakdown:
    """Forward, loss, backward and one optimiser update."""
    optimizer.zero_grad()
    result = model(partial, gt, denoise=denoise, rng=rng, plan=plan)
    total, parts = objective(model, result, gt, cfg)
    total.backward()
    optimizer.step()
    return parts


def batch_rows(seed: int, step: int, n: int, batch: int) -> tuple[np.ndarray, np.random.Generator]:
    """Sample indices for ``step``, fixed by ``(seed, step)`` alone so runs can resume."""
    rng = np.random.default_rng([int(seed), int(step), 1])
    rows = rng.choice(n, size=batch, replace=n < batch)
    return np.sort(rows), rng


class Trainer:
    """Owns a model, its optimiser and a cached input plan for the training set."""

    def __init__(self, model: CompletionModel, partials, completes, cfg: TrainConfig,
                 denoise: bool = True):
        self.model = model
        self.cfg = cfg
        self.partials = check_cloud_batch(partials, "partials", dtype=np.float64)
        self.completes = check_cloud_batch(completes, "completes", dtype=np.float64)
        if len(self.partials) != len(self.completes):
            raise DimensionError("partials and completes differ in sample count")
        self.denoise = denoise
        self.optimizer = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
        self.plan = model.prepare(self.partials)
        self.step = 0
        self.history: list[dict] = []

    def run(self, steps: int | None = None, log: TextIO | None = None,
            callback: Callable[[int, LossBreakdown], None] | None = None,
            checkpoint_path: str | None = None) -> list[dict]:
        steps = self.cfg.steps if steps is None else steps
        n = len(self.partials)
        for _ in range(steps):
            rows, rng = batch_rows(self.cfg.seed, self.step, n, self.cfg.batch_size)
            self.optimizer.lr = lr_at(self.cfg, self.step, n)
            parts = train_step(self.model, self.optimizer, self.partials[rows],
                               self.completes[rows], self.cfg, rng, self.plan.subset(rows),
                               self.denoise)
            self.step += 1
            record = {"step": self.step, **asdict(parts), "lr": self.optimizer.lr}
            self.history.append(record)
            if log is not None and self.step % max(1, self.cfg.log_every) == 0:
                log.write(json.dumps(record) + "\n")
            if callback is not None:
                callback(self.step, parts)
            if checkpoint_path and self.cfg.checkpoint_every and self.step % self.cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, self.model, self.optimizer, self.step)
        return self.history

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.optimizer, self.step)

    def restore(self, path) -> None:
        self.step = load_checkpoint(path, self.model, self.optimizer)


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, model: Module, optimizer: AdamW | None = None, step: int = 0) -> None:
    entries: dict[str, np.ndarray] = {}
    names = []
    for name, p in model.named_parameters():
        entries[f"model/{name}"] = p.data
        names.append(name)
    entries["meta/step"] = np.array(float(step))
    if optimizer is not None:
        entries["optim/t"] = np.array(float(optimizer.t))
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            entries[f"optim/m/{name}"] = m
            entries[f"optim/v/{name}"] = v
    checkpoint.save(path, entries)


def load_checkpoint(path, model: Module, optimizer: AdamW | None = None) -> int:
    """Load weights (and optimiser moments when given); returns the saved step."""
    entries = checkpoint.load(path)
    params = dict(model.named_parameters())
    for name, p in params.items():
        key = f"model/{name}"
        if key not in entries:
            raise CheckpointError(f"checkpoint lacks tensor {name!r}")
        if entries[key].shape != p.shape:
            raise DimensionError(
                f"tensor {name!r}: checkpoint shape {entries[key].shape} != model shape {p.shape}")
    extra = sorted(k[6:] for k in entries if k.startswith("model/") and k[6:] not in params)
    if extra:
        raise CheckpointError(f"checkpoint has tensors the model lacks: {extra[:5]}")
    for name, p in params.items():
        p.data = entries[f"model/{name}"].astype(p.dtype).copy()
        p.grad = None
    if optimizer is not None and "optim/t" in entries:
        optimizer.t = int(entries["optim/t"])
        for i, name in enumerate(params):
            optimizer.m[i] = entries[f"optim/m/{name}"].astype(optimizer.m[i].dtype).copy()
            optimizer.v[i] = entries[f"optim/v/{name}"].astype(optimizer.v[i].dtype).copy()
    return int(entries.get("meta/step", np.array(0.0)))


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def save_model(path, model: CompletionModel, optimizer: AdamW | None = None, step: int = 0) -> None:
    """Checkpoint plus a ``<path>.json`` sidecar holding the model config."""
    save_checkpoint(path, model, optimizer, step)
    sidecar_path(path).write_text(
        json.dumps({"model": model.config.to_dict(), "step": step}, indent=2, sort_keys=True) + "\n")


def load_model(path) -> tuple[CompletionModel, int]:
    side = sidecar_path(path)
    if not side.exists():
        raise UsageError(f"missing model config sidecar {side}")
    cfg = ModelConfig.from_dict(json.loads(side.read_text())["model"])
    model = CompletionModel(cfg)
    step = load_checkpoint(path, model)
    return model, step
