"""Evaluation metrics: Chamfer distance, F-Score, Fidelity and MMD."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError
from .validation import check_cloud

PRESETS = ("cd_l1", "cd_l2")
DEFAULT_THRESHOLD = 0.01


def nn_sq_dists(a: np.ndarray, b: np.ndarray, chunk: int = 1 << 21) -> np.ndarray:
    """Squared distance from each row of ``a`` to its nearest row of ``b``."""
    rows = max(1, chunk // len(b))
    out = np.empty(len(a))
    for i in range(0, len(a), rows):
        diff = a[i:i + rows, None, :] - b[None, :, :]
        out[i:i + rows] = np.einsum("ijk,ijk->ij", diff, diff).min(axis=1)
    return out


def _nn_l1_dists(a: np.ndarray, b: np.ndarray, chunk: int = 1 << 21) -> np.ndarray:
    rows = max(1, chunk // len(b))
    out = np.empty(len(a))
    for i in range(0, len(a), rows):
        out[i:i + rows] = np.abs(a[i:i + rows, None, :] - b[None, :, :]).sum(-1).min(axis=1)
    return out


def _ordered_mean(values: np.ndarray) -> float:
    # summing sorted values makes the result independent of point order
    return float(np.sort(values).sum() / len(values))


def chamfer(P, G, preset: str = "cd_l2", l1_norm: str = "euclidean") -> float:
    """Symmetric Chamfer distance.

    ``cd_l2`` adds the two directional means of squared nearest-neighbour
    distances. ``cd_l1`` averages the two directional means of Euclidean
    distances; ``l1_norm="manhattan"`` swaps the per-point distance for the
    L1 norm of the coordinate difference.
    """
    P = check_cloud(P, "P")
    G = check_cloud(G, "G")
    if preset == "cd_l2":
        return _ordered_mean(nn_sq_dists(P, G)) + _ordered_mean(nn_sq_dists(G, P))
    if preset != "cd_l1":
        raise DomainError(f"unknown chamfer preset {preset!r}; expected one of {PRESETS}")
    if l1_norm == "euclidean":
        fwd, bwd = np.sqrt(nn_sq_dists(P, G)), np.sqrt(nn_sq_dists(G, P))
    elif l1_norm == "manhattan":
        fwd, bwd = _nn_l1_dists(P, G), _nn_l1_dists(G, P)
    else:
        raise DomainError(f"unknown l1_norm {l1_norm!r}")
    return (_ordered_mean(fwd) + _ordered_mean(bwd)) / 2


def fscore(P, G, d: float = DEFAULT_THRESHOLD) -> float:
    """Harmonic mean of precision and recall at distance threshold ``d``."""
    if not d > 0:
        raise DomainError(f"fscore threshold must be positive, got {d}")
    P = check_cloud(P, "P")
    G = check_cloud(G, "G")
    precision = float(np.mean(np.sqrt(nn_sq_dists(P, G)) < d))
    recall = float(np.mean(np.sqrt(nn_sq_dists(G, P)) < d))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def fidelity(input_cloud, output_cloud) -> float:
    """Mean distance from each input point to its nearest output point."""
    inp = check_cloud(input_cloud, "input")
    out = check_cloud(output_cloud, "output")
    return _ordered_mean(np.sqrt(nn_sq_dists(inp, out)))


def mmd(output_cloud, references: Sequence) -> float:
    """Minimal matching distance: smallest cd_l2 between the output and any reference."""
    if len(references) == 0:
        raise DomainError("mmd: empty reference set")
    out = check_cloud(output_cloud, "output")
    return min(chamfer(out, ref, "cd_l2") for ref in references)


@dataclass(frozen=True)
class MetricReport:
    cd_l1: float
    cd_l2: float
    fscore: float
    threshold: float
    n_pred: int
    n_gt: int


def evaluate(P, G, d: float = DEFAULT_THRESHOLD) -> MetricReport:
    P = check_cloud(P, "P")
    G = check_cloud(G, "G")
    return MetricReport(chamfer(P, G, "cd_l1"), chamfer(P, G, "cd_l2"), fscore(P, G, d),
                        d, len(P), len(G))


def batch_report(records: Iterable[tuple[str, MetricReport]]) -> dict:
    """Per-sample records plus aggregate means, keys in a fixed order."""
    samples = []
    for sid, rep in records:
        samples.append({"id": sid, "cd_l1": rep.cd_l1, "cd_l2": rep.cd_l2, "fscore": rep.fscore})
    if not samples:
        raise DomainError("batch_report: no records")
    mean = {key: float(np.mean([s[key] for s in samples])) for key in ("cd_l1", "cd_l2", "fscore")}
    return {"samples": samples, "mean": mean, "count": len(samples)}


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2)


def report_dict(rep: MetricReport) -> dict:
    return asdict(rep)
