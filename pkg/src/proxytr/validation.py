"""Input validation helpers shared by the estimators and the kernels."""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, DomainError


def check_cloud(points, name: str = "cloud", dtype=np.float64, min_points: int = 1) -> np.ndarray:
    """Return ``points`` as a finite (n, 3) array with at least ``min_points`` rows."""
    arr = np.asarray(points, dtype=dtype)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise DimensionError(f"{name}: expected shape (n, 3), got {arr.shape}")
    if arr.shape[0] < min_points:
        if arr.shape[0] == 0:
            raise DomainError(f"{name}: empty point cloud")
        raise DomainError(f"{name}: need at least {min_points} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite coordinates")
    return arr


def check_cloud_batch(clouds, name: str = "X", dtype=np.float32) -> np.ndarray:
    """Stack a batch of equally sized clouds into a (B, n, 3) array.

    Accepts a 3-D array or a sequence of (n, 3) arrays; a single (n, 3) cloud
    is promoted to a batch of one.
    """
    if isinstance(clouds, np.ndarray) and clouds.ndim == 2:
        clouds = clouds[None]
    if not isinstance(clouds, np.ndarray):
        clouds = list(clouds)
        if not clouds:
            raise DomainError(f"{name}: empty batch")
        sizes = {np.shape(c) for c in clouds}
        if len(sizes) != 1:
            raise DimensionError(f"{name}: clouds in a batch must share a shape, got {sorted(sizes)}")
    arr = np.asarray(clouds, dtype=dtype)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DimensionError(f"{name}: expected shape (batch, n, 3), got {arr.shape}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise DomainError(f"{name}: empty batch or empty clouds")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name}: non-finite coordinates")
    return arr


def check_count(value: int, name: str, low: int = 1, high: int | None = None) -> int:
    if int(value) != value:
        raise DomainError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < low or (high is not None and value > high):
        bound = f"[{low}, {high}]" if high is not None else f">= {low}"
        raise DomainError(f"{name}={value} outside {bound}")
    return value
