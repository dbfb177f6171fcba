"""Synthesis of (partial, complete) training pairs.

Two ways to make a partial cloud from a complete one: crop away the points
farthest from a viewpoint, or render a depth image, perturb it and lift the
valid pixels back to 3D. Complete clouds come from procedural primitives.

Every sample draws from its own generator seeded by ``(seed, index)``, so
serial and parallel generation agree bit for bit.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry
from .errors import DegenerateInputError, DomainError, UsageError
from .validation import check_cloud, check_count

DIFFICULTIES = {0.25: "simple", 0.5: "moderate", 0.75: "hard"}
DIFFICULTY_FRACTION = {v: k for k, v in DIFFICULTIES.items()}
VIEWPOINT_RADIUS = 2.0
CAMERA_DISTANCE = 3.0
MIN_VALID_PIXELS = 16
TRAIN_VIEWS_BACKPROJECT = 16

# cube vertices: the fixed evaluation viewpoints
EVAL_VIEWPOINTS = np.array(
    [[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64
) / np.sqrt(3.0)


@dataclass
class DatasetSample:
    partial: np.ndarray
    complete: np.ndarray
    viewpoint: np.ndarray
    n_removed: int
    difficulty: str = "random"


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera looking at ``target``; intrinsics in pixels."""

    eye: tuple
    target: tuple = (0.0, 0.0, 0.0)
    width: int = 200
    height: int = 200
    focal: float = 200.0

    def __post_init__(self):
        if np.allclose(self.eye, self.target):
            raise DomainError("camera eye coincides with its target")
        if self.width <= 0 or self.height <= 0 or not self.focal > 0:
            raise DomainError("camera extents and focal length must be positive")

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        eye = np.asarray(self.eye, dtype=np.float64)
        forward = np.asarray(self.target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        up = np.array([0.0, 0.0, 1.0])
        if abs(forward @ up) > 0.99:
            up = np.array([0.0, 1.0, 0.0])
        right = np.cross(forward, up)
        right /= np.linalg.norm(right)
        return right, np.cross(right, forward), forward


def difficulty_for(n_removed: int, total: int) -> str:
    return DIFFICULTIES.get(n_removed / total, "random")


def random_viewpoint(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def sample_n_removed(rng: np.random.Generator, total: int) -> int:
    """Uniform crop size between 25% and 75% of the complete cloud."""
    return int(rng.integers(total // 4, 3 * total // 4 + 1))


def resample(points: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """Downsample by farthest point sampling, or pad by replicating random points."""
    if len(points) >= count:
        return points[geometry.fps(points, count)]
    extra = rng.integers(0, len(points), count - len(points))
    return np.concatenate([points, points[extra]])


def crop_split(complete, viewpoint, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices (kept, removed) after dropping the ``n`` points farthest from the viewpoint.

    The viewpoint direction is placed at radius 2 around the cloud. Equal
    distances are removed in index order.
    """
    pts = check_cloud(complete, "complete")
    n = check_count(n, "n_removed", 1, len(pts) - 1)
    view = np.asarray(viewpoint, dtype=np.float64)
    if abs(np.linalg.norm(view) - 1.0) > 1e-6:
        raise DomainError("viewpoint must be a unit vector")
    d = np.linalg.norm(pts - VIEWPOINT_RADIUS * view, axis=1)
    order = np.lexsort((np.arange(len(pts)), -d))
    return np.sort(order[n:]), np.sort(order[:n])


def crop_partial(complete, viewpoint, n: int, rng: np.random.Generator | None = None,
                 n_input: int = 2048) -> DatasetSample:
    pts = check_cloud(complete, "complete")
    kept, _ = crop_split(pts, viewpoint, n)
    rng = rng if rng is not None else np.random.default_rng(0)
    partial = resample(pts[kept], n_input, rng)
    return DatasetSample(partial, pts, np.asarray(viewpoint, dtype=np.float64), int(n),
                         difficulty_for(n, len(pts)))


def _project(points: np.ndarray, camera: CameraModel):
    right, up, forward = camera.frame()
    rel = points - np.asarray(camera.eye, dtype=np.float64)
    z = rel @ forward
    if not np.any(z > 0):
        raise DegenerateInputError("all points lie behind the camera")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.focal * (rel @ right) / z + camera.width / 2
        v = -camera.focal * (rel @ up) / z + camera.height / 2
    col = np.floor(u)
    row = np.floor(v)
    ok = (z > 0) & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
    return row, col, z, ok


def render_index(complete, camera: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer splat. Returns ``(depth, winner)``: per-pixel minimum depth
    (``inf`` where empty) and the index of the point that produced it (-1)."""
    pts = check_cloud(complete, "complete")
    row, col, z, ok = _project(pts, camera)
    idx = np.flatnonzero(ok)
    pix = row[idx].astype(np.int64) * camera.width + col[idx].astype(np.int64)
    order = np.lexsort((idx, z[idx], pix))
    pix, idx = pix[order], idx[order]
    first = np.ones(len(pix), dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    depth = np.full(camera.height * camera.width, np.inf)
    winner = np.full(camera.height * camera.width, -1, dtype=np.int64)
    depth[pix[first]] = z[idx[first]]
    winner[pix[first]] = idx[first]
    shape = (camera.height, camera.width)
    return depth.reshape(shape), winner.reshape(shape)


def render_depth(complete, camera: CameraModel) -> np.ndarray:
    return render_index(complete, camera)[0]


def backproject(depth: np.ndarray, camera: CameraModel) -> np.ndarray:
    """Lift every finite pixel to 3D through its pixel centre."""
    right, up, forward = camera.frame()
    rows, cols = np.nonzero(np.isfinite(depth))
    z = depth[rows, cols]
    x = (cols + 0.5 - camera.width / 2) * z / camera.focal
    y = -(rows + 0.5 - camera.height / 2) * z / camera.focal
    eye = np.asarray(camera.eye, dtype=np.float64)
    return eye + x[:, None] * right + y[:, None] * up + z[:, None] * forward


def noised_backproject(complete, camera: CameraModel, noise_frac: float = 0.02,
                       rng: np.random.Generator | None = None, n_input: int = 2048,
                       resample_output: bool = True) -> DatasetSample:
    """Render depth, add uniform noise scaled by the valid depth range, lift back to 3D."""
    if noise_frac < 0:
        raise DomainError(f"noise_frac must be non-negative, got {noise_frac}")
    pts = check_cloud(complete, "complete")
    rng = rng if rng is not None else np.random.default_rng(0)
    depth = render_depth(pts, camera)
    valid = np.isfinite(depth)
    n_valid = int(valid.sum())
    if n_valid < MIN_VALID_PIXELS:
        raise DegenerateInputError(f"only {n_valid} valid pixels (need {MIN_VALID_PIXELS})")
    span = float(depth[valid].max() - depth[valid].min())
    noisy = depth.copy()
    noisy[valid] += rng.uniform(-noise_frac * span, noise_frac * span, n_valid)
    partial = backproject(noisy, camera)
    if resample_output:
        partial = resample(partial, n_input, rng)
    eye = np.asarray(camera.eye, dtype=np.float64)
    return DatasetSample(partial, pts, eye / np.linalg.norm(eye), len(pts) - n_valid, "random")


# -- procedural primitives ---------------------------------------------------

_DEFAULTS = {
    "sphere": {"radius": 1.0},
    "box": {"size": (1.0, 1.0, 1.0)},
    "cylinder": {"radius": 0.5, "height": 1.0},
}


def _positive(value, name):
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
        raise DomainError(f"primitive parameter {name} must be positive, got {value!r}")
    return arr


def _sample_box(size, count, rng):
    a, b, c = _positive(size, "size")
    areas = np.array([b * c, b * c, a * c, a * c, a * b, a * b])
    face = rng.choice(6, size=count, p=areas / areas.sum())
    pts = (rng.uniform(size=(count, 3)) - 0.5) * np.array([a, b, c])
    axis = face // 2
    sign = np.where(face % 2 == 0, -0.5, 0.5)
    pts[np.arange(count), axis] = sign * np.array([a, b, c])[axis]
    return pts


def _sample_cylinder(radius, height, count, rng):
    r = float(_positive(radius, "radius"))
    h = float(_positive(height, "height"))
    side, cap = 2 * np.pi * r * h, np.pi * r * r
    part = rng.choice(3, size=count, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, count)
    rad = np.where(part == 0, r, r * np.sqrt(rng.uniform(size=count)))
    z = np.where(part == 0, rng.uniform(-h / 2, h / 2, count), np.where(part == 1, -h / 2, h / 2))
    return np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)


def make_primitive(kind: str, params: dict | None, count: int,
                   rng: np.random.Generator) -> np.ndarray:
    """Uniform surface samples of a sphere, box or cylinder.

    The shape stays centred on its own centre of symmetry (the origin) and is
    scaled so the farthest sample has norm 1.
    """
    count = check_count(count, "count", 8)
    if kind not in _DEFAULTS:
        raise DomainError(f"unknown primitive {kind!r}")
    p = {**_DEFAULTS[kind], **(params or {})}
    unknown = set(p) - set(_DEFAULTS[kind])
    if unknown:
        raise DomainError(f"unknown parameters for {kind}: {sorted(unknown)}")
    if kind == "sphere":
        _positive(p["radius"], "radius")
        v = rng.normal(size=(count, 3))
        pts = float(p["radius"]) * v / np.linalg.norm(v, axis=1, keepdims=True)
    elif kind == "box":
        pts = _sample_box(p["size"], count, rng)
    else:
        pts = _sample_cylinder(p["radius"], p["height"], count, rng)
    return pts / np.max(np.linalg.norm(pts, axis=1))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_primitive(rng: np.random.Generator, count: int) -> tuple[str, np.ndarray]:
    """A randomly shaped and oriented primitive, scaled into the unit ball."""
    kind = ("sphere", "box", "cylinder")[int(rng.integers(3))]
    if kind == "sphere":
        params = {"radius": 1.0}
    elif kind == "box":
        params = {"size": tuple(rng.uniform(0.3, 1.0, 3))}
    else:
        params = {"radius": float(rng.uniform(0.2, 0.6)), "height": float(rng.uniform(0.4, 1.5))}
    pts = make_primitive(kind, params, count, rng)
    return kind, pts @ random_rotation(rng).T


# -- dataset streams -----------------------------------------------------------

def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index)])


@dataclass
class SynthItem:
    id: str
    kind: str
    complete: np.ndarray
    partials: list = field(default_factory=list)  # DatasetSample per view


def synth_item(index: int, seed: int, method: str = "crop", n_complete: int = 8192,
               n_input: int = 2048, views: int | None = None, difficulty: str = "random",
               fixed_views: bool = False, noise_frac: float = 0.02) -> SynthItem:
    """Generate one object and its partial views; pure in ``(seed, index)``."""
    rng = sample_rng(seed, index)
    kind, complete = random_primitive(rng, n_complete)
    if views is None:
        views = TRAIN_VIEWS_BACKPROJECT if method == "backproject" else 1
    if fixed_views:
        viewpoints = list(EVAL_VIEWPOINTS)
    else:
        viewpoints = [random_viewpoint(rng) for _ in range(check_count(views, "views", 1))]
    item = SynthItem(f"{index:06d}", kind, complete)
    levels = [difficulty] if difficulty != "all" else ["simple", "moderate", "hard"]
    for view in viewpoints:
        if method == "crop":
            for level in levels:
                if level == "random":
                    n = sample_n_removed(rng, n_complete)
                else:
                    if level not in DIFFICULTY_FRACTION:
                        raise DomainError(f"unknown difficulty {level!r}")
                    n = int(round(DIFFICULTY_FRACTION[level] * n_complete))
                item.partials.append(crop_partial(complete, view, n, rng, n_input))
        elif method == "backproject":
            camera = CameraModel(eye=tuple(CAMERA_DISTANCE * view))
            item.partials.append(noised_backproject(complete, camera, noise_frac, rng, n_input))
        else:
            raise UsageError(f"unknown synthesis method {method!r}")
    return item


def worker_count() -> int:
    value = os.environ.get("PROXYTR_THREADS")
    return max(1, int(value)) if value else 1


def synth_items(count: int, seed: int, **kwargs) -> list[SynthItem]:
    """Generate ``count`` items; ``PROXYTR_THREADS`` caps the worker pool."""
    count = check_count(count, "count", 1)
    workers = worker_count()
    if workers == 1:
        return [synth_item(i, seed, **kwargs) for i in range(count)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda i: synth_item(i, seed, **kwargs), range(count)))


def write_dataset(out_dir: str | os.PathLike, split: str, items: list[SynthItem],
                  meta: dict | None = None) -> Path:
    """Write ``{split}/{id}_complete.xyz`` and ``{split}/{id}_partial_{view}.xyz``
    plus a ``manifest.json`` at the dataset root."""
    root = Path(out_dir)
    folder = root / split
    folder.mkdir(parents=True, exist_ok=True)
    entries = []
    for item in items:
        geometry.write_xyz(folder / f"{item.id}_complete.xyz", item.complete)
        views = []
        for v, sample in enumerate(item.partials):
            geometry.write_xyz(folder / f"{item.id}_partial_{v}.xyz", sample.partial)
            views.append({"view": v, "viewpoint": [float(x) for x in sample.viewpoint],
                          "n_removed": int(sample.n_removed), "difficulty": sample.difficulty})
        entries.append({"id": item.id, "kind": item.kind, "views": views})
    manifest_path = root / "manifest.json"
    manifest = {}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest.setdefault("splits", {})[split] = entries
    if meta:
        manifest.setdefault("meta", {})[split] = meta
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_split(root: str | os.PathLike, split: str):
    """Yield ``(id, view, difficulty, partial, complete)`` from a written dataset."""
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if split not in manifest.get("splits", {}):
        raise UsageError(f"split {split!r} not in {root / 'manifest.json'}")
    for entry in manifest["splits"][split]:
        complete = geometry.read_xyz(root / split / f"{entry['id']}_complete.xyz")
        for view in entry["views"]:
            partial = geometry.read_xyz(root / split / f"{entry['id']}_partial_{view['view']}.xyz")
            yield entry["id"], view["view"], view["difficulty"], partial, complete
