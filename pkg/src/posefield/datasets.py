"""Dataset ingestion and the procedural toy-scene oracle.

The toy scene is rendered by a self-contained numpy ray tracer that shares
no code with the differentiable renderer in :mod:`posefield.field`; it is
the independent oracle for end-to-end tests. Reference poses ride along for
evaluation only: training code consumes :class:`TrainingViews`, a view of
the dataset that structurally has no pose field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .errors import (
    InconsistentImageSizes,
    MissingFile,
    NoMaskSource,
    SchemaError,
)
from .geometry import Intrinsics


@dataclass
class TrainingViews:
    """What the training loop is allowed to see: images and intrinsics only."""

    images: torch.Tensor  # (n, H, W, C) in [0, 1]
    intrinsics: Intrinsics


@dataclass
class SceneDataset:
    images: np.ndarray                      # (n, H, W, C), float32 in [0, 1], C in {1, 3}
    intrinsics: Intrinsics
    reference_poses: np.ndarray | None = None  # (n, 4, 4) camera-to-world, eval only
    alphas: np.ndarray | None = None           # (n, H, W, 1) coverage masks, if known
    split: list[str] | None = None             # per-image 'train' / 'test' tags

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] not in (1, 3):
            raise InconsistentImageSizes(
                f"expected (n, H, W, 1|3) images, got {self.images.shape}"
            )
        if self.reference_poses is not None and len(self.reference_poses) != len(self.images):
            raise SchemaError("reference pose count does not match image count")

    @property
    def n_views(self) -> int:
        return len(self.images)

    def indices(self, tag: str | None = None) -> list[int]:
        if tag is None or self.split is None:
            return list(range(self.n_views))
        return [i for i, t in enumerate(self.split) if t == tag]

    def training_views(self, dtype: torch.dtype = torch.float32) -> TrainingViews:
        idx = self.indices("train")
        images = torch.from_numpy(self.images[idx]).to(dtype)
        return TrainingViews(images=images, intrinsics=self.intrinsics)


def _load_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return arr


def load_dataset(
    path: str | Path,
    fmt: str = "nerf_synthetic_json",
    background: tuple[float, float, float] = (1.0, 1.0, 1.0),
    camera_angle_x: float | None = None,
) -> SceneDataset:
    """Load a scene from a transforms JSON file or a plain image directory.

    ``nerf_synthetic_json``: ``path`` is the transforms file (or a directory
    containing ``transforms_train.json``); per-frame 4x4 camera-to-world
    matrices become reference poses and fx = fy = 0.5 W / tan(angle_x / 2).
    RGBA images are composited over ``background`` with the alpha kept as a
    mask channel.

    ``image_dir``: all PNG/JPG files in the directory, no poses;
    ``camera_angle_x`` (default 0.6911112) fixes the intrinsics.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(str(path))
    if fmt == "nerf_synthetic_json":
        json_path = path / "transforms_train.json" if path.is_dir() else path
        if not json_path.exists():
            raise MissingFile(str(json_path))
        try:
            meta = json.loads(json_path.read_text())
            angle = float(meta["camera_angle_x"])
            frames = meta["frames"]
            names = [f["file_path"] for f in frames]
            mats = np.array([f["transform_matrix"] for f in frames], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad transforms schema in {json_path}: {exc}") from exc
        if mats.ndim != 3 or mats.shape[1:] != (4, 4):
            raise SchemaError("transform_matrix entries must be 4x4")
        root = json_path.parent
        images, alphas = [], []
        for name in names:
            img_path = root / name
            if img_path.suffix == "":
                img_path = img_path.with_suffix(".png")
            if not img_path.exists():
                raise MissingFile(str(img_path))
            arr = _load_png(img_path)
            if arr.shape[-1] == 4:
                a = arr[..., 3:4]
                arr = arr[..., :3] * a + np.asarray(background, np.float32) * (1 - a)
                alphas.append(a)
            images.append(arr[..., :3] if arr.shape[-1] >= 3 else np.repeat(arr, 3, -1))
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise InconsistentImageSizes(f"images have mixed shapes: {sorted(shapes)}")
        stack = np.stack(images).astype(np.float32)
        h, w = stack.shape[1:3]
        f = 0.5 * w / math.tan(0.5 * angle)
        intr = Intrinsics(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h)
        return SceneDataset(
            images=stack,
            intrinsics=intr,
            reference_poses=mats,
            alphas=np.stack(alphas).astype(np.float32) if len(alphas) == len(images) else None,
        )
    if fmt == "image_dir":
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        if not files:
            raise MissingFile(f"no images in {path}")
        images = [_load_png(p) for p in files]
        shapes = {im.shape for im in images}
        if len(shapes) != 1:
            raise InconsistentImageSizes(f"images have mixed shapes: {sorted(shapes)}")
        stack = np.stack(images)[..., :3].astype(np.float32)
        h, w = stack.shape[1:3]
        angle = camera_angle_x if camera_angle_x is not None else 0.6911112
        f = 0.5 * w / math.tan(0.5 * angle)
        return SceneDataset(
            images=stack,
            intrinsics=Intrinsics(fx=f, fy=f, cx=w / 2, cy=h / 2, width=w, height=h),
        )
    raise SchemaError(f"unknown dataset format '{fmt}'")


# ---------------------------------------------------------------------------
# Toy-scene oracle: analytic numpy ray tracer, independent of the field module
# ---------------------------------------------------------------------------

_LIGHT = np.array([0.45, 0.25, 0.86])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.4

_SHAPES: dict[str, list[tuple[tuple[float, float, float], float, tuple[float, float, float]]]] = {
    "sphere": [((0.0, 0.0, 0.0), 1.0, (0.85, 0.3, 0.25))],
    "two-sphere": [
        ((0.9, 0.0, 0.1), 0.62, (0.85, 0.25, 0.2)),
        ((-0.65, 0.25, -0.25), 0.48, (0.2, 0.35, 0.85)),
    ],
}


@dataclass
class ToyScene:
    """A rendered procedural scene plus its analytic ground truth."""

    dataset: SceneDataset
    occupancy: Callable[[np.ndarray], np.ndarray]  # (N, 3) -> bool (N,)
    bounds: tuple[float, float]  # symmetric bounding half-extent, (lo, hi) per axis


def _numpy_lookat(position: np.ndarray, target: np.ndarray, up: np.ndarray) -> np.ndarray:
    z = position - target
    z = z / np.linalg.norm(z)
    x = np.cross(up, z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=-1)


def _texture(points: np.ndarray) -> np.ndarray:
    """Procedural albedo modulation so patches carry localizable detail."""
    return 0.78 + 0.22 * np.sin(5.5 * points[:, 0]) * np.sin(4.5 * points[:, 1] + 2.0 * points[:, 2])


def _cube_shapes() -> list:
    # The cube is traced as a dedicated branch; this marker keeps the shape
    # registry uniform.
    return [((0.0, 0.0, 0.0), 0.8, (0.3, 0.65, 0.35))]


def make_toy_scene(
    shape: str = "two-sphere",
    n_views: int = 50,
    image_size: int = 64,
    seed: int = 0,
    elevation_range_deg: tuple[float, float] = (0.0, 90.0),
    radius: float = 4.0,
) -> ToyScene:
    """Render a Lambertian-textured solid with an analytic ray tracer.

    Emits images (RGB over white background), exact camera-to-world poses
    (reference only), intrinsics, silhouette masks, and an analytic occupancy
    function for mesh tests. Deterministic per seed.
    """
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    if shape not in ("sphere", "two-sphere", "cube"):
        raise SchemaError(f"unknown toy shape '{shape}'")
    rng = np.random.default_rng(seed)
    f = 1.1 * image_size
    cx = cy = image_size / 2.0
    spheres = _cube_shapes() if shape == "cube" else _SHAPES[shape]

    up = np.array([0.0, 0.0, 1.0])
    images, alphas, poses = [], [], []
    ys, xs = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    dirs_cam = np.stack(
        [(xs - cx) / f, -(ys - cy) / f, -np.ones_like(xs)], axis=-1
    ).reshape(-1, 3)

    for _ in range(n_views):
        elev = np.deg2rad(rng.uniform(*elevation_range_deg))
        azim = rng.uniform(0.0, 2 * np.pi)
        pos = radius * np.array(
            [np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)]
        )
        rot = _numpy_lookat(pos, np.zeros(3), up)
        dirs = dirs_cam @ rot.T
        dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

        color = np.ones((dirs.shape[0], 3))
        best_t = np.full(dirs.shape[0], np.inf)
        hit_any = np.zeros(dirs.shape[0], dtype=bool)
        if shape == "cube":
            half = spheres[0][1]
            t_hit, normal, hit = _ray_box(pos, dirs, half)
            # Missed rays carry t = inf; park them at the origin so the shading
            # math stays finite (their colors are masked out below anyway).
            pts = pos + np.where(hit, t_hit, 0.0)[:, None] * dirs
            shade = _AMBIENT + (1 - _AMBIENT) * np.maximum(0.0, normal @ _LIGHT)
            albedo = np.array(spheres[0][2]) * (_texture(pts))[:, None]
            color[hit] = np.clip(albedo[hit] * shade[hit, None], 0, 1)
            hit_any = hit
        else:
            for center, r, base in spheres:
                c = np.asarray(center)
                oc = pos - c
                b = dirs @ oc
                disc = b**2 - (oc @ oc - r**2)
                hit = disc > 0
                t = -b - np.sqrt(np.where(hit, disc, 0.0))
                hit &= t > 1e-6
                closer = hit & (t < best_t)
                if not closer.any():
                    continue
                pts = pos + t[:, None] * dirs
                normal = (pts - c) / r
                shade = _AMBIENT + (1 - _AMBIENT) * np.maximum(0.0, normal @ _LIGHT)
                albedo = np.asarray(base) * _texture(pts)[:, None]
                color[closer] = np.clip(albedo[closer] * shade[closer, None], 0, 1)
                best_t[closer] = t[closer]
                hit_any |= closer

        images.append(color.reshape(image_size, image_size, 3).astype(np.float32))
        alphas.append(hit_any.reshape(image_size, image_size, 1).astype(np.float32))
        mat = np.eye(4)
        mat[:3, :3] = rot
        mat[:3, 3] = pos
        poses.append(mat)

    def occupancy(points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        if shape == "cube":
            return (np.abs(points) <= spheres[0][1]).all(axis=-1)
        inside = np.zeros(points.shape[0], dtype=bool)
        for center, r, _ in spheres:
            inside |= np.linalg.norm(points - np.asarray(center), axis=-1) <= r
        return inside

    dataset = SceneDataset(
        images=np.stack(images),
        intrinsics=Intrinsics(fx=f, fy=f, cx=cx, cy=cy, width=image_size, height=image_size),
        reference_poses=np.stack(poses),
        alphas=np.stack(alphas),
    )
    return ToyScene(dataset=dataset, occupancy=occupancy, bounds=(-1.8, 1.8))


def _ray_box(origin: np.ndarray, dirs: np.ndarray, half: float):
    """Slab intersection of rays with the axis-aligned cube [-half, half]^3."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (-half - origin) * inv
    t1 = (half - origin) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    hit = (tmax > np.maximum(tmin, 1e-6))
    t_hit = np.where(hit, tmin, np.inf)
    pts = origin + t_hit[:, None] * dirs
    axis = np.argmax(np.abs(pts) / half, axis=-1)
    normal = np.zeros_like(dirs)
    rows = np.arange(dirs.shape[0])
    normal[rows, axis] = np.sign(pts[rows, axis])
    return t_hit, normal, hit


def add_image_noise(dataset: SceneDataset, std: float, seed: int = 0) -> SceneDataset:
    """Add i.i.d. Gaussian pixel noise, clipped to [0, 1]; poses untouched."""
    if std < 0:
        raise ValueError("std must be nonnegative")
    if std == 0:
        return dataset
    rng = np.random.default_rng(seed)
    noisy = np.clip(
        dataset.images + rng.normal(0.0, std, dataset.images.shape), 0.0, 1.0
    ).astype(np.float32)
    return SceneDataset(
        images=noisy,
        intrinsics=dataset.intrinsics,
        reference_poses=dataset.reference_poses,
        alphas=dataset.alphas,
        split=dataset.split,
    )


def mask_mode(dataset: SceneDataset) -> SceneDataset:
    """Collapse a dataset to 1-channel coverage masks for shape-only training."""
    if dataset.images.shape[-1] == 1:
        masks = dataset.images
    elif dataset.alphas is not None:
        masks = dataset.alphas
    else:
        raise NoMaskSource("dataset has neither 1-channel images nor alpha masks")
    return SceneDataset(
        images=masks.astype(np.float32),
        intrinsics=dataset.intrinsics,
        reference_poses=dataset.reference_poses,
        alphas=dataset.alphas,
        split=dataset.split,
    )
