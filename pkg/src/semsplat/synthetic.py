"""Synthetic aerial scenes with exactly known labels and a controllable stand-in extractor bundle."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import SyntheticConfig
from .io import camera_record, write_checkpoint, write_manifest, write_tensor
from .pseudo_label import NO_REGION
from .render import render
from .scene import IGNORE, Camera, look_at, make_cloud

ORBIT_RADIUS = 1.8
ORBIT_HEIGHT = 2.6
LABEL_ALPHA = 0.5


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def class_palette(num_classes: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(k / num_classes, 0.65, 0.85) for k in range(num_classes)])


def make_class_embeddings(num_classes: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit vectors sharing a common component, so distinct classes have positive similarity."""
    shared = rng.normal(size=dim) / np.sqrt(dim)
    own = rng.normal(size=(num_classes, dim)) / np.sqrt(dim)
    return _unit(own + 0.6 * shared)


def ground_truth_cloud(spec: SyntheticConfig, rng: np.random.Generator):
    """Class-colored flat Gaussian clusters tiling the [-1, 1]^2 ground plane.

    Returns (cloud, per-Gaussian class).
    """
    g = spec.grid
    patch_classes = np.resize(np.arange(spec.num_classes), g * g)
    rng.shuffle(patch_classes)
    patch = 2.0 / g
    palette = class_palette(spec.num_classes)

    positions, classes = [], []
    for c in range(spec.num_classes):
        patches = np.flatnonzero(patch_classes == c)
        counts = np.full(len(patches), spec.gaussians_per_class // len(patches))
        counts[: spec.gaussians_per_class % len(patches)] += 1
        for p, m in zip(patches, counts):
            k = int(np.ceil(np.sqrt(m)))
            cells = rng.choice(k * k, size=m, replace=False)
            cx = (cells % k + rng.uniform(0.4, 0.6, m)) / k
            cy = (cells // k + rng.uniform(0.4, 0.6, m)) / k
            x0, y0 = -1.0 + (p % g) * patch, -1.0 + (p // g) * patch
            positions.append(np.stack([x0 + cx * patch, y0 + cy * patch, rng.normal(0, 0.005, m)], axis=1))
            classes.append(np.full(m, c))
    positions = np.concatenate(positions)
    classes = np.concatenate(classes)
    n = len(positions)

    per_side = np.sqrt(spec.gaussians_per_class * spec.num_classes / (g * g))
    s = 0.5 * patch / per_side
    scales = np.tile([s, s, 0.2 * s], (n, 1)) * rng.uniform(0.9, 1.2, (n, 1))
    yaw = rng.uniform(0, np.pi, n)
    quats = np.stack([np.cos(yaw / 2), np.zeros(n), np.zeros(n), np.sin(yaw / 2)], axis=1)
    colors = np.clip(palette[classes] + rng.normal(0, 0.04, (n, 3)), 0, 1)
    cloud = make_cloud(positions, colors, 0.95, scales, np.zeros((n, 1)), quaternions=quats, gate_logits=10.0)
    # Round through float32 so the stored checkpoint reproduces the rendered labels exactly.
    return cloud.astype(np.float32).astype(np.float64), classes


def orbit_cameras(num_views: int, size: int) -> list[Camera]:
    cams = []
    for k in range(num_views):
        theta = 2 * np.pi * k / num_views
        eye = (ORBIT_RADIUS * np.cos(theta), ORBIT_RADIUS * np.sin(theta), ORBIT_HEIGHT)
        f = 1.3 * size
        cams.append(Camera(f, f, size / 2, size / 2, size, size, look_at(eye, (0.0, 0.0, 0.0))))
    return cams


def label_from_render(out, classes: np.ndarray) -> np.ndarray:
    labels = np.full(out.dominant.shape, IGNORE, dtype=np.uint8)
    covered = (out.dominant >= 0) & (out.alpha >= LABEL_ALPHA)
    labels[covered] = classes[out.dominant[covered]]
    return labels


def connected_regions(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Region-id grid (NO_REGION on IGNORE) and the class of each region, 4-connected per class."""
    ids = np.full(labels.shape, NO_REGION, dtype=np.int64)
    region_class = []
    for c in np.unique(labels[labels != IGNORE]):
        comp, count = ndimage.label(labels == c)
        for r in range(1, count + 1):
            ids[comp == r] = len(region_class)
            region_class.append(int(c))
    return ids, np.array(region_class, dtype=np.int64)


def split_views(num_views: int) -> tuple[list[int], list[int], list[int]]:
    """(train, test, gt_labeled): every third view from 1 is held out; three spread train views carry labels."""
    test = [i for i in range(num_views) if i % 3 == 1]
    train = [i for i in range(num_views) if i % 3 != 1]
    labeled = sorted({train[round(k * len(train) / 3)] for k in range(3)})
    return train, test, labeled


def generate_synthetic(out_dir, spec: SyntheticConfig | None = None, seed: int = 42) -> Path:
    """Write a complete scene directory and return the manifest path."""
    spec = spec or SyntheticConfig()
    if spec.num_classes < 2 or spec.num_views < 3:
        raise ValueError("synthetic scenes need >= 2 classes and >= 3 views")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    cloud, classes = ground_truth_cloud(spec, rng)
    class_emb = make_class_embeddings(spec.num_classes, spec.clip_dim, rng)
    cameras = orbit_cameras(spec.num_views, spec.image_size)
    train, test, labeled = split_views(spec.num_views)

    write_checkpoint(out / "gt", cloud, 0)
    write_tensor(out / "gt" / "classes.sadt", classes.astype(np.uint8))
    write_tensor(out / "bundle" / "class_embeddings.sadt", class_emb)

    keep = rng.uniform(size=len(cloud)) < spec.seed_fraction
    seeds = np.concatenate(
        [
            cloud.positions[keep] + rng.normal(0, spec.seed_noise, (keep.sum(), 3)),
            np.clip(cloud.colors[keep] + rng.normal(0, 0.05, (keep.sum(), 3)), 0, 1),
        ],
        axis=1,
    )
    write_tensor(out / "points3d.sadt", seeds)

    views = []
    for i, cam in enumerate(cameras):
        rendered = render(cloud, cam)
        labels = label_from_render(rendered, classes)
        write_tensor(out / "images" / f"view_{i:03d}.sadt", np.clip(rendered.rgb, 0, 1))
        write_tensor(out / "labels" / f"view_{i:03d}.sadt", labels)

        ids, region_class = connected_regions(labels)
        emb = class_emb[region_class] + spec.noise_sigma * rng.normal(size=(len(region_class), spec.clip_dim))
        emb = _unit(emb) if len(emb) else np.zeros((0, spec.clip_dim))
        write_tensor(out / "bundle" / f"view_{i:03d}_regions.sadt", ids.astype(np.float32))
        write_tensor(out / "bundle" / f"view_{i:03d}_embeddings.sadt", emb.reshape(-1, spec.clip_dim))

        record = {
            "image": f"images/view_{i:03d}.sadt",
            "camera": camera_record(cam),
            "bundle": {
                "region_ids": f"bundle/view_{i:03d}_regions.sadt",
                "region_embeddings": f"bundle/view_{i:03d}_embeddings.sadt",
            },
        }
        if i in labeled or i in test:
            record["label_map"] = f"labels/view_{i:03d}.sadt"
        views.append(record)

    manifest = out / "manifest.json"
    write_manifest(
        manifest,
        {
            "class_names": [f"class_{c}" for c in range(spec.num_classes)],
            "class_embeddings": "bundle/class_embeddings.sadt",
            "points3d": "points3d.sadt",
            "train": train,
            "test": test,
            "views": views,
            "metadata": {
                "generator": "synthetic",
                "seed": seed,
                "gt_checkpoint": "gt",
                "gt_classes": "gt/classes.sadt",
                "all_labels": "labels",
                "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
            },
        },
    )
    return manifest
