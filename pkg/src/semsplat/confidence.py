"""Per-Gaussian semantic confidence from multi-view confidence maps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .scene import Camera, GaussianCloud


@dataclass
class ConfidenceEstimate:
    per_gaussian_confidence: np.ndarray
    views_seen: np.ndarray


def estimate_confidence(
    cloud: GaussianCloud, cameras: Sequence[Camera], maps: Sequence[np.ndarray]
) -> ConfidenceEstimate:
    """Average, over the views a point's center lands in, of opacity x max class score.

    Each map is H x W x C of similarity scores at the camera's resolution.
    Scores are clamped to [0, 1] before the class maximum; points never seen
    get confidence 0.
    """
    if len(cameras) != len(maps):
        raise ValueError(f"{len(cameras)} cameras but {len(maps)} confidence maps")
    n = len(cloud)
    total = np.zeros(n)
    seen = np.zeros(n, dtype=np.int64)
    opacity = cloud.opacities
    for view, (camera, conf) in enumerate(zip(cameras, maps)):
        if conf.shape[:2] != (camera.height, camera.width):
            raise ValueError(
                f"view {view}: confidence map is {conf.shape[1]}x{conf.shape[0]}, "
                f"camera is {camera.width}x{camera.height}"
            )
        best = np.clip(conf, 0.0, 1.0).max(axis=2)
        pixels, _, visible = camera.project(cloud.positions)
        col = np.floor(np.where(visible, pixels[:, 0], -1.0))
        row = np.floor(np.where(visible, pixels[:, 1], -1.0))
        inside = visible & (col >= 0) & (col < camera.width) & (row >= 0) & (row < camera.height)
        idx = np.flatnonzero(inside)
        total[idx] += best[row[idx].astype(np.int64), col[idx].astype(np.int64)] * opacity[idx]
        seen[idx] += 1
    confidence = np.divide(total, seen, out=np.zeros(n), where=seen > 0)
    return ConfidenceEstimate(np.clip(confidence, 0.0, 1.0), seen)
