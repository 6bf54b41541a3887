"""Region scoring, statistical filtering and pseudo-feature targets from extractor bundles.

An extractor bundle holds what external segmentation and vision-language
models produced for each view: a region-id grid, one embedding per region,
and one text embedding per class.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import log_softmax

from .scene import FeatureImage

NO_REGION = -1


@dataclass
class BundleView:
    region_ids: np.ndarray  # (H, W) int, NO_REGION where no region covers the pixel
    region_embeddings: np.ndarray  # (R, D_clip)


@dataclass
class ExtractorBundle:
    class_names: list[str]
    class_embeddings: np.ndarray  # (C, D_clip)
    views: dict[int, BundleView] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_embeddings)

    def validate(self, tol: float = 1e-4) -> None:
        if len(self.class_names) != len(self.class_embeddings):
            raise ValueError("class names and class embeddings differ in length")
        if np.abs(np.linalg.norm(self.class_embeddings, axis=1) - 1).max(initial=0) > tol:
            raise ValueError("class embeddings are not unit-norm")
        for view, data in self.views.items():
            ids = data.region_ids
            if ids.size and ids.max() >= len(data.region_embeddings):
                raise ValueError(f"view {view}: region id {ids.max()} has no embedding")
            if ids.size and ids.min() < NO_REGION:
                raise ValueError(f"view {view}: invalid region id {ids.min()}")
            if data.region_embeddings.shape[1:] != self.class_embeddings.shape[1:]:
                raise ValueError(f"view {view}: region embedding width differs from class embeddings")
            norms = np.linalg.norm(data.region_embeddings, axis=1)
            if np.abs(norms - 1).max(initial=0) > tol:
                raise ValueError(f"view {view}: region embeddings are not unit-norm")


@dataclass(frozen=True)
class RegionScore:
    view: int
    region_id: int
    similarities: np.ndarray
    top1: float
    delta_top: float
    entropy: float
    predicted_class: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.view, self.region_id)


@dataclass(frozen=True)
class CorpusStats:
    mean_top1: float
    std_top1: float
    mean_delta: float
    std_delta: float
    mean_entropy: float
    std_entropy: float


def softmax_entropy(similarities, kappa: float) -> np.ndarray:
    logp = log_softmax(kappa * np.asarray(similarities, dtype=np.float64), axis=-1)
    return -(np.exp(logp) * logp).sum(axis=-1)


def score_regions(bundle: ExtractorBundle, view: int, kappa: float = 100.0) -> list[RegionScore]:
    if bundle.num_classes < 2:
        raise ValueError("region scoring needs at least two classes")
    emb = bundle.views[view].region_embeddings
    if len(emb) == 0:
        return []
    sims = emb.astype(np.float64) @ bundle.class_embeddings.astype(np.float64).T
    ranked = np.sort(sims, axis=1)
    entropy = softmax_entropy(sims, kappa)
    predicted = np.argmax(sims, axis=1)
    return [
        RegionScore(
            view=view,
            region_id=r,
            similarities=sims[r],
            top1=float(ranked[r, -1]),
            delta_top=float(ranked[r, -1] - ranked[r, -2]),
            entropy=float(entropy[r]),
            predicted_class=int(predicted[r]),
        )
        for r in range(len(emb))
    ]


def corpus_statistics(scores: Sequence[RegionScore]) -> CorpusStats:
    """Population mean and standard deviation of TOP1, delta-TOP and entropy."""
    if len(scores) < 2:
        raise ValueError("insufficient corpus: need at least 2 regions")
    table = np.array([[s.top1, s.delta_top, s.entropy] for s in scores])
    mean = table.mean(axis=0)
    std = table.std(axis=0)
    return CorpusStats(mean[0], std[0], mean[1], std[1], mean[2], std[2])


def filter_regions(
    scores: Iterable[RegionScore], stats: CorpusStats, entropy_std_factor: float = 1.0
) -> list[RegionScore]:
    """Keep regions with TOP1 and delta-TOP above mean + std and entropy below mean + factor * std."""
    top1_bound = stats.mean_top1 + stats.std_top1
    delta_bound = stats.mean_delta + stats.std_delta
    entropy_bound = stats.mean_entropy + entropy_std_factor * stats.std_entropy
    return [
        s for s in scores if s.top1 > top1_bound and s.delta_top > delta_bound and s.entropy < entropy_bound
    ]


def build_confidence_map(bundle: ExtractorBundle, view: int) -> np.ndarray:
    """H x W x C similarity map; pixels outside every region get zeros."""
    data = bundle.views[view]
    ids = data.region_ids
    sims = data.region_embeddings.astype(np.float64) @ bundle.class_embeddings.astype(np.float64).T
    out = np.zeros(ids.shape + (bundle.num_classes,))
    covered = ids != NO_REGION
    out[covered] = sims[ids[covered]]
    return out


def build_pseudo_feature_map(
    bundle: ExtractorBundle, view: int, accepted: Iterable[RegionScore], class_feature_table: np.ndarray
) -> FeatureImage:
    ids = bundle.views[view].region_ids
    data = np.zeros(ids.shape + (class_feature_table.shape[1],))
    valid = np.zeros(ids.shape, dtype=bool)
    for score in accepted:
        if score.view != view:
            continue
        pixels = ids == score.region_id
        data[pixels] = class_feature_table[score.predicted_class]
        valid |= pixels
    return FeatureImage(data, valid)


def class_feature_table(class_embeddings: np.ndarray, dim: int, seed: int) -> np.ndarray:
    """Project class embeddings to ``dim`` with a seeded random orthonormal map; rows are unit-norm."""
    class_embeddings = np.asarray(class_embeddings, dtype=np.float64)
    rng = np.random.default_rng(seed)
    d_in = class_embeddings.shape[1]
    basis, _ = np.linalg.qr(rng.normal(size=(max(d_in, dim), min(d_in, dim))))
    projection = basis if d_in >= dim else basis.T
    table = class_embeddings @ projection
    norms = np.linalg.norm(table, axis=1, keepdims=True)
    if np.any(norms < 1e-8):
        raise ValueError("a class embedding projects to zero")
    return table / norms
