"""Optimization loop: Adam over all Gaussian parameters, density control and periodic point drop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import logit

from .config import TrainConfig, to_flat
from .confidence import ConfidenceEstimate, estimate_confidence
from .gates import drop_probability, l0_loss, prune, sample_gates
from .io import Scene, write_checkpoint
from .losses import rgb_loss, semantic_loss, total_loss
from .metrics import classify, evaluate_views
from .pseudo_label import (
    build_confidence_map,
    build_pseudo_feature_map,
    class_feature_table,
    corpus_statistics,
    filter_regions,
    score_regions,
)
from .render import render, render_backward
from .scene import PARAM_NAMES, Camera, FeatureImage, GaussianCloud, quaternion_to_rotation

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15

LR_KEYS = {
    "positions": "position",
    "colors": "color",
    "opacity_logits": "opacity",
    "quaternions": "rotation",
    "log_scales": "scale",
    "features": "feature",
    "gate_logits": "gate",
}


@dataclass
class TrainView:
    camera: Camera
    image: np.ndarray
    target: FeatureImage
    index: int = -1
    source: str = "none"  # "gt", "pseudo" or "none"


@dataclass
class TrainingData:
    views: list[TrainView]
    class_features: np.ndarray
    confidence_cameras: list[Camera]
    confidence_maps: list[np.ndarray]
    filter_report: list[dict] = field(default_factory=list)


@dataclass
class TrainState:
    cloud: GaussianCloud
    rng: np.random.Generator
    moments: dict[str, tuple[np.ndarray, np.ndarray]]
    iteration: int = 0
    grad_accum: np.ndarray | None = None
    grad_count: np.ndarray | None = None
    confidence: ConfidenceEstimate | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.cloud)
        if self.grad_accum is None:
            self.grad_accum = np.zeros(n)
        if self.grad_count is None:
            self.grad_count = np.zeros(n, dtype=np.int64)

    def check_aligned(self) -> None:
        n = len(self.cloud)
        for name, (m, v) in self.moments.items():
            assert len(m) == n and len(v) == n, f"optimizer state for {name} out of sync with cloud"
        assert len(self.grad_accum) == n and len(self.grad_count) == n

    def select(self, rows: np.ndarray) -> None:
        """Re-index cloud, optimizer moments and accumulators by source rows (may repeat or drop)."""
        self.cloud = self.cloud.subset(rows)
        self.moments = {k: (m[rows], v[rows]) for k, (m, v) in self.moments.items()}
        self.grad_accum = self.grad_accum[rows]
        self.grad_count = self.grad_count[rows]


def new_state(cloud: GaussianCloud, rng: np.random.Generator) -> TrainState:
    moments = {name: (np.zeros(arr.shape), np.zeros(arr.shape)) for name, arr in cloud.params().items()}
    return TrainState(cloud=cloud, rng=rng, moments=moments)


def init_cloud(seed_points, config: TrainConfig, rng: np.random.Generator) -> GaussianCloud:
    """One Gaussian per (x, y, z, r, g, b) seed point, stored as float32."""
    seed_points = np.asarray(seed_points, dtype=np.float64).reshape(-1, 6)
    n = len(seed_points)
    if n == 0:
        raise ValueError("cannot initialise a cloud from zero seed points")
    positions = seed_points[:, :3]
    if n == 1:
        scale = np.full(1, config.init.default_scale)
    else:
        k = min(config.init.neighbors, n - 1)
        dist, _ = cKDTree(positions).query(positions, k=k + 1)
        scale = np.maximum(dist[:, 1:].mean(axis=1), 1e-7)
    d = config.semantic_dim
    cloud = GaussianCloud(
        positions=positions,
        colors=np.clip(seed_points[:, 3:], 0.0, 1.0),
        opacity_logits=np.full(n, logit(config.init.opacity)),
        quaternions=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scales=np.repeat(np.log(scale)[:, None], 3, axis=1),
        features=rng.normal(0.0, config.init.feature_std, (n, d)),
        gate_logits=np.full(n, config.gate.init_logit),
    )
    return cloud.astype(np.float32)


def scene_extent(cameras: Sequence[Camera]) -> float:
    centers = np.array([c.center for c in cameras])
    return float(1.1 * np.linalg.norm(centers - centers.mean(axis=0), axis=1).max())


def position_lr(config: TrainConfig, iteration: int) -> float:
    lr0, lr1 = config.lr.position, config.lr.position_final
    if lr0 <= 0 or lr1 <= 0:
        return lr0
    t = min(max(iteration / max(config.iterations, 1), 0.0), 1.0)
    return math.exp((1 - t) * math.log(lr0) + t * math.log(lr1))


def _adam_step(state: TrainState, grads: dict[str, np.ndarray], config: TrainConfig) -> None:
    t = state.iteration
    c1 = 1 - ADAM_BETA1**t
    c2 = 1 - ADAM_BETA2**t
    cloud = state.cloud
    for name in PARAM_NAMES:
        g = grads[name]
        m, v = state.moments[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        lr = position_lr(config, t) if name == "positions" else getattr(config.lr, LR_KEYS[name])
        if lr == 0:
            continue
        param = getattr(cloud, name)
        param[...] = param - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    cloud.normalize_rotations()
    np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)


def train_step(state: TrainState, view: TrainView, config: TrainConfig) -> dict:
    """Sample gates, render, backpropagate the full loss and take one Adam step."""
    cloud = state.cloud
    params = config.gate.params()
    weights = config.loss
    background = config.background
    if config.drop.enabled:
        gates, gate_grad = sample_gates(cloud.gate_logits, params, state.rng, return_grad=True)
    else:
        # Without the drop module every gate is open and the gate logits are frozen.
        gates, gate_grad = np.ones(len(cloud)), np.zeros(len(cloud))

    out = render(cloud, view.camera, gates, background=background, min_weight=config.min_weight)
    l_sem, g_sem = semantic_loss(out.features, view.target)
    l_rgb, g_rgb = rgb_loss(out.rgb, view.image, weights.lambda_ssim)
    l_l0, g_l0 = l0_loss(cloud, params) if config.drop.enabled else (0.0, np.zeros(len(cloud)))
    try:
        loss = total_loss(l_sem, l_rgb, l_l0, weights)
    except FloatingPointError as exc:
        raise FloatingPointError(
            f"iteration {state.iteration + 1}: {exc} (semantic={l_sem}, rgb={l_rgb}, l0={l_l0})"
        ) from exc

    grads = render_backward(
        cloud,
        view.camera,
        gates,
        weights.lambda_rgb * g_rgb,
        weights.lambda_semantic * g_sem,
        background=background,
        min_weight=config.min_weight,
    )
    all_grads = grads.as_dict()
    all_grads["gate_logits"] = grads.gates * gate_grad + weights.lambda_l0 * g_l0

    state.iteration += 1
    _adam_step(state, all_grads, config)

    seen = out.per_gaussian_weight > 0
    state.grad_accum[seen] += grads.screen_grad_norm[seen]
    state.grad_count[seen] += 1

    record = {
        "iteration": state.iteration,
        "loss": loss,
        "semantic": l_sem,
        "rgb": l_rgb,
        "l0": l_l0,
        "points": len(cloud),
    }
    state.history.append(record)
    return record


def density_control(state: TrainState, config: TrainConfig, extent: float) -> None:
    """Clone small / split large high-gradient points, then remove near-transparent ones."""
    dc = config.density
    cloud = state.cloud
    n = len(cloud)
    mean_grad = np.divide(state.grad_accum, state.grad_count, out=np.zeros(n), where=state.grad_count > 0)
    high = mean_grad >= dc.grad_threshold
    big = cloud.scales.max(axis=1) > dc.percent_dense * extent
    clone = np.flatnonzero(high & ~big)
    split = np.flatnonzero(high & big)

    rows = np.concatenate([np.flatnonzero(~(high & big)), clone, np.repeat(split, 2)])
    n_kept = n - len(split) + len(clone)
    state.select(rows)
    if len(split):
        # Resample split children inside the parent's Gaussian, shrunk by the divisor.
        child = slice(n_kept, None)
        c = state.cloud
        scales = np.exp(c.log_scales[child].astype(np.float64))
        rot = quaternion_to_rotation(c.quaternions[child])
        offsets = np.einsum("nij,nj->ni", rot, state.rng.normal(size=scales.shape) * scales)
        c.positions[child] = c.positions[child] + offsets
        c.log_scales[child] = np.log(scales / dc.split_divisor)

    opacity_ok = state.cloud.opacities >= dc.opacity_floor
    if not opacity_ok.all():
        keep = np.flatnonzero(opacity_ok)
        if len(keep) == 0:
            keep = np.array([int(np.argmax(state.cloud.opacities))])
        state.select(keep)
    state.grad_accum = np.zeros(len(state.cloud))
    state.grad_count = np.zeros(len(state.cloud), dtype=np.int64)
    state.check_aligned()


def drop_step(
    state: TrainState, cameras: Sequence[Camera], confidence_maps: Sequence[np.ndarray], config: TrainConfig
) -> np.ndarray:
    """Refresh per-point confidence, compose drop probabilities and prune. Returns the drop probabilities."""
    est = estimate_confidence(state.cloud, cameras, confidence_maps)
    state.confidence = est
    p_drop = drop_probability(
        config.drop.p_base, est.per_gaussian_confidence, state.cloud.gate_logits, config.gate.params()
    )
    _, kept = prune(state.cloud, p_drop, state.rng, mode=config.drop.mode, threshold=config.drop.threshold)
    state.select(kept)
    state.check_aligned()
    return p_drop


@dataclass
class PseudoLabels:
    """Everything derived from the extractor bundle, rounded to float32 so it survives a disk round-trip."""

    class_features: np.ndarray  # (C, D)
    targets: dict[int, FeatureImage]  # accepted-region feature maps per training view
    confidence_maps: dict[int, np.ndarray]  # (H, W, C) per training view with a bundle
    report: list[dict] = field(default_factory=list)


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def scene_class_features(scene: Scene, config: TrainConfig) -> np.ndarray:
    emb = scene.class_embeddings if scene.class_embeddings is not None else np.eye(scene.num_classes)
    return _f32(class_feature_table(emb, config.semantic_dim, config.seed))


def pseudo_label(scene: Scene, config: TrainConfig) -> PseudoLabels:
    """Score every region of the training views, keep the statistically confident ones and build maps."""
    table = scene_class_features(scene, config)
    bundle = scene.bundle()
    train_views = [scene.views[i] for i in scene.train if scene.views[i].bundle is not None]
    if bundle is None or not train_views:
        return PseudoLabels(table, {}, {})

    conf_maps = {v.index: _f32(build_confidence_map(bundle, v.index)) for v in train_views}
    if not config.pseudo.enabled:
        return PseudoLabels(table, {}, conf_maps)
    scores = [s for v in train_views for s in score_regions(bundle, v.index, config.pseudo.kappa)]
    if len(scores) < 2:
        return PseudoLabels(table, {}, conf_maps)
    keep = {s.key for s in filter_regions(scores, corpus_statistics(scores), config.pseudo.entropy_std_factor)}
    accepted: dict[int, list] = {}
    report = []
    for s in scores:
        if s.key in keep:
            accepted.setdefault(s.view, []).append(s)
        report.append(
            {
                "view": s.view,
                "region": s.region_id,
                "top1": s.top1,
                "delta_top": s.delta_top,
                "entropy": s.entropy,
                "predicted_class": s.predicted_class,
                "accepted": s.key in keep,
            }
        )
    targets = {view: build_pseudo_feature_map(bundle, view, regions, table) for view, regions in accepted.items()}
    return PseudoLabels(table, targets, conf_maps, report)


def build_training_data(scene: Scene, config: TrainConfig, pseudo: PseudoLabels | None = None) -> TrainingData:
    """Targets for every training view (GT labels first, then pseudo-labels, else none) and confidence maps."""
    if pseudo is None:
        pseudo = pseudo_label(scene, config)
    table = pseudo.class_features
    views = []
    for i in scene.train:
        v = scene.views[i]
        h, w = v.image.shape[:2]
        if v.labels is not None:
            target, source = FeatureImage.from_labels(v.labels, table), "gt"
        elif i in pseudo.targets:
            target, source = pseudo.targets[i], "pseudo"
        else:
            target, source = FeatureImage.empty(h, w, table.shape[1]), "none"
        views.append(TrainView(v.camera, v.image, target, i, source))
    conf_views = [i for i in scene.train if i in pseudo.confidence_maps]
    return TrainingData(
        views,
        table,
        [scene.views[i].camera for i in conf_views],
        [pseudo.confidence_maps[i] for i in conf_views],
        pseudo.report,
    )


def fit(
    scene: Scene,
    config: TrainConfig,
    data: TrainingData | None = None,
    on_step: Callable[[TrainState, dict], None] | None = None,
    checkpoint_dir=None,
) -> TrainState:
    """Train from the scene's seed points for ``config.iterations`` steps.

    With ``checkpoint_dir`` and a positive ``checkpoint_interval`` a checkpoint
    ``iter_NNNNNN`` is written every interval.
    """
    if data is None:
        data = build_training_data(scene, config)
    if not any(v.target.valid_mask.any() for v in data.views):
        raise ValueError("no training view carries a semantic target")
    if scene.seed_points is None:
        raise ValueError("scene has no seed points to initialise from")
    rng = np.random.default_rng(config.seed)
    state = new_state(init_cloud(scene.seed_points, config, rng), rng)
    extent = scene_extent([v.camera for v in data.views])
    dc = config.density

    for _ in range(config.iterations):
        view = data.views[int(rng.integers(len(data.views)))]
        record = train_step(state, view, config)
        it = state.iteration
        if dc.enabled and dc.start <= it < dc.stop and it % dc.interval == 0:
            density_control(state, config, extent)
        if config.drop.enabled and it % config.drop.interval == 0:
            drop_step(state, data.confidence_cameras, data.confidence_maps, config)
            record["points_after_drop"] = len(state.cloud)
        if checkpoint_dir is not None and config.checkpoint_interval > 0 and it % config.checkpoint_interval == 0:
            write_checkpoint(Path(checkpoint_dir) / f"iter_{it:06d}", state.cloud, it, to_flat(config))
        if on_step is not None:
            on_step(state, record)
        if it % 500 == 0:
            log.info("iteration %d loss %.4f points %d", it, record["loss"], len(state.cloud))
    return state


def render_views(cloud: GaussianCloud, cameras: Sequence[Camera], config: TrainConfig):
    return [render(cloud, cam, None, background=config.background, min_weight=config.min_weight) for cam in cameras]


def evaluate_cloud(cloud: GaussianCloud, scene: Scene, class_features: np.ndarray, config: TrainConfig, views=None):
    """Render held-out views without gates, decode classes and score against their label maps."""
    views = scene.test if views is None else views
    picked = [scene.views[i] for i in views if scene.views[i].labels is not None]
    outs = render_views(cloud, [v.camera for v in picked], config)
    preds = [classify(o.features, class_features) for o in outs]
    return evaluate_views(preds, [v.labels for v in picked], scene.num_classes)
