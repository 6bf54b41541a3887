"""Decoding rendered features to labels; mIoU / mAcc from a confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import IGNORE, FeatureImage


@dataclass
class SegmentationResult:
    per_class_iou: np.ndarray  # NaN for classes absent from both maps
    miou: float
    macc: float
    confusion: np.ndarray  # (C, C), rows = ground truth, columns = prediction
    unpredicted: np.ndarray  # (C,) ground-truth pixels whose prediction was IGNORE

    def as_record(self) -> dict:
        return {
            "miou": self.miou,
            "macc": self.macc,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in self.per_class_iou],
            "confusion": self.confusion.tolist(),
            "unpredicted": self.unpredicted.tolist(),
        }


def classify(features: FeatureImage, class_features: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of cosine similarity to each class row; masked pixels get IGNORE."""
    class_features = np.asarray(class_features, dtype=np.float64)
    if class_features.shape[1] != features.dim:
        raise ValueError(f"class table has width {class_features.shape[1]}, features have {features.dim}")
    row_norm = np.linalg.norm(class_features, axis=1)
    if np.any(row_norm < 1e-12):
        raise ValueError("class feature table has a zero-norm row")
    f = features.data.astype(np.float64)
    f_norm = np.linalg.norm(f, axis=2, keepdims=True)
    unit = np.divide(f, f_norm, out=np.zeros_like(f), where=f_norm > 0)
    sims = unit @ (class_features / row_norm[:, None]).T
    labels = np.argmax(sims, axis=2).astype(np.uint8)
    labels[~features.valid_mask] = IGNORE
    return labels


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts over non-IGNORE ground-truth pixels. A prediction of IGNORE counts only as a miss."""
    if pred.shape != gt.shape:
        raise ValueError(f"label map shapes differ: {pred.shape} vs {gt.shape}")
    gt = gt.astype(np.int64).ravel()
    pred = pred.astype(np.int64).ravel()
    keep = gt != IGNORE
    gt, pred = gt[keep], pred[keep]
    if np.any(gt >= num_classes):
        raise ValueError("ground truth label beyond the class count")
    pred = np.where(pred == IGNORE, num_classes, pred)
    if np.any(pred > num_classes):
        raise ValueError("predicted label beyond the class count")
    counts = np.bincount(gt * (num_classes + 1) + pred, minlength=num_classes * (num_classes + 1))
    return counts.reshape(num_classes, num_classes + 1)


def scores_from_confusion(conf: np.ndarray) -> SegmentationResult:
    """``conf`` is C x (C + 1); the last column holds unpredicted ground-truth pixels."""
    if conf.sum() == 0:
        raise ValueError("no evaluable pixels")
    square = conf[:, :-1].astype(np.float64)
    tp = np.diag(square)
    gt_count = conf.sum(axis=1).astype(np.float64)
    pred_count = square.sum(axis=0)
    union = gt_count + pred_count - tp
    present = union > 0
    iou = np.full(len(tp), np.nan)
    iou[present] = tp[present] / union[present]
    in_gt = gt_count > 0
    recall = tp[in_gt] / gt_count[in_gt]
    return SegmentationResult(
        per_class_iou=iou,
        miou=float(iou[present].mean()),
        macc=float(recall.mean()),
        confusion=conf[:, :-1].copy(),
        unpredicted=conf[:, -1].copy(),
    )


def evaluate(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> SegmentationResult:
    return scores_from_confusion(confusion_matrix(pred, gt, num_classes))


def evaluate_views(preds, gts, num_classes: int) -> tuple[SegmentationResult, list[SegmentationResult]]:
    """Aggregate result (summed confusion) plus one result per view."""
    mats = [confusion_matrix(p, g, num_classes) for p, g in zip(preds, gts)]
    per_view = [scores_from_confusion(m) for m in mats]
    return scores_from_confusion(np.sum(mats, axis=0)), per_view
