"""Semantic cosine loss, L1 + SSIM photometric loss and the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .scene import FeatureImage

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
NORM_EPS = 1e-8


@dataclass
class LossWeights:
    lambda_semantic: float = 1.0
    lambda_rgb: float = 1.0
    lambda_l0: float = 1.0
    lambda_ssim: float = 0.2

    def validate(self) -> None:
        for name in ("lambda_semantic", "lambda_rgb", "lambda_l0", "lambda_ssim"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lambda_ssim > 1:
            raise ValueError("lambda_ssim must lie in [0, 1]")


def semantic_loss(pred: FeatureImage, target: FeatureImage):
    """1 - mean cosine similarity over pixels valid in both images.

    Returns (loss, gradient w.r.t. pred.data). Zero-norm predictions count as
    similarity 0 with zero gradient.
    """
    if pred.data.shape != target.data.shape:
        raise ValueError(f"feature shapes differ: {pred.data.shape} vs {target.data.shape}")
    p = pred.data.astype(np.float64)
    t = target.data.astype(np.float64)
    p_norm = np.linalg.norm(p, axis=2)
    t_norm = np.linalg.norm(t, axis=2)
    omega = pred.valid_mask & target.valid_mask & (t_norm > NORM_EPS)
    grad = np.zeros_like(p)
    count = int(omega.sum())
    if count == 0:
        return 0.0, grad
    live = omega & (p_norm >= NORM_EPS)
    pl, tl = p[live], t[live]
    pn, tn = p_norm[live][:, None], t_norm[live][:, None]
    cos = (pl * tl).sum(axis=1, keepdims=True) / (pn * tn)
    grad[live] = -(tl / (pn * tn) - cos * pl / pn**2) / count
    return float(1.0 - cos.sum() / count), grad


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation over the first two axes."""
    out = sliding_window_view(img, len(g), axis=0) @ g
    return sliding_window_view(out, len(g), axis=1) @ g


def _filter_adjoint(grad: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g) - 1
    padded = np.pad(grad, ((k, k), (k, k), (0, 0)))
    return _filter(padded, g[::-1])


def ssim(x: np.ndarray, y: np.ndarray, return_grad: bool = False):
    """Mean SSIM over all full 11x11 windows and channels of two H x W x C images in [0, 1].

    With ``return_grad`` also returns d(SSIM)/dx.
    """
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
        squeeze = True
    else:
        squeeze = False
    if min(x.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    x = x.astype(np.float64)
    y = y.astype(np.float64)
    g = gaussian_window()
    mu_x, mu_y = _filter(x, g), _filter(y, g)
    e_xx, e_yy, e_xy = _filter(x * x, g), _filter(y * y, g), _filter(x * y, g)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (e_xy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x**2 + mu_y**2 + SSIM_C1
    b2 = (e_xx - mu_x**2) + (e_yy - mu_y**2) + SSIM_C2
    smap = a1 * a2 / (b1 * b2)
    value = float(smap.mean())
    if not return_grad:
        return value
    scale = 1.0 / smap.size
    d_mu = scale * smap * (2 * mu_y / a1 - 2 * mu_y / a2 - 2 * mu_x / b1 + 2 * mu_x / b2)
    d_exx = -scale * smap / b2
    d_exy = scale * 2 * smap / a2
    grad = _filter_adjoint(d_mu, g) + 2 * x * _filter_adjoint(d_exx, g) + y * _filter_adjoint(d_exy, g)
    if squeeze:
        grad = grad[..., 0]
    return value, grad


def rgb_loss(rendered: np.ndarray, target: np.ndarray, lambda_ssim: float = 0.2):
    """(1 - lambda) * mean|rendered - target| + lambda * (1 - SSIM); returns (loss, gradient)."""
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered.astype(np.float64) - target
    l1 = float(np.abs(diff).mean())
    grad = (1.0 - lambda_ssim) * np.sign(diff) / diff.size
    loss = (1.0 - lambda_ssim) * l1
    if lambda_ssim > 0:
        s, g_ssim = ssim(rendered, target, return_grad=True)
        loss += lambda_ssim * (1.0 - s)
        grad -= lambda_ssim * g_ssim
    return loss, grad


def total_loss(semantic: float, rgb: float, l0: float, weights: LossWeights) -> float:
    for name, value in (("semantic", semantic), ("rgb", rgb), ("l0", l0)):
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite {name} loss: {value}")
    return weights.lambda_semantic * semantic + weights.lambda_rgb * rgb + weights.lambda_l0 * l0
