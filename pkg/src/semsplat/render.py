"""Differentiable Gaussian splatting for RGB and semantic features.

Forward compositing and its reverse traversal run per pixel in numba; the
projection (3D covariance -> screen-space conic) and its adjoint are
vectorized numpy over Gaussians.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.special import expit

from .scene import NEAR_PLANE, Camera, FeatureImage, GaussianCloud, quaternion_to_rotation

DILATION = 0.3
MIN_WEIGHT = 1e-4
VALID_WEIGHT = 1e-6


class EmptySceneError(ValueError):
    pass


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    features: FeatureImage  # (H, W, D)
    alpha: np.ndarray  # (H, W)
    per_gaussian_weight: np.ndarray  # (N,)
    visible: np.ndarray  # (N,)
    dominant: np.ndarray  # (H, W) index of the largest-weight Gaussian, -1 where nothing contributes


@dataclass
class RenderGradients:
    positions: np.ndarray
    colors: np.ndarray
    opacity_logits: np.ndarray
    quaternions: np.ndarray
    log_scales: np.ndarray
    features: np.ndarray
    gates: np.ndarray
    screen_grad_norm: np.ndarray  # |dL/d(screen mean)| in NDC units, 0 for invisible points

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "positions": self.positions,
            "colors": self.colors,
            "opacity_logits": self.opacity_logits,
            "quaternions": self.quaternions,
            "log_scales": self.log_scales,
            "features": self.features,
        }


@dataclass
class _Projection:
    cam_points: np.ndarray  # (N, 3)
    visible: np.ndarray
    means2d: np.ndarray  # (N, 2)
    jacobian: np.ndarray  # (N, 2, 3)
    cov_view: np.ndarray  # (N, 3, 3), world covariance rotated into the camera frame
    rotation: np.ndarray  # (N, 3, 3)
    scales: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of the inverse 2D covariance
    bbox: np.ndarray  # (N, 4) int: x0, x1, y0, y1 inclusive
    sigmoid_opacity: np.ndarray
    gates: np.ndarray
    order: np.ndarray  # visible indices, front to back


def _prepare(cloud: GaussianCloud, camera: Camera, gates, min_weight: float) -> _Projection:
    if len(cloud) == 0:
        raise EmptySceneError("empty scene")
    n = len(cloud)
    if gates is None:
        gates = np.ones(n)
    gates = np.asarray(gates, dtype=np.float64)
    if gates.shape != (n,):
        raise ValueError(f"gates has shape {gates.shape}, expected ({n},)")

    w2c = camera.rotation
    t = cloud.positions.astype(np.float64) @ w2c.T + camera.translation
    visible = t[:, 2] > NEAR_PLANE
    tz = np.where(visible, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    means2d = np.stack([camera.fx * tx / tz + camera.cx, camera.fy * ty / tz + camera.cy], axis=1)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx / tz
    jac[:, 0, 2] = -camera.fx * tx / tz**2
    jac[:, 1, 1] = camera.fy / tz
    jac[:, 1, 2] = -camera.fy * ty / tz**2

    rot = quaternion_to_rotation(cloud.quaternions)
    scales = np.exp(cloud.log_scales.astype(np.float64))
    lmat = rot * scales[:, None, :]
    cov_world = lmat @ np.swapaxes(lmat, 1, 2)
    cov_view = w2c @ cov_world @ w2c.T
    cov2d = jac @ cov_view @ np.swapaxes(jac, 1, 2)
    a = cov2d[:, 0, 0] + DILATION
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1] + DILATION
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    if min_weight > 0:
        # Outside this box G < min_weight, so the contribution is truncated anyway.
        half = 0.5 * (a + c)
        lam = half + np.sqrt(np.maximum(half * half - det, 0.0))
        radius = np.sqrt(2.0 * math.log(1.0 / min_weight) * lam)
        bbox = np.stack(
            [
                np.floor(means2d[:, 0] - radius - 0.5),
                np.ceil(means2d[:, 0] + radius - 0.5),
                np.floor(means2d[:, 1] - radius - 0.5),
                np.ceil(means2d[:, 1] + radius - 0.5),
            ],
            axis=1,
        )
        bbox[:, 0::2] = np.maximum(bbox[:, 0::2], 0)
        bbox[:, 1] = np.minimum(bbox[:, 1], camera.width - 1)
        bbox[:, 3] = np.minimum(bbox[:, 3], camera.height - 1)
        bbox = np.nan_to_num(bbox, nan=-1).astype(np.int64)
    else:
        bbox = np.tile(np.array([0, camera.width - 1, 0, camera.height - 1], dtype=np.int64), (n, 1))

    idx = np.flatnonzero(visible)
    order = idx[np.argsort(t[idx, 2], kind="stable")]
    return _Projection(
        cam_points=t,
        visible=visible,
        means2d=means2d,
        jacobian=jac,
        cov_view=cov_view,
        rotation=rot,
        scales=scales,
        conic=conic,
        bbox=bbox,
        sigmoid_opacity=expit(cloud.opacity_logits.astype(np.float64)),
        gates=gates,
        order=order,
    )


@numba.njit(cache=True)
def _forward_kernel(order, means2d, conic, bbox, opac, colors, feats, height, width, background, min_weight):
    n, dim = feats.shape
    rgb = np.zeros((height, width, 3))
    out_feat = np.zeros((height, width, dim))
    alpha_out = np.zeros((height, width))
    weight_sum = np.zeros(n)
    dominant = np.full((height, width), -1, dtype=np.int64)
    for y in range(height):
        py = y + 0.5
        for x in range(width):
            px = x + 0.5
            trans = 1.0
            best = 0.0
            for k in range(order.shape[0]):
                i = order[k]
                if x < bbox[i, 0] or x > bbox[i, 1] or y < bbox[i, 2] or y > bbox[i, 3]:
                    continue
                dx = px - means2d[i, 0]
                dy = py - means2d[i, 1]
                power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy)
                al = opac[i] * math.exp(power)
                w = al * trans
                if w < min_weight:
                    continue
                for ch in range(3):
                    rgb[y, x, ch] += w * colors[i, ch]
                for d in range(dim):
                    out_feat[y, x, d] += w * feats[i, d]
                weight_sum[i] += w
                if w > best:
                    best = w
                    dominant[y, x] = i
                trans *= 1.0 - al
                if trans < min_weight:
                    break
            for ch in range(3):
                rgb[y, x, ch] += trans * background[ch]
            alpha_out[y, x] = 1.0 - trans
    return rgb, out_feat, alpha_out, weight_sum, dominant


@numba.njit(cache=True)
def _backward_kernel(
    order, means2d, conic, bbox, opac, colors, feats, height, width, background, min_weight, grad_rgb, grad_feat
):
    n, dim = feats.shape
    g_color = np.zeros((n, 3))
    g_feat = np.zeros((n, dim))
    g_opac = np.zeros(n)
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    hit_idx = np.empty(order.shape[0], dtype=np.int64)
    hit_al = np.empty(order.shape[0])
    hit_g = np.empty(order.shape[0])
    hit_t = np.empty(order.shape[0])
    for y in range(height):
        py = y + 0.5
        for x in range(width):
            px = x + 0.5
            trans = 1.0
            m = 0
            for k in range(order.shape[0]):
                i = order[k]
                if x < bbox[i, 0] or x > bbox[i, 1] or y < bbox[i, 2] or y > bbox[i, 3]:
                    continue
                dx = px - means2d[i, 0]
                dy = py - means2d[i, 1]
                power = -0.5 * (conic[i, 0] * dx * dx + 2.0 * conic[i, 1] * dx * dy + conic[i, 2] * dy * dy)
                g = math.exp(power)
                al = opac[i] * g
                w = al * trans
                if w < min_weight:
                    continue
                hit_idx[m] = i
                hit_al[m] = al
                hit_g[m] = g
                hit_t[m] = trans
                m += 1
                trans *= 1.0 - al
                if trans < min_weight:
                    break
            if m == 0:
                continue
            # rest = d(output)/d(transmittance after this point), built back to front.
            rest = 0.0
            for ch in range(3):
                rest += background[ch] * grad_rgb[y, x, ch]
            for j in range(m - 1, -1, -1):
                i = hit_idx[j]
                al = hit_al[j]
                t_before = hit_t[j]
                w = al * t_before
                v = 0.0
                for ch in range(3):
                    v += colors[i, ch] * grad_rgb[y, x, ch]
                    g_color[i, ch] += w * grad_rgb[y, x, ch]
                for d in range(dim):
                    v += feats[i, d] * grad_feat[y, x, d]
                    g_feat[i, d] += w * grad_feat[y, x, d]
                d_al = t_before * (v - rest)
                rest = al * v + (1.0 - al) * rest
                g = hit_g[j]
                g_opac[i] += d_al * g
                g_power = d_al * opac[i] * g
                dx = px - means2d[i, 0]
                dy = py - means2d[i, 1]
                g_mean[i, 0] += g_power * (conic[i, 0] * dx + conic[i, 1] * dy)
                g_mean[i, 1] += g_power * (conic[i, 1] * dx + conic[i, 2] * dy)
                g_conic[i, 0] += -0.5 * g_power * dx * dx
                g_conic[i, 1] += -g_power * dx * dy
                g_conic[i, 2] += -0.5 * g_power * dy * dy
    return g_color, g_feat, g_opac, g_mean, g_conic


def _background(background) -> np.ndarray:
    bg = np.broadcast_to(np.asarray(background, dtype=np.float64), (3,))
    return np.ascontiguousarray(bg)


def render(
    cloud: GaussianCloud,
    camera: Camera,
    gates=None,
    background=(0.0, 0.0, 0.0),
    min_weight: float = MIN_WEIGHT,
) -> RenderOutput:
    """Composite the cloud front to back into RGB and feature images.

    ``gates`` multiplies each Gaussian's opacity (defaults to 1). Setting
    ``min_weight=0`` disables contribution truncation, which makes the image
    an everywhere-smooth function of the parameters.
    """
    proj = _prepare(cloud, camera, gates, min_weight)
    opac = proj.sigmoid_opacity * proj.gates
    rgb, feat, alpha, weight_sum, dominant = _forward_kernel(
        proj.order,
        proj.means2d,
        proj.conic,
        proj.bbox,
        opac,
        np.ascontiguousarray(cloud.colors, dtype=np.float64),
        np.ascontiguousarray(cloud.features, dtype=np.float64),
        camera.height,
        camera.width,
        _background(background),
        float(min_weight),
    )
    valid = alpha > VALID_WEIGHT
    return RenderOutput(
        rgb=rgb,
        features=FeatureImage(feat, valid),
        alpha=alpha,
        per_gaussian_weight=weight_sum,
        visible=proj.visible,
        dominant=dominant,
    )


def _rotation_grad_to_quaternion(q: np.ndarray, g_rot: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn.T
    zero = np.zeros_like(w)

    def mat(*entries):
        return np.stack(entries, axis=-1).reshape(-1, 3, 3)

    d_w = mat(zero, -2 * z, 2 * y, 2 * z, zero, -2 * x, -2 * y, 2 * x, zero)
    d_x = mat(zero, 2 * y, 2 * z, 2 * y, -4 * x, -2 * w, 2 * z, 2 * w, -4 * x)
    d_y = mat(-4 * y, 2 * x, 2 * w, 2 * x, zero, 2 * z, -2 * w, 2 * z, -4 * y)
    d_z = mat(-4 * z, -2 * w, 2 * x, 2 * w, -4 * z, 2 * y, 2 * x, 2 * y, zero)
    g_qn = np.stack([(g_rot * d).sum(axis=(1, 2)) for d in (d_w, d_x, d_y, d_z)], axis=1)
    return (g_qn - qn * (qn * g_qn).sum(axis=1, keepdims=True)) / norm


def render_backward(
    cloud: GaussianCloud,
    camera: Camera,
    gates,
    grad_rgb: np.ndarray,
    grad_features: np.ndarray,
    background=(0.0, 0.0, 0.0),
    min_weight: float = MIN_WEIGHT,
) -> RenderGradients:
    """Gradients of a pixel loss with respect to every Gaussian parameter and gate value.

    ``grad_rgb`` (H, W, 3) and ``grad_features`` (H, W, D) are the loss
    gradients with respect to the rendered images.
    """
    h, w = camera.height, camera.width
    grad_rgb = np.ascontiguousarray(grad_rgb, dtype=np.float64)
    grad_features = np.ascontiguousarray(grad_features, dtype=np.float64)
    if grad_rgb.shape != (h, w, 3) or grad_features.shape != (h, w, cloud.semantic_dim):
        raise ValueError("upstream gradient shapes do not match the render output")
    if not (np.isfinite(grad_rgb).all() and np.isfinite(grad_features).all()):
        raise FloatingPointError("non-finite upstream gradient")

    proj = _prepare(cloud, camera, gates, min_weight)
    opac = proj.sigmoid_opacity * proj.gates
    g_color, g_feat, g_opac, g_mean, g_conic = _backward_kernel(
        proj.order,
        proj.means2d,
        proj.conic,
        proj.bbox,
        opac,
        np.ascontiguousarray(cloud.colors, dtype=np.float64),
        np.ascontiguousarray(cloud.features, dtype=np.float64),
        h,
        w,
        _background(background),
        float(min_weight),
        grad_rgb,
        grad_features,
    )

    vis = proj.visible
    g_mean[~vis] = 0.0
    g_conic[~vis] = 0.0

    sig = proj.sigmoid_opacity
    g_opacity_logit = g_opac * proj.gates * sig * (1.0 - sig)
    g_gates = g_opac * sig

    # conic = inverse(cov2d): dL/dcov = -Q dL/dQ Q, with the off-diagonal gradient split over both entries.
    qa, qb, qc = g_conic.T
    conic = proj.conic
    q_mat = np.stack([conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]], axis=1).reshape(-1, 2, 2)
    gq = np.stack([qa, 0.5 * qb, 0.5 * qb, qc], axis=1).reshape(-1, 2, 2)
    g_cov2d = -q_mat @ gq @ q_mat

    jac = proj.jacobian
    cov_view = proj.cov_view
    g_cov_view = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ cov_view

    w2c = camera.rotation
    g_cov_world = w2c.T @ g_cov_view @ w2c
    lmat = proj.rotation * proj.scales[:, None, :]
    g_l = 2.0 * g_cov_world @ lmat
    g_rot = g_l * proj.scales[:, None, :]
    g_scale = (g_l * proj.rotation).sum(axis=1)
    g_log_scale = g_scale * proj.scales
    g_quat = _rotation_grad_to_quaternion(cloud.quaternions.astype(np.float64), g_rot)

    t = proj.cam_points
    tz = np.where(vis, t[:, 2], 1.0)
    tx, ty = t[:, 0], t[:, 1]
    fx, fy = camera.fx, camera.fy
    g_t = np.zeros_like(t)
    g_t[:, 0] = g_mean[:, 0] * fx / tz - g_jac[:, 0, 2] * fx / tz**2
    g_t[:, 1] = g_mean[:, 1] * fy / tz - g_jac[:, 1, 2] * fy / tz**2
    g_t[:, 2] = (
        -g_mean[:, 0] * fx * tx / tz**2
        - g_mean[:, 1] * fy * ty / tz**2
        - g_jac[:, 0, 0] * fx / tz**2
        + g_jac[:, 0, 2] * 2.0 * fx * tx / tz**3
        - g_jac[:, 1, 1] * fy / tz**2
        + g_jac[:, 1, 2] * 2.0 * fy * ty / tz**3
    )
    g_t[~vis] = 0.0
    g_positions = g_t @ w2c

    screen = np.linalg.norm(g_mean * np.array([0.5 * w, 0.5 * h]), axis=1)
    return RenderGradients(
        positions=g_positions,
        colors=g_color,
        opacity_logits=g_opacity_logit,
        quaternions=np.where(vis[:, None], g_quat, 0.0),
        log_scales=np.where(vis[:, None], g_log_scale, 0.0),
        features=g_feat,
        gates=g_gates,
        screen_grad_norm=screen,
    )
