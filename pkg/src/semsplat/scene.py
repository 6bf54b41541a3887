"""Scene representation: Gaussian clouds, pinhole cameras and image containers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logit

NEAR_PLANE = 1e-4
IGNORE = 255

# Optimizable per-point parameter arrays, in a fixed order.
PARAM_NAMES = (
    "positions",
    "colors",
    "opacity_logits",
    "quaternions",
    "log_scales",
    "features",
    "gate_logits",
)


@dataclass(frozen=True)
class Gaussian:
    """A single activated Gaussian, as read back from a cloud."""

    position: np.ndarray
    color: np.ndarray
    opacity: float
    rotation: np.ndarray
    scale: np.ndarray
    feature: np.ndarray
    gate_logit: float


@dataclass
class GaussianCloud:
    """Structure-of-arrays Gaussian scene.

    Opacity is kept as a logit, scale as a log-scale and rotation as a
    (w, x, y, z) quaternion so that unconstrained gradient steps stay valid
    after activation.
    """

    positions: np.ndarray  # (N, 3)
    colors: np.ndarray  # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    quaternions: np.ndarray  # (N, 4)
    log_scales: np.ndarray  # (N, 3)
    features: np.ndarray  # (N, D)
    gate_logits: np.ndarray  # (N,)

    def __post_init__(self):
        n = len(self.positions)
        expected = {
            "positions": (n, 3),
            "colors": (n, 3),
            "opacity_logits": (n,),
            "quaternions": (n, 4),
            "log_scales": (n, 3),
            "gate_logits": (n,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.features.ndim != 2 or len(self.features) != n:
            raise ValueError(f"features has shape {self.features.shape}, expected ({n}, D)")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def semantic_dim(self) -> int:
        return self.features.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits.astype(np.float64))

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales.astype(np.float64))

    def point(self, i: int) -> Gaussian:
        return Gaussian(
            position=self.positions[i].copy(),
            color=self.colors[i].copy(),
            opacity=float(self.opacities[i]),
            rotation=quaternion_to_rotation(self.quaternions[i]),
            scale=self.scales[i],
            feature=self.features[i].copy(),
            gate_logit=float(self.gate_logits[i]),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def copy(self) -> GaussianCloud:
        return GaussianCloud(**{k: v.copy() for k, v in self.params().items()})

    def astype(self, dtype) -> GaussianCloud:
        return GaussianCloud(**{k: v.astype(dtype) for k, v in self.params().items()})

    def subset(self, index) -> GaussianCloud:
        return GaussianCloud(**{k: v[index].copy() for k, v in self.params().items()})

    def concat(self, other: GaussianCloud) -> GaussianCloud:
        if other.semantic_dim != self.semantic_dim:
            raise ValueError("semantic dimension mismatch")
        return GaussianCloud(
            **{k: np.concatenate([v, getattr(other, k)]).astype(v.dtype) for k, v in self.params().items()}
        )

    def normalize_rotations(self) -> None:
        q = self.quaternions.astype(np.float64)
        self.quaternions[...] = q / np.linalg.norm(q, axis=1, keepdims=True)


def make_cloud(
    positions,
    colors,
    opacities,
    scales,
    features,
    quaternions=None,
    gate_logits=None,
    dtype=np.float64,
) -> GaussianCloud:
    """Build a cloud from activated values (opacity in (0, 1), positive scales)."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = len(positions)
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3))
    opacities = np.clip(np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,)), 1e-12, 1 - 1e-12)
    if quaternions is None:
        quaternions = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    if gate_logits is None:
        gate_logits = np.zeros(n)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = np.broadcast_to(features, (n, len(features)))
    return GaussianCloud(
        positions=positions.astype(dtype),
        colors=np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3)).astype(dtype),
        opacity_logits=logit(opacities).astype(dtype),
        quaternions=np.asarray(quaternions, dtype=np.float64).reshape(n, 4).astype(dtype),
        log_scales=np.log(scales).astype(dtype),
        features=features.astype(dtype),
        gate_logits=np.broadcast_to(np.asarray(gate_logits, dtype=np.float64), (n,)).astype(dtype),
    )


@dataclass
class Camera:
    """Pinhole camera. Pixel (i, j) covers [i, i+1) x [j, j+1) in image coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        self.width = int(self.width)
        self.height = int(self.height)

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")
        m = self.world_to_camera
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], atol=1e-12):
            raise ValueError("world_to_camera bottom row must be 0 0 0 1")
        r = m[:3, :3]
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            raise ValueError("world_to_camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def scaled(self, factor: int) -> Camera:
        """Intrinsics for an image downsampled by an integer factor."""
        return Camera(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=self.cx / factor,
            cy=self.cy / factor,
            width=self.width // factor,
            height=self.height // factor,
            world_to_camera=self.world_to_camera.copy(),
        )

    def project(self, points: np.ndarray):
        """Project (N, 3) world points. Returns pixels (N, 2), depths (N,), visible (N,)."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        cam = points @ self.rotation.T + self.translation
        depth = cam[:, 2]
        visible = depth > NEAR_PLANE
        z = np.where(visible, depth, 1.0)
        pixels = np.stack([self.fx * cam[:, 0] / z + self.cx, self.fy * cam[:, 1] / z + self.cy], axis=1)
        pixels[~visible] = np.nan
        return pixels, depth, visible


def project_point(camera: Camera, position):
    """Project one point; returns (pixel, depth, visible)."""
    pixels, depth, visible = camera.project(np.asarray(position)[None])
    return pixels[0], float(depth[0]), bool(visible[0])


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera transform for a camera at ``eye`` looking at ``target`` (x right, y down, z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    m = np.eye(4)
    m[:3, :3] = np.stack([right, down, forward])
    m[:3, 3] = -m[:3, :3] @ eye
    return m


def quaternion_to_rotation(q) -> np.ndarray:
    """(..., 4) quaternions (w, x, y, z), normalized first, to (..., 3, 3) rotation matrices."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    r = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return r.reshape(q.shape[:-1] + (3, 3))


def covariance_3d(rotation, scale) -> np.ndarray:
    """R diag(s)^2 R^T for quaternion(s) ``rotation`` and scale(s) ``scale``."""
    r = quaternion_to_rotation(rotation)
    m = r * np.asarray(scale, dtype=np.float64)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


@dataclass
class FeatureImage:
    """H x W x D feature grid plus the mask of pixels that carry supervision."""

    data: np.ndarray
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"feature image must be H x W x D, got shape {self.data.shape}")
        if self.valid_mask.shape != self.data.shape[:2]:
            raise ValueError("valid_mask does not match feature image size")
        self.valid_mask = self.valid_mask.astype(bool)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    @classmethod
    def empty(cls, height: int, width: int, dim: int) -> FeatureImage:
        return cls(np.zeros((height, width, dim)), np.zeros((height, width), dtype=bool))

    @classmethod
    def from_labels(cls, labels: np.ndarray, class_features: np.ndarray) -> FeatureImage:
        """Target features for a label map: class feature rows on labeled pixels, zeros elsewhere."""
        labels = np.asarray(labels)
        valid = labels != IGNORE
        if np.any(labels[valid] >= len(class_features)):
            raise ValueError("label map contains class indices beyond the class feature table")
        data = np.zeros(labels.shape + (class_features.shape[1],))
        data[valid] = class_features[labels[valid]]
        return cls(data, valid)

