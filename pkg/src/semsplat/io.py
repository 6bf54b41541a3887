"""On-disk formats: tensor files, scene manifests, extractor bundles and checkpoints.

Tensor file layout (little-endian)::

    magic   4 bytes  b"SADT"
    version u32      1
    dtype   u8       0 = float32, 1 = uint8
    rank    u8       >= 1
    dims    rank x u64
    payload prod(dims) x itemsize, row-major
"""

from __future__ import annotations

import json
import os
import shutil
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pseudo_label import NO_REGION, BundleView, ExtractorBundle
from .scene import PARAM_NAMES, Camera, FeatureImage, GaussianCloud

MAGIC = b"SADT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}
HEADER = struct.Struct("<4sIBB")

MANIFEST_FORMAT = "semsplat-scene"
CHECKPOINT_FILE = "checkpoint.json"


class TensorFormatError(ValueError):
    code = "format"


class BadMagicError(TensorFormatError):
    code = "bad_magic"


class UnsupportedVersionError(TensorFormatError):
    code = "bad_version"


class UnknownDtypeError(TensorFormatError):
    code = "bad_dtype"


class BadRankError(TensorFormatError):
    code = "bad_rank"


class TruncatedTensorError(TensorFormatError):
    code = "truncated"


class TrailingDataError(TensorFormatError):
    code = "trailing_data"


class SceneError(ValueError):
    pass


def encode_tensor(array) -> bytes:
    array = np.asarray(array)
    if array.ndim < 1:
        raise BadRankError("rank must be ≥ 1")
    if array.ndim > 255:
        raise BadRankError("rank must fit in one byte")
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    if array.dtype.kind == "f":
        array = array.astype("<f4")
    elif array.dtype != np.uint8:
        raise UnknownDtypeError(f"unsupported dtype {array.dtype}; use float32 or uint8")
    code = DTYPE_CODES[array.dtype]
    dims = struct.pack(f"<{array.ndim}Q", *array.shape)
    return HEADER.pack(MAGIC, VERSION, code, array.ndim) + dims + np.ascontiguousarray(array).tobytes()


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < HEADER.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise BadMagicError("bad magic")
        raise TruncatedTensorError("truncated header")
    magic, version, code, rank = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if code not in DTYPES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    if rank < 1:
        raise BadRankError("rank must be ≥ 1")
    offset = HEADER.size + 8 * rank
    if len(data) < offset:
        raise TruncatedTensorError("truncated dimension table")
    dims = struct.unpack_from(f"<{rank}Q", data, HEADER.size)
    dtype = DTYPES[code]
    nbytes = int(np.prod(dims, dtype=object)) * dtype.itemsize
    if len(data) < offset + nbytes:
        raise TruncatedTensorError(f"payload has {len(data) - offset} bytes, expected {nbytes}")
    if len(data) > offset + nbytes:
        raise TrailingDataError(f"{len(data) - offset - nbytes} bytes after payload")
    return np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(dims).copy()


def _atomic_write(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def write_tensor(path, array) -> None:
    _atomic_write(Path(path), encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def write_json(path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def write_feature_image(prefix, image: FeatureImage) -> None:
    prefix = Path(prefix)
    write_tensor(prefix.with_name(prefix.name + "_features.sadt"), image.data)
    write_tensor(prefix.with_name(prefix.name + "_mask.sadt"), image.valid_mask)


def read_feature_image(prefix) -> FeatureImage:
    prefix = Path(prefix)
    data = read_tensor(prefix.with_name(prefix.name + "_features.sadt")).astype(np.float64)
    mask = read_tensor(prefix.with_name(prefix.name + "_mask.sadt")).astype(bool)
    return FeatureImage(data, mask)


# --- checkpoints -----------------------------------------------------------------


def write_checkpoint(path, cloud: GaussianCloud, iteration: int, config: dict | None = None) -> None:
    """Write a checkpoint directory (JSON index + one tensor file per parameter), replacing atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    sections = {}
    for name in PARAM_NAMES:
        fname = f"{name}.sadt"
        write_tensor(tmp / fname, getattr(cloud, name))
        sections[name] = fname
    write_json(
        tmp / CHECKPOINT_FILE,
        {
            "iteration": int(iteration),
            "num_points": len(cloud),
            "semantic_dim": cloud.semantic_dim,
            "sections": sections,
            "config": config or {},
        },
    )
    old = path.with_name(path.name + ".old")
    if path.exists():
        if old.exists():
            shutil.rmtree(old)
        os.replace(path, old)
    os.replace(tmp, path)
    if old.exists():
        shutil.rmtree(old)


def read_checkpoint(path):
    """Returns (cloud, iteration, config snapshot)."""
    path = Path(path)
    index = json.loads((path / CHECKPOINT_FILE).read_text())
    arrays = {name: read_tensor(path / index["sections"][name]) for name in PARAM_NAMES}
    n = index["num_points"]
    for name, arr in arrays.items():
        if len(arr) != n:
            raise SceneError(f"checkpoint section {name} has {len(arr)} rows, expected {n}")
    arrays["features"] = arrays["features"].reshape(n, index["semantic_dim"])
    return GaussianCloud(**arrays), index["iteration"], index["config"]


# --- scenes ------------------------------------------------------------------------


@dataclass
class View:
    index: int
    camera: Camera
    image: np.ndarray  # (H, W, 3) in [0, 1]
    labels: np.ndarray | None = None  # (H, W) uint8, IGNORE = 255
    bundle: BundleView | None = None


@dataclass
class Scene:
    views: list[View]
    class_names: list[str]
    train: list[int]
    test: list[int]
    class_embeddings: np.ndarray | None = None
    seed_points: np.ndarray | None = None  # (N, 6): xyz, rgb
    root: Path | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def bundle(self) -> ExtractorBundle | None:
        if self.class_embeddings is None:
            return None
        views = {v.index: v.bundle for v in self.views if v.bundle is not None}
        return ExtractorBundle(list(self.class_names), self.class_embeddings, views)


def camera_record(camera: Camera) -> dict:
    return {
        "fx": float(camera.fx),
        "fy": float(camera.fy),
        "cx": float(camera.cx),
        "cy": float(camera.cy),
        "width": int(camera.width),
        "height": int(camera.height),
        "world_to_camera": [float(v) for v in np.asarray(camera.world_to_camera).ravel()],
    }


def camera_from_record(record: dict) -> Camera:
    return Camera(
        fx=record["fx"],
        fy=record["fy"],
        cx=record["cx"],
        cy=record["cy"],
        width=record["width"],
        height=record["height"],
        world_to_camera=np.asarray(record["world_to_camera"], dtype=np.float64).reshape(4, 4),
    )


def downscale_image(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average over factor x factor blocks (trailing rows/columns that do not fill a block are cut)."""
    if factor == 1:
        return image
    h, w = image.shape[0] // factor, image.shape[1] // factor
    blocks = image[: h * factor, : w * factor].reshape(h, factor, w, factor, *image.shape[2:])
    return blocks.mean(axis=(1, 3))


def downscale_labels(labels: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return labels
    h, w = labels.shape[0] // factor, labels.shape[1] // factor
    return labels[: h * factor : factor, : w * factor : factor].copy()


def _read_image(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".png":
        from PIL import Image

        return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    image = read_tensor(path)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def load_scene(manifest_path, downscale: int = 1) -> Scene:
    """Read a scene manifest and everything it references, downscaled by an integer factor."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    try:
        doc = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SceneError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if downscale < 1:
        raise SceneError("downscale factor must be >= 1")

    def resolve(rel: str, what: str) -> Path:
        p = root / rel
        if not p.exists():
            raise SceneError(f"{what}: missing file {p}")
        return p

    class_names = list(doc["class_names"])
    class_embeddings = None
    if doc.get("class_embeddings"):
        class_embeddings = read_tensor(resolve(doc["class_embeddings"], "class embeddings")).astype(np.float64)
    seed_points = None
    if doc.get("points3d"):
        seed_points = read_tensor(resolve(doc["points3d"], "points3d")).astype(np.float64)

    views = []
    for i, rec in enumerate(doc["views"]):
        name = f"view {i}"
        camera = camera_from_record(rec["camera"])
        try:
            camera.validate()
        except ValueError as exc:
            raise SceneError(f"{name}: {exc}") from exc
        image = _read_image(resolve(rec["image"], name))
        if image.shape != (camera.height, camera.width, 3):
            raise SceneError(f"{name}: image shape {image.shape} does not match camera")
        labels = None
        if rec.get("label_map"):
            labels = read_tensor(resolve(rec["label_map"], name))
            if labels.shape != image.shape[:2]:
                raise SceneError(f"{name}: label map shape {labels.shape} does not match image")
            labels = downscale_labels(labels, downscale)
        bundle = None
        if rec.get("bundle"):
            ids = read_tensor(resolve(rec["bundle"]["region_ids"], name)).astype(np.int64)
            emb = read_tensor(resolve(rec["bundle"]["region_embeddings"], name)).astype(np.float64)
            if ids.shape != image.shape[:2]:
                raise SceneError(f"{name}: region grid shape {ids.shape} does not match image")
            bundle = BundleView(downscale_labels(ids, downscale), emb.reshape(-1, emb.shape[-1]))
        views.append(
            View(
                index=i,
                camera=camera.scaled(downscale) if downscale > 1 else camera,
                image=downscale_image(image, downscale),
                labels=labels,
                bundle=bundle,
            )
        )

    train = [int(i) for i in doc["train"]]
    test = [int(i) for i in doc["test"]]
    for split, idx in (("train", train), ("test", test)):
        if len(set(idx)) != len(idx):
            raise SceneError(f"duplicate view indices in {split} split")
        if any(i < 0 or i >= len(views) for i in idx):
            raise SceneError(f"{split} split references a view that does not exist")
    scene = Scene(
        views=views,
        class_names=class_names,
        train=train,
        test=test,
        class_embeddings=class_embeddings,
        seed_points=seed_points,
        root=root,
        metadata=doc.get("metadata", {}),
    )
    bundle = scene.bundle()
    if bundle is not None:
        try:
            bundle.validate()
        except ValueError as exc:
            raise SceneError(f"extractor bundle: {exc}") from exc
    return scene


def write_manifest(path, doc: dict) -> None:
    doc = {"format": MANIFEST_FORMAT, "version": 1, **doc}
    write_json(path, doc)


__all__ = [
    "NO_REGION",
    "Scene",
    "View",
    "decode_tensor",
    "encode_tensor",
    "load_scene",
    "read_checkpoint",
    "read_tensor",
    "write_checkpoint",
    "write_manifest",
    "write_tensor",
]
