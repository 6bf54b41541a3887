"""Independent oracles and fixture builders shared by the unit and acceptance tests.

The oracles are written from the definitions with plain loops so that they
do not share code paths with the package under test.
"""

import math

import numpy as np
from scipy.spatial.transform import Rotation

from semsplat.io import camera_record, write_manifest, write_tensor
from semsplat.render import render, render_backward
from semsplat.scene import Camera, look_at, make_cloud

FD_STEP = 1e-4
FD_BACKGROUND = (0.3, 0.5, 0.7)


def random_render_problem(seed, size=16, dim=4, max_points=10):
    """A small random scene in front of a slightly perturbed camera, plus random upstream gradients."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_points + 1))
    pose = np.eye(4)
    pose[:3, :3] = Rotation.from_rotvec(rng.normal(0, 0.1, 3)).as_matrix()
    pose[:3, 3] = rng.normal(0, 0.1, 3)
    camera = Camera(size, size, size / 2, size / 2, size, size, pose)
    in_camera = np.c_[rng.uniform(-0.8, 0.8, (n, 2)), rng.uniform(2, 4, n)]
    world = (in_camera - pose[:3, 3]) @ pose[:3, :3]
    cloud = make_cloud(
        world,
        rng.uniform(0, 1, (n, 3)),
        rng.uniform(0.2, 0.95, n),
        np.exp(rng.uniform(np.log(0.1), np.log(0.5), (n, 3))),
        rng.normal(size=(n, dim)),
        quaternions=rng.normal(size=(n, 4)),
    )
    gates = rng.uniform(0.2, 1.0, n)
    grad_rgb = rng.normal(size=(size, size, 3))
    grad_feat = rng.normal(size=(size, size, dim))
    return cloud, camera, gates, grad_rgb, grad_feat


def _linear_loss(cloud, camera, gates, grad_rgb, grad_feat):
    out = render(cloud, camera, gates, background=FD_BACKGROUND, min_weight=0.0)
    return float((out.rgb * grad_rgb).sum() + (out.features.data * grad_feat).sum())


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_errors(seed):
    """Worst relative error per parameter group between analytic and central-difference gradients."""
    cloud, camera, gates, grad_rgb, grad_feat = random_render_problem(seed)
    grads = render_backward(cloud, camera, gates, grad_rgb, grad_feat, background=FD_BACKGROUND, min_weight=0.0)
    targets = {name: (getattr(cloud, name), g) for name, g in grads.as_dict().items()}
    targets["gates"] = (gates, grads.gates)
    worst = {}
    for name, (array, analytic) in targets.items():
        err = 0.0
        for idx in np.ndindex(array.shape):
            old = array[idx]
            array[idx] = old + FD_STEP
            plus = _linear_loss(cloud, camera, gates, grad_rgb, grad_feat)
            array[idx] = old - FD_STEP
            minus = _linear_loss(cloud, camera, gates, grad_rgb, grad_feat)
            array[idx] = old
            err = max(err, relative_error(analytic[idx], (plus - minus) / (2 * FD_STEP)))
        worst[name] = err
    return worst


def ssim_oracle(x, y, size=11, sigma=1.5):
    """Mean SSIM over every full window position, one window and channel at a time."""
    c1, c2 = 0.01**2, 0.03**2
    ax = np.arange(size) - (size - 1) / 2
    w = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * sigma**2))
    w /= w.sum()
    h, wd, ch = x.shape
    vals = []
    for c in range(ch):
        for i in range(h - size + 1):
            for j in range(wd - size + 1):
                px = x[i : i + size, j : j + size, c]
                py = y[i : i + size, j : j + size, c]
                mx, my = (w * px).sum(), (w * py).sum()
                vx = (w * (px - mx) ** 2).sum()
                vy = (w * (py - my) ** 2).sum()
                cov = (w * (px - mx) * (py - my)).sum()
                vals.append((2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def entropy_oracle(similarities, kappa):
    """Shannon entropy of softmax(kappa * s) via explicit max-shifted exponentials."""
    z = [kappa * s for s in similarities]
    top = max(z)
    e = [math.exp(v - top) for v in z]
    total = sum(e)
    return -sum((v / total) * math.log(v / total) for v in e if v > 0)


def brute_force_accept(rows, entropy_std_factor=1.0):
    """Indices of (top1, delta, entropy) rows passing the three strict inequalities.

    Statistics use population mean and standard deviation computed in plain Python.
    """
    n = len(rows)

    def mean_std(k):
        m = sum(r[k] for r in rows) / n
        return m, math.sqrt(sum((r[k] - m) ** 2 for r in rows) / n)

    (m1, s1), (m2, s2), (m3, s3) = mean_std(0), mean_std(1), mean_std(2)
    return [
        i
        for i, (t, d, e) in enumerate(rows)
        if t > m1 + s1 and d > m2 + s2 and e < m3 + entropy_std_factor * s3
    ]


def random_cloud(rng, n=None, d=5):
    n = int(rng.integers(1, 40)) if n is None else n
    cloud = make_cloud(
        rng.normal(size=(n, 3)),
        rng.uniform(size=(n, 3)),
        rng.uniform(0.05, 0.95, n),
        rng.uniform(0.01, 0.5, (n, 3)),
        rng.normal(size=(n, d)),
        quaternions=rng.normal(size=(n, 4)),
        gate_logits=rng.normal(size=n),
    )
    return cloud.astype(np.float32)


def write_scene(root, rng, num_views=3, size=8, classes=3, clip=6):
    emb = rng.normal(size=(classes, clip))
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    write_tensor(root / "classes.sadt", emb)
    write_tensor(root / "points.sadt", rng.uniform(size=(10, 6)))
    views = []
    for i in range(num_views):
        cam = Camera(10, 10, size / 2, size / 2, size, size, look_at([3, i, 1], [0, 0, 0]))
        write_tensor(root / f"img{i}.sadt", rng.uniform(size=(size, size, 3)))
        write_tensor(root / f"lab{i}.sadt", rng.integers(0, classes, (size, size)).astype(np.uint8))
        write_tensor(root / f"ids{i}.sadt", rng.integers(-1, 2, (size, size)).astype(np.float32))
        region = rng.normal(size=(2, clip))
        write_tensor(root / f"emb{i}.sadt", region / np.linalg.norm(region, axis=1, keepdims=True))
        views.append(
            {
                "image": f"img{i}.sadt",
                "camera": camera_record(cam),
                "label_map": f"lab{i}.sadt",
                "bundle": {"region_ids": f"ids{i}.sadt", "region_embeddings": f"emb{i}.sadt"},
            }
        )
    doc = {
        "class_names": [f"c{k}" for k in range(classes)],
        "class_embeddings": "classes.sadt",
        "points3d": "points.sadt",
        "train": list(range(num_views - 1)),
        "test": [num_views - 1],
        "views": views,
    }
    write_manifest(root / "manifest.json", doc)
    return root / "manifest.json", doc
