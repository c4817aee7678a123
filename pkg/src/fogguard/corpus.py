"""Procedural VOC-like corpus used in place of PASCAL VOC / RTTS.

Each scene is a sky/ground backdrop with one to three colored shapes and a
matching depth raster (ground recedes toward the horizon, objects stand at
the depth of their base). "Real fog" scenes are rendered with their own
density and a slightly different airlight so they differ from the
synthetic fog used in training.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .dataset import CLEAR, REAL_FOG, DatasetSpec, GroundTruthBox, Sample, save_manifest, voc_annotation_xml
from .fogsynth import FogParams, render_fog, rescale_depth
from .imagecore import DepthMap, Image, save_pfm, save_ppm
from .rng import SplitMix64

CLASS_NAMES = ("car", "person", "sign")
SIZE = 64
GRID = 4
SKY_DEPTH = 40.0

# (width range, height range) in pixels per class
_SIZES = {
    0: ((18, 23), (11, 14)),
    1: ((10, 13), (18, 23)),
    2: ((14, 17), (14, 17)),
}

_BASE_COLORS = {
    0: (0.85, 0.15, 0.12),
    1: (0.15, 0.70, 0.20),
    2: (0.15, 0.25, 0.90),
}


def _shape_mask(cls: int, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if cls == 0:
        return np.ones((h, w), dtype=bool)
    if cls == 1:
        return u * u + v * v <= 1.0
    return np.abs(u) + np.abs(v) <= 1.0


def render_scene(rng: SplitMix64, size: int = SIZE) -> tuple[np.ndarray, np.ndarray, list[GroundTruthBox]]:
    """One clear scene: ``(image (h, w, 3), raw depth (h, w), boxes)``."""
    u = rng.uniform
    horizon = int(size * (0.3 + 0.2 * u()))
    rows = np.arange(size, dtype=np.float64)[:, None] * np.ones((1, size))
    sky = np.array([0.55 + 0.2 * u(), 0.65 + 0.2 * u(), 0.80 + 0.15 * u()])
    ground = np.array([0.30 + 0.25 * u(), 0.30 + 0.2 * u(), 0.20 + 0.15 * u()])
    img = np.empty((size, size, 3))
    is_sky = rows < horizon
    shade = 0.85 + 0.15 * rows / size
    img[:] = np.where(is_sky[..., None], sky, ground * shade[..., None])
    noise = rng.uniform_array(size * size * 3).reshape(size, size, 3)
    img += 0.06 * (noise - 0.5)

    frac = np.clip((rows - horizon) / max(size - horizon, 1), 0.0, 1.0)
    depth = np.where(is_sky, SKY_DEPTH, 2.0 + 28.0 * (1.0 - frac) ** 2)

    cells = rng.shuffle([(r, c) for r in range(GRID) for c in range(GRID) if r >= 1])
    n_obj = 1 + rng.randbelow(3)
    cell = size // GRID
    boxes = []
    for r, c in cells[:n_obj]:
        cls = rng.randbelow(3)
        (w_lo, w_hi), (h_lo, h_hi) = _SIZES[cls]
        w = w_lo + rng.randbelow(w_hi - w_lo)
        h = h_lo + rng.randbelow(h_hi - h_lo)
        cx = c * cell + cell * (0.15 + 0.7 * u())
        cy = r * cell + cell * (0.15 + 0.7 * u())
        x0 = int(round(min(max(cx - w / 2, 0), size - w)))
        y0 = int(round(min(max(cy - h / 2, 0), size - h)))
        mask = _shape_mask(cls, w, h)
        color = np.clip(np.array(_BASE_COLORS[cls]) + 0.15 * (np.array([u(), u(), u()]) - 0.5), 0, 1)
        region = img[y0:y0 + h, x0:x0 + w]
        region[mask] = color * (0.9 + 0.1 * u())
        base_row = min(y0 + h - 1, size - 1)
        obj_depth = depth[base_row, min(x0 + w // 2, size - 1)] if base_row >= horizon else 2.0 + 28.0 * u()
        depth[y0:y0 + h, x0:x0 + w][mask] = obj_depth
        boxes.append(GroundTruthBox(cls, float(x0), float(y0), float(x0 + w), float(y0 + h)))
    return np.clip(img, 0.0, 1.0), depth, boxes


def make_corpus(out_dir: str | os.PathLike, seed: int = 0, n_clear: int = 36, n_fog: int = 12,
                n_test: int = 12, size: int = SIZE) -> dict[str, Path]:
    """Write images, depth maps, annotations and manifests; returns manifest paths.

    Manifests: ``train.json`` (clear + real-fog), ``test.json`` (held-out
    clear scenes with depth) and ``all.json``.
    """
    out = Path(out_dir)
    for sub in ("images", "depth", "annotations"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = SplitMix64(seed)
    train, test = [], []
    total = n_clear + n_fog + n_test
    for i in range(total):
        img, depth, boxes = render_scene(rng, size)
        name = f"img{i:03d}"
        domain = REAL_FOG if n_clear <= i < n_clear + n_fog else CLEAR
        dmap = DepthMap(depth)
        if domain == REAL_FOG:
            beta = 0.03 + 0.17 * rng.uniform()
            airlight = 0.45 + 0.2 * rng.uniform()
            img = render_fog(Image(img), rescale_depth(dmap, 10.0), FogParams(beta, airlight)).data
            depth_path = None
        else:
            depth_path = out / "depth" / f"{name}.pfm"
            save_pfm(dmap, depth_path)
        img_path = out / "images" / f"{name}.ppm"
        save_ppm(Image(img), img_path)
        ann = out / "annotations" / f"{name}.xml"
        ann.write_text(voc_annotation_xml(boxes, CLASS_NAMES, size, size, f"{name}.ppm"))
        s = Sample(img_path, tuple(boxes), domain, depth_path, ann)
        (test if i >= n_clear + n_fog else train).append(s)
    paths = {
        "train": out / "train.json",
        "test": out / "test.json",
        "all": out / "all.json",
    }
    save_manifest(DatasetSpec(tuple(train), CLASS_NAMES), paths["train"])
    save_manifest(DatasetSpec(tuple(test), CLASS_NAMES), paths["test"])
    save_manifest(DatasetSpec(tuple(train + test), CLASS_NAMES), paths["all"])
    return paths


def calibration_image(size: int = SIZE) -> Image:
    """White field with a gray ramp and primary-color bars, for golden-file checks."""
    img = np.ones((size, size, 3))
    ramp = np.linspace(0.0, 1.0, size)
    img[size // 2:, :, :] = ramp[None, :, None]
    q = size // 4
    img[q:2 * q, 0:q] = (1.0, 0.0, 0.0)
    img[q:2 * q, q:2 * q] = (0.0, 1.0, 0.0)
    img[q:2 * q, 2 * q:3 * q] = (0.0, 0.0, 1.0)
    img[q:2 * q, 3 * q:] = (0.0, 0.0, 0.0)
    return Image(img)
