"""Synthetic block-mosaic datasets used as fixtures in place of real rasters."""

from __future__ import annotations

import json
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .foundation import ImageSample

# distinct base colours, one per class slot
PALETTE = np.array(
    [
        [0.85, 0.25, 0.20],
        [0.20, 0.65, 0.25],
        [0.25, 0.35, 0.85],
        [0.90, 0.80, 0.20],
        [0.60, 0.30, 0.70],
        [0.20, 0.80, 0.80],
        [0.55, 0.55, 0.55],
        [0.95, 0.55, 0.15],
    ]
)


def block_mosaic(
    num_classes: int,
    size: int = 64,
    block: int = 16,
    seed: int = 0,
    noise: float = 0.05,
    ignore_fraction: float = 0.0,
    ignore_value: int = 255,
):
    """Image of ``block``-sized tiles, each tile one class colour plus noise.

    Returns ``(image uint8 HxWx3, label uint8 HxW)`` as numpy arrays.
    """
    if num_classes > len(PALETTE):
        raise ValueError(f"at most {len(PALETTE)} classes supported")
    rng = np.random.default_rng(seed)
    g = size // block
    tiles = rng.integers(0, num_classes, size=(g, g))
    tiles.flat[: min(num_classes, g * g)] = rng.permutation(num_classes)[: g * g]
    label = np.kron(tiles, np.ones((block, block), dtype=int))
    img = PALETTE[label] + noise * rng.standard_normal((size, size, 3))
    img = np.clip(img, 0.0, 1.0)
    if ignore_fraction > 0:
        label = label.copy()
        label[rng.random((size, size)) < ignore_fraction] = ignore_value
    return (img * 255).round().astype(np.uint8), label.astype(np.uint8)


def to_sample(img: np.ndarray, label: Optional[np.ndarray], ignore_value: int = 255, name: str = "") -> ImageSample:
    image = torch.from_numpy(img.astype(np.float64) / 255.0).to(torch.get_default_dtype())
    lab = None if label is None else torch.from_numpy(label.astype(np.int64))
    return ImageSample(image, lab, ignore_value, name)


def make_samples(num_images: int, num_classes: int, size: int = 64, seed: int = 0, **kw) -> List[ImageSample]:
    return [
        to_sample(*block_mosaic(num_classes, size=size, seed=seed * 1000 + i, **kw), name=f"img{i:03d}")
        for i in range(num_images)
    ]


def write_fixture_dataset(
    root,
    name: str,
    classes: Sequence[str],
    num_images: int = 4,
    size: int = 64,
    seed: int = 0,
    split: str = "val",
    ignore_value: int = 255,
    ignore_fraction: float = 0.0,
) -> Path:
    """Write PNG images, index-raster labels and a manifest; returns the manifest path."""
    from PIL import Image

    root = Path(root) / name
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(num_images):
        img, lab = block_mosaic(
            len(classes), size=size, seed=seed * 1000 + i, ignore_fraction=ignore_fraction, ignore_value=ignore_value
        )
        ip, lp = f"images/{i:04d}.png", f"labels/{i:04d}.png"
        Image.fromarray(img, "RGB").save(root / ip)
        Image.fromarray(lab, "L").save(root / lp)
        entries.append({"image": ip, "label": lp})
    manifest = {
        "name": name,
        "root": ".",
        "classes": list(classes),
        "ignore_value": ignore_value,
        "split": split,
        "entries": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path
