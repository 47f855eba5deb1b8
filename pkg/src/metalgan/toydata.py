"""Procedural desk-scale corpus: eight scene families with family-specific colors.

Each family pairs a luminance pattern (stripes, rings, checks, ...) with a
two-color palette, so the correct chroma is predictable from texture in the
gray image but not from brightness alone.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

# (dark color, light color) per family, RGB
PALETTES = [
    ((25, 45, 130), (240, 215, 110)),   # blue -> sand
    ((30, 95, 35), (250, 175, 200)),    # green -> pink
    ((125, 25, 25), (150, 230, 225)),   # red -> cyan
    ((85, 30, 115), (250, 165, 60)),    # purple -> orange
    ((95, 60, 30), (165, 200, 250)),    # brown -> sky blue
    ((20, 85, 85), (215, 235, 85)),     # teal -> lime
    ((110, 35, 80), (200, 240, 170)),   # plum -> mint
    ((60, 60, 20), (235, 190, 235)),    # olive -> lilac
]
FAMILIES = ["hstripes", "vstripes", "diagonal", "rings", "checks", "disc", "gradient", "blobs"]


def _pattern(kind, size, rng):
    y, x = np.mgrid[0:size, 0:size] / size
    if kind == "hstripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 4) * y + rng.uniform(0, 2 * np.pi))
    if kind == "vstripes":
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 4) * x + rng.uniform(0, 2 * np.pi))
    if kind == "diagonal":
        return 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(2, 3.5) * (x + y) + rng.uniform(0, 2 * np.pi))
    if kind == "rings":
        cy, cx = rng.uniform(0.3, 0.7, size=2)
        r = np.hypot(y - cy, x - cx)
        return 0.5 + 0.5 * np.cos(2 * np.pi * rng.uniform(3, 5) * r)
    if kind == "checks":
        cell = rng.integers(4, 9)
        oy, ox = rng.integers(0, cell, size=2)
        iy, ix = np.mgrid[0:size, 0:size]
        return (((iy + oy) // cell + (ix + ox) // cell) % 2).astype(float)
    if kind == "disc":
        cy, cx = rng.uniform(0.35, 0.65, size=2)
        rad = rng.uniform(0.2, 0.35)
        r = np.hypot(y - cy, x - cx)
        return 1.0 / (1.0 + np.exp((r - rad) * 40))
    if kind == "gradient":
        t = y if rng.random() < 0.5 else 1 - y
        return np.clip(t + 0.08 * np.sin(2 * np.pi * rng.uniform(1, 2) * x + rng.uniform(0, 6.3)), 0, 1)
    if kind == "blobs":
        coarse = rng.random((4, 4))
        up = np.asarray(Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC), float)
        up = (up - up.min()) / max(up.max() - up.min(), 1e-9)
        return up
    raise ValueError(kind)


def make_image(family, size, rng):
    dark, light = (np.array(c, float) + rng.uniform(-15, 15, 3) for c in PALETTES[family])
    t = _pattern(FAMILIES[family], size, rng)[..., None]
    rgb = dark + (light - dark) * t + rng.uniform(-3, 3, (size, size, 3))
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def make_toy_corpus(directory, n_images=500, size=32, seed=0):
    """Write ``n_images`` PNGs plus ``labels.json`` (image id -> family) and return the labels.

    Families are assigned round-robin, so the corpus is balanced.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = {}
    for i in range(n_images):
        family = i % len(FAMILIES)
        image_id = f"img_{i:04d}"
        Image.fromarray(make_image(family, size, rng), mode="RGB").save(directory / f"{image_id}.png")
        labels[image_id] = family
    (directory / "labels.json").write_text(json.dumps(labels, indent=0))
    return labels


def load_labels(directory):
    return {k: int(v) for k, v in json.loads((Path(directory) / "labels.json").read_text()).items()}
