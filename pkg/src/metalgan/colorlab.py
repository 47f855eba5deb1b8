"""sRGB <-> CIE Lab conversion and the Lab-plane image model.

The generator consumes the lightness plane and predicts the two chroma
planes, so every image entering training is split into ``L`` (H x W) and
``ab`` (H x W x 2). Conversion is sRGB companding followed by the CIE Lab
transform under D65.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# IEC 61966-2-1 linear sRGB -> XYZ (D65).
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)
# Reference white taken as the image of RGB (1, 1, 1) so that white maps to
# a = b = 0 and L = 100 exactly.
WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0

L_RANGE = (0.0, 100.0)
AB_RANGE = (-128.0, 127.0)
MIN_SIDE = 8


class ColorSpaceError(ValueError):
    pass


@dataclass
class ImageRGB:
    pixels: np.ndarray
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ColorSpaceError(f"expected HxWx3 pixels, got shape {px.shape}")
        if px.shape[0] < MIN_SIDE or px.shape[1] < MIN_SIDE:
            raise ColorSpaceError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {px.shape[:2]}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255) or not np.all(px == np.round(px)):
                raise ColorSpaceError("pixel values must be integers in [0, 255]")
            px = px.astype(np.uint8)
        self.pixels = px

    @property
    def shape(self):
        return self.pixels.shape[:2]


@dataclass
class ImageLab:
    L: np.ndarray
    ab: np.ndarray
    normalized: bool = False
    id: str = field(default="", compare=False)

    def __post_init__(self):
        self.L = np.asarray(self.L, dtype=np.float64)
        self.ab = np.asarray(self.ab, dtype=np.float64)
        if self.L.ndim != 2 or self.ab.ndim != 3 or self.ab.shape[2] != 2:
            raise ColorSpaceError(f"bad plane shapes L={self.L.shape} ab={self.ab.shape}")
        if self.ab.shape[:2] != self.L.shape:
            raise ColorSpaceError(f"L is {self.L.shape} but ab is {self.ab.shape[:2]}")

    @property
    def shape(self):
        return self.L.shape

    def __eq__(self, other):
        if not isinstance(other, ImageLab):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and np.array_equal(self.L, other.L)
            and np.array_equal(self.ab, other.ab)
        )


def _srgb_to_linear(c):
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def _linear_to_srgb(c):
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f(t):
    return np.where(t > _DELTA**3, np.cbrt(t), t / (3 * _DELTA**2) + 4.0 / 29.0)


def _f_inv(t):
    return np.where(t > _DELTA, t**3, 3 * _DELTA**2 * (t - 4.0 / 29.0))


def rgb_array_to_lab(rgb):
    """Convert an ``(..., 3)`` array of sRGB values in [0, 255] to Lab."""
    c = np.asarray(rgb, dtype=np.float64) / 255.0
    xyz = _srgb_to_linear(c) @ _RGB_TO_XYZ.T
    fx, fy, fz = np.moveaxis(_f(xyz / WHITE_D65), -1, 0)
    L = 116.0 * fy - 16.0
    a = 500.0 * (fx - fy)
    b = 200.0 * (fy - fz)
    return np.stack([L, a, b], axis=-1)


def lab_array_to_rgb(lab):
    """Convert an ``(..., 3)`` Lab array to clipped, rounded uint8 sRGB."""
    lab = np.asarray(lab, dtype=np.float64)
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = _f_inv(np.stack([fx, fy, fz], axis=-1)) * WHITE_D65
    c = _linear_to_srgb(xyz @ _XYZ_TO_RGB.T)
    return np.clip(np.round(c * 255.0), 0, 255).astype(np.uint8)


def rgb_to_lab(img: ImageRGB) -> ImageLab:
    lab = rgb_array_to_lab(img.pixels)
    return ImageLab(lab[..., 0], lab[..., 1:], normalized=False, id=img.id)


def lab_to_rgb(img: ImageLab) -> ImageRGB:
    if img.normalized:
        raise ColorSpaceError("lab_to_rgb needs raw Lab values; call denormalize first")
    lab = np.concatenate([img.L[..., None], img.ab], axis=-1)
    return ImageRGB(lab_array_to_rgb(lab), id=img.id)


def normalize(img: ImageLab) -> ImageLab:
    """Map L from [0, 100] and ab from [-128, 127] affinely onto [-1, 1]."""
    if img.normalized:
        raise ColorSpaceError("image is already normalized")
    L = img.L / 50.0 - 1.0
    ab = (img.ab - AB_RANGE[0]) / 127.5 - 1.0
    return ImageLab(L, ab, normalized=True, id=img.id)


def denormalize(img: ImageLab) -> ImageLab:
    if not img.normalized:
        raise ColorSpaceError("image is not normalized")
    L = (img.L + 1.0) * 50.0
    ab = (img.ab + 1.0) * 127.5 + AB_RANGE[0]
    return ImageLab(L, ab, normalized=False, id=img.id)


def compose_output(L, ab, id: str = "") -> ImageLab:
    """Join an input lightness plane with generated chroma planes.

    ``L`` is H x W; ``ab`` is H x W x 2 or channels-first 2 x H x W. Both must
    already be normalized. The L plane is carried through untouched.
    """
    L = np.asarray(L)
    ab = np.asarray(ab)
    if L.ndim == 3 and L.shape[0] == 1:
        L = L[0]
    if ab.ndim == 3 and ab.shape[0] == 2 and ab.shape[2] != 2:
        ab = np.moveaxis(ab, 0, -1)
    if L.ndim != 2 or ab.shape != L.shape + (2,):
        raise ColorSpaceError(f"shape mismatch: L {L.shape} vs ab {ab.shape}")
    if np.abs(L).max(initial=0) > 1 or np.abs(ab).max(initial=0) > 1:
        raise ColorSpaceError("compose_output expects normalized planes in [-1, 1]")
    return ImageLab(L, ab, normalized=True, id=id)


def to_planes(img: ImageLab):
    """Channels-first float arrays ``(1, H, W)`` and ``(2, H, W)``."""
    return img.L[None], np.moveaxis(img.ab, -1, 0)


def load_rgb(path, size=None, id=None) -> ImageRGB:
    """Read a PNG/JPEG as RGB, optionally resized (bilinear) to ``size`` x ``size``."""
    path = Path(path)
    with Image.open(path) as im:
        im = im.convert("RGB")
        if size is not None and im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        px = np.asarray(im, dtype=np.uint8).copy()
    return ImageRGB(px, id=path.stem if id is None else id)


def save_png(img: ImageRGB, path) -> None:
    Image.fromarray(img.pixels, mode="RGB").save(path, format="PNG")
