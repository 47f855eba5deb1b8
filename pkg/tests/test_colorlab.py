import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metalgan.colorlab import (
    ColorSpaceError,
    ImageLab,
    ImageRGB,
    compose_output,
    denormalize,
    lab_array_to_rgb,
    lab_to_rgb,
    load_rgb,
    normalize,
    rgb_array_to_lab,
    rgb_to_lab,
    save_png,
)

# Frozen from a scalar, loop-free evaluation of the textbook
# sRGB -> linear -> XYZ -> Lab formulas in double precision.
GRAY_128_LAB = (53.58501345216902, 0.0, 0.0)
MAGENTA_LAB = (44.16111638922161, 65.8070621188957, 10.613190588194731)


def solid(rgb, size=8):
    return ImageRGB(np.full((size, size, 3), rgb, dtype=np.uint8))


def lattice():
    v = np.linspace(0, 255, 16).round().astype(np.uint8)
    r, g, b = np.meshgrid(v, v, v, indexing="ij")
    return np.stack([r, g, b], axis=-1).reshape(64, 64, 3)


def test_white_is_pure_lightness():
    lab = rgb_to_lab(solid((255, 255, 255)))
    assert np.all(lab.L == 100.0)
    assert np.abs(lab.ab).max() < 0.01


def test_black_is_origin():
    lab = rgb_to_lab(solid((0, 0, 0)))
    assert np.all(lab.L == 0.0)
    assert np.all(lab.ab == 0.0)


@pytest.mark.parametrize("rgb,expected", [((128, 128, 128), GRAY_128_LAB), ((200, 30, 90), MAGENTA_LAB)])
def test_reference_colors(rgb, expected):
    lab = rgb_array_to_lab(np.array(rgb))
    np.testing.assert_allclose(lab, expected, atol=1e-9)


def test_lattice_round_trip_within_one_level():
    px = lattice()
    back = lab_to_rgb(rgb_to_lab(ImageRGB(px))).pixels
    assert np.abs(back.astype(int) - px.astype(int)).max() <= 1


def test_lab_anchors_to_rgb():
    assert np.all(lab_array_to_rgb(np.array([100.0, 0.0, 0.0])) == 255)
    assert np.all(lab_array_to_rgb(np.array([0.0, 0.0, 0.0])) == 0)


def test_out_of_gamut_is_clipped():
    rgb = lab_array_to_rgb(np.array([50.0, 127.0, -128.0]))
    assert rgb.dtype == np.uint8


def test_lab_to_rgb_rejects_normalized():
    img = normalize(rgb_to_lab(solid((10, 20, 30))))
    with pytest.raises(ColorSpaceError):
        lab_to_rgb(img)


def test_normalize_endpoints_and_midpoint():
    L = np.array([[0.0, 50.0], [100.0, 50.0]])
    ab = np.stack([np.full((2, 2), -128.0), np.full((2, 2), 127.0)], axis=-1)
    n = normalize(ImageLab(L, ab))
    assert n.normalized
    np.testing.assert_array_equal(n.L, [[-1.0, 0.0], [1.0, 0.0]])
    assert np.all(n.ab[..., 0] == -1.0) and np.all(n.ab[..., 1] == 1.0)


def test_normalize_twice_rejected():
    with pytest.raises(ColorSpaceError):
        normalize(normalize(rgb_to_lab(solid((1, 2, 3)))))
    with pytest.raises(ColorSpaceError):
        denormalize(rgb_to_lab(solid((1, 2, 3))))


@settings(max_examples=50, deadline=None)
@given(arrays(np.uint8, (8, 8, 3)))
def test_normalize_round_trip(px):
    lab = rgb_to_lab(ImageRGB(px))
    n = normalize(lab)
    assert np.abs(n.L).max() <= 1 and np.abs(n.ab).max() <= 1
    back = denormalize(n)
    np.testing.assert_allclose(back.L, lab.L, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(back.ab, lab.ab, rtol=1e-12, atol=1e-12)


def test_compose_output_identity_and_passthrough():
    gt = normalize(rgb_to_lab(ImageRGB(lattice())))
    out = compose_output(gt.L, gt.ab)
    assert out == gt
    assert out.L.tobytes() == gt.L.tobytes()
    # channels-first ab is accepted too
    out2 = compose_output(gt.L[None], np.moveaxis(gt.ab, -1, 0))
    assert out2 == gt


def test_compose_then_export_round_trips():
    px = lattice()
    gt = normalize(rgb_to_lab(ImageRGB(px)))
    rgb = lab_to_rgb(denormalize(compose_output(gt.L, gt.ab))).pixels
    assert np.abs(rgb.astype(int) - px.astype(int)).max() <= 1


def test_compose_output_shape_mismatch():
    with pytest.raises(ColorSpaceError):
        compose_output(np.zeros((8, 8)), np.zeros((8, 9, 2)))


@pytest.mark.parametrize("shape", [(7, 8, 3), (8, 8, 4), (8, 8)])
def test_image_rgb_validation(shape):
    with pytest.raises(ColorSpaceError):
        ImageRGB(np.zeros(shape, dtype=np.uint8))


def test_image_rgb_rejects_out_of_range():
    with pytest.raises(ColorSpaceError):
        ImageRGB(np.full((8, 8, 3), 300))


def test_png_round_trip(tmp_path):
    img = ImageRGB(lattice(), id="x")
    save_png(img, tmp_path / "x.png")
    back = load_rgb(tmp_path / "x.png")
    assert back.id == "x"
    np.testing.assert_array_equal(back.pixels, img.pixels)
