import numpy as np
import pytest

from cellnet.errors import DegenerateInputWarning, PreprocessError
from cellnet.models.records import CellSample
from cellnet.models.run_config import AugmentationPlan
from cellnet.utils import imageproc


def ellipse_mask(size=78, major=25.0, minor=10.0, direction_degrees=90.0):
    """Elliptical mask whose major axis points along direction_degrees (x right, y up)"""
    c = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size].astype(float)
    x, y = cols - c, -(rows - c)
    phi = np.radians(direction_degrees)
    u = x * np.cos(phi) + y * np.sin(phi)
    v = -x * np.sin(phi) + y * np.cos(phi)
    return (u / major) ** 2 + (v / minor) ** 2 <= 1.0


# ============= INTENSITY =============

def test_contrast_normalize_formula():
    out = imageproc.contrast_normalize(np.array([[0, 2], [4, 8]]))
    assert out.tolist() == [[0.0, 0.25], [0.5, 1.0]]


def test_contrast_normalize_idempotent_and_order_preserving(rng):
    img = rng.uniform(3, 900, (10, 12))
    once = imageproc.contrast_normalize(img)
    assert once.min() == 0.0 and once.max() == 1.0
    assert np.allclose(imageproc.contrast_normalize(once), once, atol=1e-15)
    order = np.argsort(img, axis=None)
    assert (np.diff(once.ravel()[order]) >= 0).all()


def test_constant_image_maps_to_zeros_with_warning():
    with pytest.warns(DegenerateInputWarning):
        out = imageproc.contrast_normalize(np.full((4, 4), 7.0))
    assert not out.any()


def test_select_channel_takes_green_of_rgb_in_every_mode():
    rgb = np.zeros((2, 2, 3), dtype=np.uint8)
    rgb[..., 0], rgb[..., 1], rgb[..., 2] = 10, 200, 30
    assert (imageproc.select_channel(rgb) == 200).all()
    assert (imageproc.select_channel(rgb, mode="grayscale") == 200).all()
    assert (imageproc.select_channel(np.dstack([rgb, np.full((2, 2), 255, np.uint8)])) == 200).all()
    gray = np.arange(4).reshape(2, 2)
    assert np.array_equal(imageproc.select_channel(gray), gray)


# ============= GEOMETRY =============

def test_resize_same_size_is_identity(rng):
    img = rng.random((13, 9))
    assert np.max(np.abs(imageproc.resize(img, 13, 9) - img)) < 1e-9


def test_resize_hand_bilinear():
    out = imageproc.resize(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 3)
    assert np.allclose(out[:, 1], 0.5)
    assert np.allclose(out[:, 0], 0.0) and np.allclose(out[:, 2], 1.0)


def test_resize_constant_image():
    out = imageproc.resize(np.full((5, 7), 0.3), 78, 78)
    assert out.shape == (78, 78) and np.allclose(out, 0.3)


def test_rotation_zero_and_full_turn(rng):
    img = rng.random((11, 11))
    assert np.max(np.abs(imageproc.rotate_about_center(img, 0) - img)) < 1e-9
    assert np.max(np.abs(imageproc.rotate_about_center(img, 360) - img)) < 1e-9


def test_four_quarter_turns_recover_the_image(rng):
    img = rng.random((12, 12))
    out = img
    for _ in range(4):
        out = imageproc.rotate_about_center(out, 90)
    assert np.max(np.abs(out - img)) < 1e-6


def test_quarter_turn_is_counter_clockwise():
    img = np.zeros((5, 5))
    img[2, 4] = 1.0  # right-center
    out = imageproc.rotate_about_center(img, 90)
    assert out[0, 2] == pytest.approx(1.0)  # now top-center


def test_rotate_and_back_within_tolerance(rng):
    from scipy import ndimage
    img = ndimage.gaussian_filter(rng.random((40, 40)), 2.0)
    back = imageproc.rotate_about_center(imageproc.rotate_about_center(img, 23.0), -23.0)
    # only pixels whose source stayed inside the frame both ways
    c = 19.5
    rows, cols = np.mgrid[0:40, 0:40]
    inside = np.hypot(rows - c, cols - c) < 19.5 - 2
    assert np.max(np.abs(back - img)[inside]) < 5e-2


# ============= PCA ALIGNMENT =============

def test_vertical_mask_needs_no_rotation():
    assert imageproc.principal_angle(ellipse_mask(direction_degrees=90)) == pytest.approx(0.0, abs=1e-6)


def test_horizontal_bar_rotates_ninety():
    mask = np.zeros((20, 20), dtype=bool)
    mask[9:11, 2:18] = True
    assert abs(imageproc.principal_angle(mask)) == pytest.approx(90.0, abs=1e-6)


def test_ellipse_at_thirty_degrees_recovered():
    # major axis 30 degrees clockwise from vertical
    mask = ellipse_mask(direction_degrees=60)
    assert imageproc.principal_angle(mask) == pytest.approx(30.0, abs=0.5)


def test_aligned_mask_is_vertical():
    mask = ellipse_mask(direction_degrees=137)
    img = mask.astype(float)
    _, aligned_mask = imageproc.pca_align(img, mask, target=78, return_mask=True)
    assert abs(imageproc.principal_angle(aligned_mask)) < 1.0


def test_empty_mask_is_an_error():
    with pytest.raises(PreprocessError):
        imageproc.principal_angle(np.zeros((8, 8), dtype=bool))


def test_isotropic_mask_skips_rotation_with_warning():
    mask = np.zeros((9, 9), dtype=bool)
    mask[3:6, 3:6] = True
    with pytest.warns(DegenerateInputWarning):
        assert imageproc.principal_angle(mask) == 0.0


def test_pca_align_output_size(rng):
    out = imageproc.pca_align(rng.random((50, 64)), ellipse_mask(64)[:50], target=78)
    assert out.shape == (78, 78)


# ============= AUGMENTATION =============

@pytest.mark.parametrize("step, count", [(36, 10), (18, 20), (9, 40), (360, 1)])
def test_augment_variant_counts(rng, step, count):
    img = rng.random((16, 16))
    variants = imageproc.augment(img, AugmentationPlan(angle_step_degrees=step))
    assert len(variants) == count
    assert np.array_equal(variants[0], img)


def test_augment_variant_k_is_rotation_by_k_steps(rng):
    img = rng.random((16, 16))
    variants = imageproc.augment(img, AugmentationPlan(angle_step_degrees=36))
    assert np.array_equal(variants[3], imageproc.rotate_about_center(img, 108))


def test_plan_rejects_non_divisor():
    with pytest.raises(ValueError):
        AugmentationPlan(angle_step_degrees=7)


# ============= PIPELINE =============

def test_preprocess_grayscale_is_normalize_then_resize(rng):
    raw = rng.integers(0, 4096, (40, 50))
    expected = imageproc.resize(imageproc.contrast_normalize(raw), 78, 78)
    assert np.allclose(imageproc.preprocess_array(raw), expected, atol=1e-15)


def test_preprocess_rgb_uses_green_channel(rng):
    rgb = rng.integers(0, 255, (30, 30, 3)).astype(np.uint8)
    expected = imageproc.resize(imageproc.contrast_normalize(rgb[..., 1]), 78, 78)
    assert np.allclose(imageproc.preprocess_array(rgb), expected, atol=1e-15)


def test_preprocess_align_composition(rng):
    raw = rng.random((64, 64))
    mask = ellipse_mask(64, 20, 8, 20)
    expected = imageproc.pca_align(imageproc.contrast_normalize(raw), mask, 78)
    assert np.allclose(imageproc.preprocess_array(raw, mask, align=True), expected, atol=1e-15)


def test_align_without_mask_is_an_error(tmp_path, rng):
    path = str(tmp_path / "cell.png")
    imageproc.save_image(path, rng.random((20, 20)))
    sample = CellSample(id="c1", image_path=path, label=0, label_name="Homogeneous")
    with pytest.raises(PreprocessError):
        imageproc.preprocess(sample, align=True)
    assert imageproc.preprocess(sample).shape == (78, 78)


def test_sixteen_bit_round_trip(tmp_path, rng):
    path = str(tmp_path / "img16.png")
    img = rng.random((10, 10))
    imageproc.save_image(path, img, bits=16)
    loaded = imageproc.load_image(path)
    assert np.max(np.abs(loaded / 65535.0 - img)) < 1e-4
