import numpy as np
import pytest

from myoda.core import Domain, Image2D, LabelMap, ValidationError
from myoda.phantom import PhantomParams, generate_phantom
from myoda.preprocess import (
    NormalizationSpec,
    apply_dilation_schedule,
    binary_dilate,
    denormalize_ct,
    dilate_class,
    extract_muscle_bone_masks,
    normalize_ct,
    normalize_mr,
    parse_dilation_schedule,
    split_left_right,
)


def ct_image(values):
    return Image2D(values=np.asarray(values, dtype=np.float32), spacing=(0.97, 0.97), domain=Domain.CT)


def mr_image(values):
    return Image2D(values=np.asarray(values, dtype=np.float32), spacing=(1, 1), domain=Domain.MR)


# ---------------------------------------------------------------------------
# normalization


def test_normalize_ct_window_endpoints():
    img = ct_image([[-200.0, 500.0], [150.0, -300.0]])
    out = normalize_ct(img).values
    assert out[0, 0] == pytest.approx(-1.0)
    assert out[0, 1] == pytest.approx(1.0)
    assert out[1, 0] == pytest.approx(0.0)  # window midpoint
    assert out[1, 1] == pytest.approx(-1.0)  # clipped below the window


def test_normalize_ct_rejects_mr():
    with pytest.raises(ValidationError, match="CT"):
        normalize_ct(mr_image([[0.0, 1.0]]))


def test_normalize_ct_round_trip():
    rng = np.random.default_rng(0)
    img = ct_image(rng.uniform(-200, 500, size=(8, 8)))
    norm = normalize_ct(img)
    again = normalize_ct(denormalize_ct(norm))
    assert np.allclose(norm.values, again.values, atol=1e-5)


def test_normalize_mr_two_values():
    out = normalize_mr(mr_image([[0.0, 10.0]])).values
    assert out[0, 0] == pytest.approx(-1.0)
    assert out[0, 1] == pytest.approx(1.0)


def test_normalize_mr_linear():
    out = normalize_mr(mr_image([[5.0, 10.0, 15.0]])).values
    assert np.allclose(out, [[-1.0, 0.0, 1.0]])


def test_normalize_mr_constant_errors():
    with pytest.raises(ValidationError, match="constant"):
        normalize_mr(mr_image(np.full((4, 4), 3.0)))


def test_normalize_mr_rejects_ct():
    with pytest.raises(ValidationError, match="MR"):
        normalize_mr(ct_image([[0.0, 1.0]]))


# ---------------------------------------------------------------------------
# left/right splitting


def two_disk_image(h=120, w=200, r=18):
    yy, xx = np.mgrid[0:h, 0:w]
    left = (yy - h / 2) ** 2 + (xx - w * 0.25) ** 2 <= r**2
    right = (yy - h / 2) ** 2 + (xx - w * 0.75) ** 2 <= r**2
    values = np.full((h, w), -1000.0, dtype=np.float32)
    values[left | right] = 50.0
    return ct_image(values), left, right


def test_split_left_right_two_disks():
    img, left, right = two_disk_image()
    (l_img, _), (r_img, _) = split_left_right(img, out_size=64)
    assert l_img.values.shape == (64, 64) and r_img.values.shape == (64, 64)
    # each crop contains exactly one disk, centered
    assert (l_img.values > 0).sum() == left.sum()
    assert (r_img.values > 0).sum() == right.sum()
    assert l_img.values[32, 32] > 0 and r_img.values[32, 32] > 0


def test_split_left_right_label_coregistration():
    img, left, right = two_disk_image()
    classes = np.zeros(img.values.shape, dtype=np.uint8)
    classes[left] = 3
    classes[right] = 2
    lbl = LabelMap(classes=classes)
    (l_img, l_lbl), (r_img, r_lbl) = split_left_right(img, lbl, out_size=64)
    assert np.array_equal(l_lbl.classes == 3, l_img.values > 0)
    assert np.array_equal(r_lbl.classes == 2, r_img.values > 0)


def test_split_left_right_single_component_errors():
    h, w = 80, 80
    yy, xx = np.mgrid[0:h, 0:w]
    values = np.full((h, w), -1000.0, dtype=np.float32)
    values[(yy - 40) ** 2 + (xx - 40) ** 2 <= 15**2] = 50.0
    with pytest.raises(ValidationError, match="expected 2"):
        split_left_right(ct_image(values), out_size=64)


def test_split_default_sizes_by_domain():
    img, _, _ = two_disk_image(h=300, w=600, r=30)
    (l_img, _), _ = split_left_right(img)
    assert l_img.values.shape == (256, 256)  # CT default


# ---------------------------------------------------------------------------
# dilation


def brute_force_dilate(classes: np.ndarray, class_id: int, iterations: int) -> np.ndarray:
    """Reference dilation: per-pixel neighbourhood scan, background-only claims."""
    out = classes.copy()
    h, w = out.shape
    for _ in range(iterations):
        grown = out.copy()
        for y in range(h):
            for x in range(w):
                if out[y, x] != 0:
                    continue
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        yy, xx = y + dy, x + dx
                        if 0 <= yy < h and 0 <= xx < w and out[yy, xx] == class_id:
                            grown[y, x] = class_id
        out = grown
    return out


def test_dilate_zero_iterations_is_identity():
    lbl = LabelMap(classes=np.random.default_rng(0).integers(0, 5, (10, 10)).astype(np.uint8))
    assert np.array_equal(dilate_class(lbl, 3, 0).classes, lbl.classes)


def test_dilate_center_pixel_becomes_block():
    classes = np.zeros((7, 7), dtype=np.uint8)
    classes[3, 3] = 2
    out = dilate_class(LabelMap(classes=classes), 2, 1).classes
    expected = np.zeros((7, 7), dtype=np.uint8)
    expected[2:5, 2:5] = 2
    assert np.array_equal(out, expected)


def test_dilate_never_overwrites_other_classes():
    rng = np.random.default_rng(3)
    for _ in range(20):
        classes = (rng.random((16, 16)) < 0.25).astype(np.uint8) * rng.integers(1, 5, (16, 16)).astype(np.uint8)
        lbl = LabelMap(classes=classes)
        iters = int(rng.integers(1, 4))
        got = dilate_class(lbl, 3, iters).classes
        expected = brute_force_dilate(classes, 3, iters)
        assert np.array_equal(got, expected)
        # other classes untouched
        for c in (1, 2, 4):
            assert np.array_equal(got == c, classes == c)


def test_dilate_area_monotone():
    rng = np.random.default_rng(4)
    classes = (rng.random((20, 20)) < 0.1).astype(np.uint8) * 3
    lbl = LabelMap(classes=classes)
    areas = [(dilate_class(lbl, 3, i).classes == 3).sum() for i in range(5)]
    assert all(a <= b for a, b in zip(areas, areas[1:]))


def test_dilate_unknown_class():
    lbl = LabelMap(classes=np.zeros((4, 4), dtype=np.uint8))
    with pytest.raises(ValidationError, match="class"):
        dilate_class(lbl, 9, 1)


def test_parse_dilation_schedule():
    assert parse_dilation_schedule("quadriceps=6,hamstring=2") == ((3, 6), (2, 2))
    with pytest.raises(ValidationError):
        parse_dilation_schedule("femur=1")


def test_apply_schedule_fills_margins():
    _, _, truth, muscle, _ = generate_phantom(PhantomParams(image_size=64, seed=2), 0)
    grown = apply_dilation_schedule(truth)
    assert (grown.classes == 3).sum() > (truth.classes == 3).sum()
    assert (grown.classes == 2).sum() > (truth.classes == 2).sum()
    # untouched classes unchanged
    assert np.array_equal(grown.classes == 1, truth.classes == 1)


# ---------------------------------------------------------------------------
# mask extraction


def dice_arrays(a, b):
    return 2.0 * np.logical_and(a, b).sum() / (a.sum() + b.sum())


@pytest.mark.parametrize("domain", ["ct", "mr"])
def test_extract_masks_matches_phantom_truth(domain):
    params = PhantomParams(image_size=128, noise_sigma=10.0, seed=13)
    for idx in range(3):
        mr, ct, _, muscle, bone = generate_phantom(params, idx)
        norm = normalize_ct(ct) if domain == "ct" else normalize_mr(mr)
        got_muscle, got_bone = extract_muscle_bone_masks(norm)
        assert dice_arrays(got_muscle.values, muscle.values) >= 0.95
        assert dice_arrays(got_bone.values, bone.values) >= 0.90


def test_extract_masks_disjoint():
    params = PhantomParams(image_size=96, seed=17)
    for idx in range(3):
        _, ct, _, _, _ = generate_phantom(params, idx)
        muscle, bone = extract_muscle_bone_masks(normalize_ct(ct))
        assert not np.any(muscle.values & bone.values)


def test_extract_masks_blank_image_errors():
    with pytest.raises(ValidationError, match="foreground"):
        extract_muscle_bone_masks(ct_image(np.zeros((32, 32))))


def test_binary_dilate_matches_reference():
    rng = np.random.default_rng(8)
    m = rng.random((12, 12)) < 0.3
    got = binary_dilate(m, 1)
    padded = np.pad(m, 1)
    expected = np.zeros_like(m)
    for y in range(12):
        for x in range(12):
            expected[y, x] = padded[y : y + 3, x : x + 3].any()
    assert np.array_equal(got, expected)
