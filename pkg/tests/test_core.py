import struct

import numpy as np
import pytest

from myoda.core import (
    IMAGE_MAGIC,
    DatasetManifest,
    Domain,
    Image2D,
    LabelMap,
    ManifestItem,
    Mask,
    MaskKind,
    ValidationError,
    load_image,
    load_labelmap,
    load_manifest,
    load_mask,
    save_image,
    save_labelmap,
    save_manifest,
    save_mask,
    split_dataset_by_subject,
    stage_seed,
    validate_pair,
)
from myoda.phantom import PhantomParams, generate_phantom


def make_manifest(n_subjects, images_per_subject=2):
    items = []
    for s in range(n_subjects):
        for k in range(images_per_subject):
            items.append(
                ManifestItem(
                    image_path=f"img_{s}_{k}.mimg",
                    subject_id=f"P{s:03d}",
                    side="L" if k % 2 == 0 else "R",
                )
            )
    return DatasetManifest(items=tuple(items))


def test_image_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    img = Image2D(values=rng.normal(size=(17, 23)).astype(np.float32), spacing=(0.97, 0.97), domain=Domain.CT)
    path = tmp_path / "x.mimg"
    save_image(img, path)
    back = load_image(path)
    assert back.values.tobytes() == img.values.tobytes()
    assert back.spacing == pytest.approx(img.spacing)
    assert back.domain == Domain.CT


def test_ct_phantom_file_has_table_spacing(tmp_path):
    _, ct, _, _, _ = generate_phantom(PhantomParams(image_size=256, seed=1), 0)
    path = tmp_path / "ct.mimg"
    save_image(ct, path)
    back = load_image(path, expected_domain=Domain.CT)
    assert back.values.shape == (256, 256)
    assert back.spacing == pytest.approx((0.97, 0.97))


def test_load_rejects_nan_pixels(tmp_path):
    values = np.zeros((4, 4), dtype="<f4")
    values[1, 2] = np.nan
    header = IMAGE_MAGIC + struct.pack("<IIffB", 4, 4, 1.0, 1.0, Domain.MR.value)
    path = tmp_path / "bad.mimg"
    path.write_bytes(header + values.tobytes())
    with pytest.raises(ValidationError, match="non-finite"):
        load_image(path)


def test_load_rejects_missing_and_truncated(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_image(tmp_path / "nope.mimg")
    img = Image2D(values=np.zeros((4, 4), dtype=np.float32), spacing=(1, 1), domain=Domain.MR)
    path = tmp_path / "t.mimg"
    save_image(img, path)
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValidationError, match="truncated"):
        load_image(path)


def test_load_checks_expected_domain(tmp_path):
    img = Image2D(values=np.zeros((4, 4), dtype=np.float32), spacing=(1, 1), domain=Domain.MR)
    save_image(img, tmp_path / "m.mimg")
    with pytest.raises(ValidationError, match="domain"):
        load_image(tmp_path / "m.mimg", expected_domain=Domain.CT)


def test_labelmap_and_mask_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    lbl = LabelMap(classes=rng.integers(0, 5, size=(12, 9)).astype(np.uint8))
    save_labelmap(lbl, tmp_path / "l.pgm")
    assert np.array_equal(load_labelmap(tmp_path / "l.pgm").classes, lbl.classes)

    mask = Mask(values=rng.random((12, 9)) > 0.5, kind=MaskKind.MUSCLE)
    save_mask(mask, tmp_path / "m.pgm")
    assert np.array_equal(load_mask(tmp_path / "m.pgm", MaskKind.MUSCLE).values, mask.values)


def test_labelmap_rejects_out_of_range():
    grid = np.zeros((4, 4), dtype=np.uint8)
    grid[0, 0] = 7
    with pytest.raises(ValidationError, match="out-of-range"):
        LabelMap(classes=grid)


def test_validate_pair_clean():
    img = Image2D(values=np.zeros((6, 6), dtype=np.float32), spacing=(1, 1), domain=Domain.CT)
    lbl = LabelMap(classes=np.zeros((6, 6), dtype=np.uint8))
    assert validate_pair(img, lbl).ok


def test_validate_pair_shape_mismatch():
    img = Image2D(values=np.zeros((6, 6), dtype=np.float32), spacing=(1, 1), domain=Domain.CT)
    lbl = LabelMap(classes=np.zeros((5, 6), dtype=np.uint8))
    report = validate_pair(img, lbl)
    assert not report.ok
    assert any("shape mismatch" in e for e in report.entries)


def test_validate_pair_reports_bad_class_with_count():
    img = Image2D(values=np.zeros((4, 4), dtype=np.float32), spacing=(1, 1), domain=Domain.CT)
    raw = np.zeros((4, 4), dtype=np.uint8)
    raw[0, :3] = 7
    report = validate_pair(img, raw)
    assert any("class id 7" in e and "3 pixels" in e for e in report.entries)


def test_manifest_round_trip(tmp_path):
    manifest = DatasetManifest(
        items=(
            ManifestItem(image_path="a.mimg", label_path="a.pgm", mask_path=None, subject_id="P1", side="L"),
            ManifestItem(image_path="b.mimg", label_path=None, mask_path="b_muscle.pgm", subject_id="P1", side="R"),
        ),
        cohort="val",
    )
    save_manifest(manifest, tmp_path / "m.csv")
    back = load_manifest(tmp_path / "m.csv")
    assert back.cohort == "val"
    assert back.items[0].label_path == "a.pgm"
    assert back.items[0].mask_path is None
    assert back.items[1].label_path is None
    assert back.items[1].bone_mask_path() == "b_bone.pgm"


def test_split_is_deterministic():
    manifest = make_manifest(10)
    a = split_dataset_by_subject(manifest, (0.8, 0.1, 0.1), seed=7)
    b = split_dataset_by_subject(manifest, (0.8, 0.1, 0.1), seed=7)
    for ma, mb in zip(a, b):
        assert [i.image_path for i in ma.items] == [i.image_path for i in mb.items]


def test_split_keeps_sides_together():
    manifest = make_manifest(8, images_per_subject=2)
    train, val, test = split_dataset_by_subject(manifest, (0.5, 0.25, 0.25), seed=3)
    for cohort in (train, val, test):
        for subject in cohort.subjects():
            n = sum(1 for it in cohort.items if it.subject_id == subject)
            assert n == 2  # both L and R landed here


def test_split_all_train():
    manifest = make_manifest(5)
    train, val, test = split_dataset_by_subject(manifest, (1.0, 0.0, 0.0), seed=1)
    assert len(train) == len(manifest)
    assert len(val) == 0 and len(test) == 0


def test_split_rejects_bad_fractions():
    with pytest.raises(ValidationError, match="sum to 1"):
        split_dataset_by_subject(make_manifest(5), (0.5, 0.2, 0.2), seed=0)


def test_split_rejects_too_few_subjects():
    with pytest.raises(ValidationError, match="subjects"):
        split_dataset_by_subject(make_manifest(2), (0.4, 0.3, 0.3), seed=0)


def test_subject_disjointness_property():
    rng = np.random.default_rng(11)
    for trial in range(50):
        n = int(rng.integers(3, 30))
        manifest = make_manifest(n, images_per_subject=int(rng.integers(1, 4)))
        fracs = rng.dirichlet((2, 1, 1))
        train, val, test = split_dataset_by_subject(manifest, tuple(fracs), seed=int(rng.integers(0, 1000)))
        s_train, s_val, s_test = set(train.subjects()), set(val.subjects()), set(test.subjects())
        assert not (s_train & s_val) and not (s_train & s_test) and not (s_val & s_test)
        assert len(train) + len(val) + len(test) == len(manifest)


def test_stage_seed_fixed_offsets():
    assert stage_seed(7, "phantom") != stage_seed(7, "scratch")
    assert stage_seed(7, "phantom") == stage_seed(7, "phantom")
    with pytest.raises(ValueError):
        stage_seed(7, "unknown-stage")
