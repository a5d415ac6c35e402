"""Domain types, dataset manifests, seeded RNG helpers and file I/O.

Everything downstream (phantom generation, preprocessing, training,
evaluation) shares the types in this module. All types are immutable
after construction and safe to pass across parallel workers.

File formats:
  * images: raw little-endian float32 grid with a small self-describing
    header (magic, height, width, spacing, domain tag), extension ``.mimg``
  * label maps and masks: binary 8-bit PGM (``P5``, maxval 255)
  * manifests: UTF-8 CSV with header ``image,label,mask,subject,side,cohort``
    where empty cells mean "absent". The ``mask`` column holds the muscle
    mask path; the matching bone mask lives next to it with ``_bone`` in
    place of ``_muscle`` in the file name.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

IMAGE_MAGIC = b"MYOIMG01"

N_CLASSES = 5
CLASS_NAMES = {0: "background", 1: "gracilis", 2: "hamstring", 3: "quadriceps", 4: "sartorius"}
MUSCLE_CLASSES = (1, 2, 3, 4)

# Fixed offsets used to derive per-stage seeds from the single run seed.
_STAGE_OFFSETS = {
    "phantom": 1,
    "split": 2,
    "scratch": 3,
    "finetune": 4,
    "nets": 5,
}


class Domain(Enum):
    MR = 0
    CT = 1
    SYN_CT = 2
    SYN_MR = 3


class MaskKind(Enum):
    MUSCLE = "muscle"
    BONE = "bone"


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


def stage_seed(seed: int, stage: str) -> int:
    """Derive the seed for a pipeline stage from the global run seed."""
    if stage not in _STAGE_OFFSETS:
        raise ValueError(f"unknown stage {stage!r}")
    return (int(seed) + 10_000 * _STAGE_OFFSETS[stage]) % (2**31 - 1)


@dataclass(frozen=True)
class Image2D:
    """Single-channel 2D scalar field with pixel spacing and a domain tag."""

    values: np.ndarray
    spacing: tuple[float, float]
    domain: Domain

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 2 or v.shape[0] <= 0 or v.shape[1] <= 0:
            raise ValidationError(f"image must be a non-empty 2D grid, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("image contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class LabelMap:
    """Integer class field; classes 0..4 (background + four muscle groups)."""

    classes: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.classes)
        if c.ndim != 2 or c.size == 0:
            raise ValidationError(f"label map must be a non-empty 2D grid, got shape {c.shape}")
        c = c.astype(np.uint8, casting="unsafe")
        bad = np.unique(c[c >= N_CLASSES])
        if bad.size:
            raise ValidationError(f"label map contains out-of-range class ids {bad.tolist()}")
        c.setflags(write=False)
        object.__setattr__(self, "classes", c)

    @property
    def height(self) -> int:
        return self.classes.shape[0]

    @property
    def width(self) -> int:
        return self.classes.shape[1]


@dataclass(frozen=True)
class Mask:
    """Binary field over the same grid as its paired image."""

    values: np.ndarray
    kind: MaskKind

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.size == 0:
            raise ValidationError(f"mask must be a non-empty 2D grid, got shape {v.shape}")
        if v.dtype != bool:
            uniq = np.unique(v)
            if not np.all(np.isin(uniq, (0, 1))):
                raise ValidationError("mask values must be binary")
            v = v.astype(bool)
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class ManifestItem:
    image_path: str
    subject_id: str
    side: str  # "L" or "R"
    label_path: str | None = None
    mask_path: str | None = None

    def __post_init__(self):
        if self.side not in ("L", "R"):
            raise ValidationError(f"side must be L or R, got {self.side!r}")

    @property
    def item_id(self) -> str:
        return Path(self.image_path).stem

    def bone_mask_path(self) -> str | None:
        if self.mask_path is None:
            return None
        p = Path(self.mask_path)
        return str(p.with_name(p.name.replace("_muscle", "_bone")))


@dataclass(frozen=True)
class DatasetManifest:
    items: tuple[ManifestItem, ...]
    cohort: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def __len__(self) -> int:
        return len(self.items)

    def subjects(self) -> list[str]:
        seen = dict.fromkeys(it.subject_id for it in self.items)
        return list(seen)


@dataclass
class ValidationReport:
    """Accumulated problems found by validate_pair; empty report means valid."""

    entries: list[str] = field(default_factory=list)

    def add(self, msg: str):
        self.entries.append(msg)

    @property
    def ok(self) -> bool:
        return not self.entries


# ---------------------------------------------------------------------------
# image / label / mask file I/O


def save_image(img: Image2D, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.values.shape
    header = IMAGE_MAGIC + struct.pack(
        "<IIffB", h, w, float(img.spacing[0]), float(img.spacing[1]), img.domain.value
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(img.values, dtype="<f4").tobytes())


def load_image(path: str | Path, expected_domain: Domain | None = None) -> Image2D:
    """Load an image file; values are read back exactly as written."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"image file not found: {path}")
    raw = path.read_bytes()
    head_len = len(IMAGE_MAGIC) + struct.calcsize("<IIffB")
    if len(raw) < head_len or raw[: len(IMAGE_MAGIC)] != IMAGE_MAGIC:
        raise ValidationError(f"not a myoda image file: {path}")
    h, w, sy, sx, tag = struct.unpack("<IIffB", raw[len(IMAGE_MAGIC) : head_len])
    expected_bytes = head_len + 4 * h * w
    if len(raw) != expected_bytes:
        raise ValidationError(f"truncated image file {path}: expected {expected_bytes} bytes, got {len(raw)}")
    values = np.frombuffer(raw[head_len:], dtype="<f4").reshape(h, w)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"image {path} contains non-finite values")
    domain = Domain(tag)
    if expected_domain is not None and domain != expected_domain:
        raise ValidationError(f"image {path} has domain {domain.name}, expected {expected_domain.name}")
    return Image2D(values=values, spacing=(sy, sx), domain=domain)


def _save_pgm(values: np.ndarray, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    v = np.ascontiguousarray(values, dtype=np.uint8)
    h, w = v.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(v.tobytes())


def _load_pgm(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    raw = path.read_bytes()
    if not raw.startswith(b"P5"):
        raise ValidationError(f"not a binary PGM file: {path}")
    # header: magic, width, height, maxval, single whitespace, then payload
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValidationError(f"unsupported PGM maxval {maxval} in {path}")
    if len(raw) - pos != w * h:
        raise ValidationError(f"truncated PGM file: {path}")
    return np.frombuffer(raw[pos:], dtype=np.uint8).reshape(h, w)


def save_labelmap(lbl: LabelMap, path: str | Path):
    _save_pgm(lbl.classes, path)


def load_labelmap(path: str | Path) -> LabelMap:
    return LabelMap(classes=_load_pgm(path))


def save_mask(mask: Mask, path: str | Path):
    _save_pgm(mask.values.astype(np.uint8), path)


def load_mask(path: str | Path, kind: MaskKind) -> Mask:
    v = _load_pgm(path)
    return Mask(values=v > 0, kind=kind)


# ---------------------------------------------------------------------------
# validation


def validate_pair(img: Image2D, lbl: LabelMap | np.ndarray) -> ValidationReport:
    """Check an image/label pair; lists shape and class-range problems.

    Accepts a raw integer grid in place of a LabelMap so that files which
    would not even construct (out-of-range ids) can still be reported on.
    """
    classes = lbl.classes if isinstance(lbl, LabelMap) else np.asarray(lbl)
    report = ValidationReport()
    if img.values.shape != classes.shape:
        report.add(f"shape mismatch: image {img.values.shape} vs label {classes.shape}")
    vals, counts = np.unique(classes, return_counts=True)
    for v, n in zip(vals.tolist(), counts.tolist()):
        if not 0 <= v < N_CLASSES:
            report.add(f"class id {v} out of range ({n} pixels)")
    return report


# ---------------------------------------------------------------------------
# manifests

MANIFEST_HEADER = ["image", "label", "mask", "subject", "side", "cohort"]


def save_manifest(manifest: DatasetManifest, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for it in manifest.items:
            writer.writerow(
                [it.image_path, it.label_path or "", it.mask_path or "", it.subject_id, it.side, manifest.cohort]
            )


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest not found: {path}")
    items: list[ManifestItem] = []
    cohort = "train"
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != MANIFEST_HEADER:
            raise ValidationError(f"manifest {path} must have header {','.join(MANIFEST_HEADER)}")
        for row in reader:
            items.append(
                ManifestItem(
                    image_path=row["image"],
                    label_path=row["label"] or None,
                    mask_path=row["mask"] or None,
                    subject_id=row["subject"],
                    side=row["side"],
                )
            )
            cohort = row["cohort"] or cohort
    return DatasetManifest(items=tuple(items), cohort=cohort)


def split_dataset_by_subject(
    manifest: DatasetManifest, fractions: tuple[float, float, float], seed: int
) -> tuple[DatasetManifest, DatasetManifest, DatasetManifest]:
    """Partition a manifest into train/val/test with no subject crossing cohorts.

    Subjects are shuffled with the given seed and assigned to cohorts by
    cumulative fraction of the subject count; every image of a subject
    follows it. Deterministic for a fixed seed.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValidationError(f"fractions must sum to 1, got {fractions}")
    if any(f < 0 for f in fractions):
        raise ValidationError("fractions must be non-negative")
    subjects = manifest.subjects()
    n_nonzero = sum(1 for f in fractions if f > 0)
    if len(subjects) < n_nonzero:
        raise ValidationError(f"{len(subjects)} subjects cannot fill {n_nonzero} non-empty cohorts")
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n = len(order)
    n_train = round(fractions[0] * n)
    n_val = round(fractions[1] * n)
    if fractions[0] > 0:
        n_train = max(1, n_train)
    if fractions[1] > 0:
        n_val = max(1, n_val)
    n_train = min(n_train, n - (1 if fractions[1] > 0 else 0) - (1 if fractions[2] > 0 else 0))
    n_val = min(n_val, n - n_train - (1 if fractions[2] > 0 else 0))
    groups = {
        "train": set(order[:n_train]),
        "val": set(order[n_train : n_train + n_val]),
        "test": set(order[n_train + n_val :]),
    }
    if fractions[2] == 0:
        groups["train"] |= groups.pop("test")
        groups["test"] = set()
    out = []
    for name in ("train", "val", "test"):
        chosen = tuple(it for it in manifest.items if it.subject_id in groups[name])
        out.append(DatasetManifest(items=chosen, cohort=name))
    return out[0], out[1], out[2]
