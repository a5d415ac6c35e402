"""Preprocessing: intensity normalization, thigh splitting, label dilation
and muscle/bone mask extraction.

CT intensities are clipped to a Hounsfield window and mapped to [-1, 1];
MR intensities are min-max normalized to the same range. Mask extraction
replaces the level-set contouring of the source data pipeline with a
threshold/morphology procedure validated against phantom truth masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import (
    CLASS_NAMES,
    Domain,
    Image2D,
    LabelMap,
    Mask,
    MaskKind,
    N_CLASSES,
    ValidationError,
)

# Default per-class dilation schedule: (class id, iterations), applied in
# this order. Quadriceps 6 iterations, hamstring 2, others untouched.
DEFAULT_DILATION_SCHEDULE = ((3, 6), (2, 2))

DEFAULT_OUTPUT_SIZE = {Domain.CT: 256, Domain.SYN_CT: 256, Domain.MR: 300, Domain.SYN_MR: 300}

_STRUCT_3X3 = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class NormalizationSpec:
    ct_clip: tuple[float, float] = (-200.0, 500.0)
    output_range: tuple[float, float] = (-1.0, 1.0)
    mr_mode: str = "min-max"

    def __post_init__(self):
        if self.ct_clip[0] >= self.ct_clip[1]:
            raise ValidationError("ct_clip low must be < high")


# ---------------------------------------------------------------------------
# binary morphology (full 8-connected 3x3 structuring element)


def binary_dilate(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Dilate a boolean grid with the full 3x3 neighbourhood."""
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        padded = np.pad(out, 1, constant_values=False)
        acc = np.zeros_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc |= padded[1 + dy : 1 + dy + out.shape[0], 1 + dx : 1 + dx + out.shape[1]]
        out = acc
    return out


def binary_erode(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    """Erode a boolean grid with the full 3x3 neighbourhood (zero padding)."""
    out = np.asarray(mask, dtype=bool)
    for _ in range(iterations):
        padded = np.pad(out, 1, constant_values=False)
        acc = np.ones_like(out)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                acc &= padded[1 + dy : 1 + dy + out.shape[0], 1 + dx : 1 + dx + out.shape[1]]
        out = acc
    return out


def binary_close(mask: np.ndarray, iterations: int = 1) -> np.ndarray:
    return binary_erode(binary_dilate(mask, iterations), iterations)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu's threshold over a flat array of finite values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        raise ValidationError("cannot threshold a constant array")
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    w = hist.astype(np.float64)
    p = w / w.sum()
    omega = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    denom = omega * (1.0 - omega)
    denom[denom == 0] = np.nan
    sigma_b = (mu_t * omega - mu) ** 2 / denom
    k = int(np.nanargmax(sigma_b))
    return float(centers[k])


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labeled, n = ndimage.label(mask, structure=_STRUCT_3X3)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=range(1, n + 1))
    return labeled == (1 + int(np.argmax(sizes)))


# ---------------------------------------------------------------------------
# normalization


def normalize_ct(img: Image2D, spec: NormalizationSpec = NormalizationSpec()) -> Image2D:
    """Clip CT to the Hounsfield window and rescale to [-1, 1]."""
    if img.domain not in (Domain.CT, Domain.SYN_CT):
        raise ValidationError(f"normalize_ct expects a CT image, got {img.domain.name}")
    lo, hi = spec.ct_clip
    v = np.clip(img.values.astype(np.float64), lo, hi)
    out = 2.0 * (v - lo) / (hi - lo) - 1.0
    return Image2D(values=out.astype(np.float32), spacing=img.spacing, domain=img.domain)


def denormalize_ct(img: Image2D, spec: NormalizationSpec = NormalizationSpec()) -> Image2D:
    """Map a [-1, 1] CT image back to Hounsfield units (inverse of normalize_ct)."""
    lo, hi = spec.ct_clip
    v = (img.values.astype(np.float64) + 1.0) / 2.0 * (hi - lo) + lo
    return Image2D(values=v.astype(np.float32), spacing=img.spacing, domain=img.domain)


def normalize_mr(img: Image2D) -> Image2D:
    """Min-max normalize an MR image to [-1, 1]."""
    if img.domain not in (Domain.MR, Domain.SYN_MR):
        raise ValidationError(f"normalize_mr expects an MR image, got {img.domain.name}")
    v = img.values.astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi <= lo:
        raise ValidationError("cannot min-max normalize a constant image")
    out = 2.0 * (v - lo) / (hi - lo) - 1.0
    return Image2D(values=out.astype(np.float32), spacing=img.spacing, domain=img.domain)


def normalize(img: Image2D, spec: NormalizationSpec = NormalizationSpec()) -> Image2D:
    if img.domain in (Domain.CT, Domain.SYN_CT):
        return normalize_ct(img, spec)
    return normalize_mr(img)


# ---------------------------------------------------------------------------
# left/right thigh splitting


def split_left_right(
    img: Image2D, lbl: LabelMap | None = None, out_size: int | None = None
) -> tuple[tuple[Image2D, LabelMap | None], tuple[Image2D, LabelMap | None]]:
    """Split a two-thigh slice into (left, right) crops of a fixed size.

    Foreground is thresholded, cleaned up with a 3x3 closing and small
    components are dropped; exactly two components must remain. The crop
    with the smaller centroid column is returned first. Labels, when given,
    are cropped with the identical transform.
    """
    if out_size is None:
        out_size = DEFAULT_OUTPUT_SIZE[img.domain]
    fg = img.values > otsu_threshold(img.values)
    fg = binary_close(fg, 1)
    labeled, n = ndimage.label(fg, structure=_STRUCT_3X3)
    if n == 0:
        raise ValidationError("no foreground components found")
    sizes = ndimage.sum_labels(np.ones_like(labeled), labeled, index=range(1, n + 1))
    keep = [i + 1 for i, sz in enumerate(sizes) if sz >= 0.05 * sizes.max()]
    if len(keep) != 2:
        raise ValidationError(f"expected 2 thigh components after cleanup, found {len(keep)}")
    centroids = ndimage.center_of_mass(fg, labeled, index=keep)
    order = np.argsort([c[1] for c in centroids])  # by centroid column

    def crop(component_label: int):
        comp = labeled == component_label
        cy, cx = ndimage.center_of_mass(comp)
        half = out_size // 2
        y0, x0 = int(round(cy)) - half, int(round(cx)) - half
        pad_value = float(img.values.min())
        img_out = np.full((out_size, out_size), pad_value, dtype=np.float32)
        lbl_out = np.zeros((out_size, out_size), dtype=np.uint8) if lbl is not None else None
        ys = slice(max(0, y0), min(img.height, y0 + out_size))
        xs = slice(max(0, x0), min(img.width, x0 + out_size))
        oy = slice(ys.start - y0, ys.stop - y0)
        ox = slice(xs.start - x0, xs.stop - x0)
        img_out[oy, ox] = img.values[ys, xs]
        cropped_img = Image2D(values=img_out, spacing=img.spacing, domain=img.domain)
        cropped_lbl = None
        if lbl is not None:
            lbl_out[oy, ox] = lbl.classes[ys, xs]
            cropped_lbl = LabelMap(classes=lbl_out)
        return cropped_img, cropped_lbl

    left = crop(keep[order[0]])
    right = crop(keep[order[1]])
    return left, right


# ---------------------------------------------------------------------------
# ground-truth dilation


def dilate_class(lbl: LabelMap, class_id: int, iterations: int) -> LabelMap:
    """Dilate one class with the 3x3 kernel; only background pixels are claimed."""
    if not 0 < class_id < N_CLASSES:
        raise ValidationError(f"unknown muscle class id {class_id}")
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    out = lbl.classes.copy()
    region = out == class_id
    for _ in range(iterations):
        grown = binary_dilate(region, 1)
        claim = grown & (out == 0)
        out[claim] = class_id
        region = out == class_id
    return LabelMap(classes=out)


def apply_dilation_schedule(lbl: LabelMap, schedule=DEFAULT_DILATION_SCHEDULE) -> LabelMap:
    for class_id, iterations in schedule:
        lbl = dilate_class(lbl, class_id, iterations)
    return lbl


def parse_dilation_schedule(text: str):
    """Parse e.g. ``quadriceps=6,hamstring=2`` into ((3, 6), (2, 2))."""
    name_to_id = {v: k for k, v in CLASS_NAMES.items()}
    schedule = []
    for part in text.split(","):
        if not part.strip():
            continue
        name, _, n = part.partition("=")
        name = name.strip().lower()
        if name not in name_to_id or name == "background":
            raise ValidationError(f"unknown muscle class {name!r} in dilation schedule")
        schedule.append((name_to_id[name], int(n)))
    return tuple(schedule)


# ---------------------------------------------------------------------------
# muscle / bone mask extraction


def extract_muscle_bone_masks(img: Image2D) -> tuple[Mask, Mask]:
    """Extract the whole-muscle and bone masks from a normalized image.

    Steps: threshold the thigh from air (Otsu), close and fill; then split
    off bone and subcutaneous fat by intensity, thresholding midway between
    the tissue's reference intensity and the thigh median. Bone is the
    bright extreme on CT and the dark extreme on MR; fat is the opposite
    extreme. The muscle mask is the remaining largest region, hole-filled,
    minus bone; both masks are closed with the 3x3 element.
    """
    v = img.values.astype(np.float64)
    if v.max() <= v.min():
        raise ValidationError("empty foreground: constant image")
    thigh = v > otsu_threshold(v)
    thigh = binary_close(thigh, 1)
    thigh = _largest_component(thigh)
    if not thigh.any():
        raise ValidationError("empty foreground after thresholding")
    thigh = ndimage.binary_fill_holes(thigh)

    inside = v[thigh]
    med = float(np.median(inside))
    hi_ref = float(np.median(inside[inside >= np.percentile(inside, 98)]))
    lo_ref = float(np.median(inside[inside <= np.percentile(inside, 2)]))
    is_ct = img.domain in (Domain.CT, Domain.SYN_CT)
    bone_ref, fat_ref = (hi_ref, lo_ref) if is_ct else (lo_ref, hi_ref)

    t_bone = 0.5 * (bone_ref + med)
    t_fat = 0.5 * (fat_ref + med)
    bone_raw = (v >= t_bone) if is_ct else (v <= t_bone)
    fat_raw = (v <= t_fat) if is_ct else (v >= t_fat)

    # keep bone candidates away from the thigh edge, where partial-volume
    # pixels sweep through bone-like intensities
    interior = binary_erode(thigh, 2)
    bone = binary_close(bone_raw & interior, 1)
    bone = _largest_component(bone)
    bone = ndimage.binary_fill_holes(bone) & thigh

    muscle = thigh & ~fat_raw & ~bone
    # close with 2 iterations: intermuscular septa read as fat-intensity
    # lines and would otherwise cut the compartment into pieces
    muscle = binary_close(muscle, 2)
    muscle = _largest_component(muscle)
    muscle = ndimage.binary_fill_holes(muscle)
    muscle &= ~bone

    if not muscle.any():
        raise ValidationError("mask extraction produced an empty muscle mask")
    return Mask(values=muscle, kind=MaskKind.MUSCLE), Mask(values=bone, kind=MaskKind.BONE)
