"""Procedural thigh phantoms: paired MR-like and CT-like slices with truth.

Each phantom is a smooth randomized thigh cross-section: subcutaneous fat
ring, one bone, and four muscle groups laid out anatomically (quadriceps
anterior, hamstring posterior, gracilis and sartorius medial). The same
geometry is rendered twice:

  * MR-like: distinct mean intensity per muscle group, dark bone, bright fat
  * CT-like: near-identical muscle-group intensities (Hounsfield-style
    units), bright bone, dark fat

so that intensity alone separates the groups on MR but not on CT. Ground
truth labels keep a small background margin between neighbouring groups,
mimicking annotations that stop short of the group boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import (
    DatasetManifest,
    Domain,
    Image2D,
    LabelMap,
    ManifestItem,
    Mask,
    MaskKind,
    save_image,
    save_labelmap,
    save_manifest,
    save_mask,
)
from .preprocess import binary_erode

CT_SPACING = (0.97, 0.97)
MR_SPACING = (1.0, 1.0)

# Rendering means. CT values are Hounsfield-style; MR values are arbitrary
# scanner units. CT muscle groups sit within 10 HU of each other, far below
# the [-200, 500] clip width, while MR groups are separated by 80 units.
CT_MEANS = {"air": -1000.0, "fat": -100.0, "bone": 700.0, "bone_dark": -150.0}
CT_MUSCLE_MEANS = {1: 45.0, 2: 50.0, 3: 55.0, 4: 48.0}
MR_MEANS = {"air": 20.0, "fat": 950.0, "bone": 60.0}
MR_MUSCLE_MEANS = {1: 320.0, 2: 400.0, 3: 480.0, 4: 560.0}

# Muscle seed layout in (angle degrees, radius fraction, size weight).
# Angles follow image convention (y grows downward): -90 is anterior (top),
# +90 posterior (bottom), 180 medial for a right thigh.
_SEED_LAYOUT = {
    3: (-90.0, 0.42, 1.80),  # quadriceps, anterior, largest
    2: (90.0, 0.42, 1.05),  # hamstring, posterior
    1: (162.0, 0.55, 0.70),  # gracilis, medial-posterior, small
    4: (-158.0, 0.55, 0.80),  # sartorius, medial-anterior, small
}

# Anterior/posterior asymmetry: the cross-section bulges posteriorly, the
# subcutaneous fat ring is thickest anteriorly, and the bone sits clearly
# anterior of center. These are the positional cues segmentation relies on.
_POSTERIOR_BULGE = 0.06
_FAT_RING_ANTERIOR = 0.15
_FAT_RING_POSTERIOR = 0.09
_BONE_ANTERIOR_OFFSET = 0.22
_BONE_RADIUS_FRACTION = 0.15
_BLUR_SIGMA = 0.6


@dataclass(frozen=True)
class PhantomParams:
    image_size: int = 128
    n_samples: int = 200
    noise_sigma: float = 10.0
    deformation_amplitude: float = 0.08
    bone_contrast_flip: bool = True
    seed: int = 7

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError("image_size must be >= 32")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def _fourier_radius(rng: np.random.Generator, theta: np.ndarray, base: float, amplitude: float) -> np.ndarray:
    """Radius of a smooth blob: base radius with low-order Fourier wobble."""
    r = np.full_like(theta, base)
    for k in (2, 3, 4):
        a = amplitude * rng.uniform(0.4, 1.0) / k
        phase = rng.uniform(0, 2 * math.pi)
        r = r + base * a * np.cos(k * theta + phase)
    return r


def _blob_mask(shape, center, rng, base_radius, amplitude):
    yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
    dy = yy - center[0]
    dx = xx - center[1]
    theta = np.arctan2(dy, dx)
    r = np.hypot(dy, dx)
    return r <= _fourier_radius(rng, theta, base_radius, amplitude)


def generate_phantom(
    params: PhantomParams, index: int
) -> tuple[Image2D, Image2D, LabelMap, Mask, Mask]:
    """Generate one phantom: (mr, ct, truth labels, muscle mask, bone mask).

    Deterministic in (params, index); each index draws from its own RNG
    stream, so generation is order-independent and parallel-safe.
    """
    rng = np.random.default_rng([params.seed, index])
    s = params.image_size
    amp = params.deformation_amplitude

    center = np.array([s / 2.0, s / 2.0]) + rng.uniform(-0.03 * s, 0.03 * s, size=2)
    r0 = 0.40 * s * (1.0 + rng.uniform(-0.05, 0.05))
    side_sign = -1.0 if index % 2 == 0 else 1.0  # mirror medial structures by side

    yy, xx = np.mgrid[0:s, 0:s]
    dy = yy - center[0]
    dx = xx - center[1]
    theta = np.arctan2(dy, dx)
    rr = np.hypot(dy, dx)
    outer = _fourier_radius(rng, theta, r0, amp)
    outer = outer * (1.0 + _POSTERIOR_BULGE * np.sin(theta))  # wider posteriorly
    thigh = rr <= outer
    # fat ring thins from anterior to posterior
    ring = _FAT_RING_POSTERIOR + (_FAT_RING_ANTERIOR - _FAT_RING_POSTERIOR) * (1.0 - np.sin(theta)) / 2.0
    muscle_region = rr <= (1.0 - ring) * outer

    bone_center = center + np.array(
        [rng.uniform(-0.04, 0.04) * r0 - _BONE_ANTERIOR_OFFSET * r0, side_sign * rng.uniform(0.0, 0.06) * r0]
    )
    bone = _blob_mask((s, s), bone_center, rng, _BONE_RADIUS_FRACTION * r0, amp * 0.7)
    bone &= muscle_region

    compartment = muscle_region & ~bone

    # weighted nearest-seed partition of the compartment into four groups
    seeds = {}
    for cid, (ang, rad, weight) in _SEED_LAYOUT.items():
        a = math.radians(ang)
        jitter = rng.uniform(-0.05, 0.05, size=2) * r0
        sy = center[0] + rad * r0 * math.sin(a) + jitter[0]
        sx = center[1] + side_sign * rad * r0 * math.cos(a) + jitter[1]
        seeds[cid] = (sy, sx, weight)
    dist = np.full((len(_SEED_LAYOUT), s, s), np.inf)
    cids = sorted(seeds)
    for i, cid in enumerate(cids):
        sy, sx, weight = seeds[cid]
        dist[i] = np.hypot(yy - sy, xx - sx) / weight
    partition = np.asarray(cids, dtype=np.uint8)[np.argmin(dist, axis=0)]
    partition[~compartment] = 0

    # label margins: erode each group so neighbouring groups never touch
    labels = np.zeros((s, s), dtype=np.uint8)
    for cid in cids:
        m = partition == cid
        eroded = binary_erode(m, iterations=1)
        labels[eroded if eroded.any() else m] = cid

    fat = thigh & ~muscle_region
    # intermuscular septa: the unlabeled margin band between groups renders
    # as fat, like the fascial planes separating real muscle groups
    septa = compartment & (labels == 0)

    def render(means_muscle, mean_air, mean_fat, mean_bone, noise) -> np.ndarray:
        img = np.full((s, s), mean_air, dtype=np.float64)
        img[fat] = mean_fat
        for cid in cids:
            img[(partition == cid) & compartment] = means_muscle[cid]
        img[septa] = mean_fat
        img[bone] = mean_bone
        img = ndimage.gaussian_filter(img, sigma=_BLUR_SIGMA)
        if noise > 0:
            img = img + rng.normal(0.0, noise, size=img.shape)
        return img.astype(np.float32)

    ct_bone = CT_MEANS["bone"] if params.bone_contrast_flip else CT_MEANS["bone_dark"]
    ct = render(CT_MUSCLE_MEANS, CT_MEANS["air"], CT_MEANS["fat"], ct_bone, params.noise_sigma)
    mr = render(MR_MUSCLE_MEANS, MR_MEANS["air"], MR_MEANS["fat"], MR_MEANS["bone"], params.noise_sigma)

    return (
        Image2D(values=mr, spacing=MR_SPACING, domain=Domain.MR),
        Image2D(values=ct, spacing=CT_SPACING, domain=Domain.CT),
        LabelMap(classes=labels),
        Mask(values=compartment, kind=MaskKind.MUSCLE),
        Mask(values=bone, kind=MaskKind.BONE),
    )


def generate_dataset(
    params: PhantomParams, out_dir: str | Path, workers: int = 1
) -> tuple[DatasetManifest, DatasetManifest]:
    """Write n_samples phantoms and return (mr_manifest, ct_manifest).

    Each manifest has one row per phantom; MR and CT rows share subject ids
    and sides (two sides per subject, alternating L/R), so geometry is
    paired on disk but nothing forces the training sampler to pair it.
    Generation is order-independent (per-index RNG streams), so extra
    workers change nothing but wall time.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mr_items: list[ManifestItem] = []
    ct_items: list[ManifestItem] = []
    if workers > 1 and params.n_samples > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            phantoms = list(pool.map(generate_phantom, [params] * params.n_samples, range(params.n_samples)))
    else:
        phantoms = [generate_phantom(params, i) for i in range(params.n_samples)]
    for i, (mr, ct, truth, muscle, bone) in enumerate(phantoms):
        stem = f"{i:04d}"
        mr_path = out_dir / f"mr_{stem}.mimg"
        ct_path = out_dir / f"ct_{stem}.mimg"
        lbl_path = out_dir / f"lbl_{stem}.pgm"
        muscle_path = out_dir / f"mask_{stem}_muscle.pgm"
        bone_path = out_dir / f"mask_{stem}_bone.pgm"
        save_image(mr, mr_path)
        save_image(ct, ct_path)
        save_labelmap(truth, lbl_path)
        save_mask(muscle, muscle_path)
        save_mask(bone, bone_path)
        subject = f"P{i // 2:04d}"
        side = "L" if i % 2 == 0 else "R"
        mr_items.append(
            ManifestItem(image_path=str(mr_path), label_path=str(lbl_path), mask_path=str(muscle_path), subject_id=subject, side=side)
        )
        ct_items.append(
            ManifestItem(image_path=str(ct_path), label_path=str(lbl_path), mask_path=str(muscle_path), subject_id=subject, side=side)
        )
    mr_manifest = DatasetManifest(items=tuple(mr_items), cohort="train")
    ct_manifest = DatasetManifest(items=tuple(ct_items), cohort="train")
    save_manifest(mr_manifest, out_dir / "manifest_mr.csv")
    save_manifest(ct_manifest, out_dir / "manifest_ct.csv")
    return mr_manifest, ct_manifest
