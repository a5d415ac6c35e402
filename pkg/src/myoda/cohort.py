"""Stage-2 preparation: probability and entropy maps, entropy ranking into
easy/hard cohorts, and anatomical refinement of pseudo-labels.

Entropy is Shannon entropy in bits (base 2) of the per-pixel class
distribution; low-entropy items are treated as reliable ("easy"). The
split discriminator consumes the per-class weighted self-information map
-p * log2(p), whose channel sum is the entropy map.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import Image2D, LabelMap, Mask, N_CLASSES, ValidationError

MAX_ENTROPY_BITS = math.log2(N_CLASSES)

_LOG2_CLAMP = 1e-12


@dataclass(frozen=True)
class EntropyRecord:
    item_id: str
    mean_entropy: float
    pseudo_label_path: str = ""
    entropy_map_path: str = ""

    def __post_init__(self):
        if not -1e-9 <= self.mean_entropy <= MAX_ENTROPY_BITS + 1e-9:
            raise ValidationError(
                f"mean entropy {self.mean_entropy} outside [0, log2 {N_CLASSES}] for {self.item_id}"
            )


@dataclass(frozen=True)
class CohortSplit:
    easy: tuple[str, ...]
    hard: tuple[str, ...]
    fraction: float = 2.0 / 3.0

    def __post_init__(self):
        if set(self.easy) & set(self.hard):
            raise ValidationError("easy and hard cohorts overlap")


def probability_map(segmenter, img: Image2D) -> np.ndarray:
    """Per-pixel class distribution softmax(Seg(x)), shape (5, H, W)."""
    with torch.no_grad():
        x = torch.from_numpy(np.array(img.values, dtype=np.float32))[None, None]
        logits = segmenter(x)
        probs = torch.softmax(logits, dim=1)[0]
    return probs.numpy().astype(np.float64)


def predict_labelmap(segmenter, img: Image2D) -> LabelMap:
    """Discrete prediction argmax(softmax(Seg(x)))."""
    p = probability_map(segmenter, img)
    return LabelMap(classes=np.argmax(p, axis=0).astype(np.uint8))


def entropy_map(p: np.ndarray) -> np.ndarray:
    """Per-pixel entropy in bits, with 0 * log 0 taken as 0."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return terms.sum(axis=0)


def self_information_map(p: np.ndarray) -> np.ndarray:
    """Channelwise weighted self-information -p_i * log2(p_i), shape (5, H, W)."""
    p = np.asarray(p, dtype=np.float64)
    return np.where(p > 0, -p * np.log2(np.where(p > 0, p, 1.0)), 0.0)


def self_information_map_t(probs: torch.Tensor) -> torch.Tensor:
    """Differentiable self-information map for a (B, 5, H, W) batch."""
    return -probs * torch.log2(probs.clamp_min(_LOG2_CLAMP))


def mean_entropy(p: np.ndarray, scope: str = "all") -> float:
    """Mean of the entropy map, over all pixels or predicted foreground only."""
    ent = entropy_map(p)
    if scope == "all":
        return float(ent.mean())
    if scope == "foreground":
        fg = np.argmax(p, axis=0) > 0
        return float(ent[fg].mean()) if fg.any() else 0.0
    raise ValidationError(f"unknown entropy scope {scope!r}")


def rank_and_split(records: list[EntropyRecord], fraction: float = 2.0 / 3.0) -> CohortSplit:
    """Rank records by ascending mean entropy; the first floor(fraction * N)
    are the easy cohort. Ties break lexicographically on item id."""
    if not records:
        raise ValidationError("cannot split an empty record list")
    if not 0.0 < fraction <= 1.0:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    ranked = sorted(records, key=lambda r: (r.mean_entropy, r.item_id))
    n_easy = math.floor(fraction * len(ranked))
    easy = tuple(r.item_id for r in ranked[:n_easy])
    hard = tuple(r.item_id for r in ranked[n_easy:])
    return CohortSplit(easy=easy, hard=hard, fraction=fraction)


def refine_pseudo_label(pl: LabelMap, muscle: Mask, bone: Mask) -> LabelMap:
    """Erase predicted muscle outside the muscle mask or on the bone."""
    if pl.classes.shape != muscle.values.shape or pl.classes.shape != bone.values.shape:
        raise ValidationError("pseudo-label and mask shapes disagree")
    out = pl.classes.copy()
    predicted = out > 0
    out[predicted & ~muscle.values] = 0
    out[predicted & bone.values] = 0
    return LabelMap(classes=out)


# ---------------------------------------------------------------------------
# split file I/O (item_id, mean_entropy, cohort)


def save_split(split: CohortSplit, records: list[EntropyRecord], path: str | Path):
    by_id = {r.item_id: r for r in records}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["item_id", "mean_entropy", "cohort"])
        for item in split.easy:
            writer.writerow([item, f"{by_id[item].mean_entropy:.9f}", "easy"])
        for item in split.hard:
            writer.writerow([item, f"{by_id[item].mean_entropy:.9f}", "hard"])


def load_split(path: str | Path) -> tuple[CohortSplit, list[EntropyRecord]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"split file not found: {path}")
    easy, hard, records = [], [], []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            rec = EntropyRecord(item_id=row["item_id"], mean_entropy=float(row["mean_entropy"]))
            records.append(rec)
            (easy if row["cohort"] == "easy" else hard).append(rec.item_id)
    n = len(records)
    fraction = len(easy) / n if n else 0.0
    return CohortSplit(easy=tuple(easy), hard=tuple(hard), fraction=fraction), records
