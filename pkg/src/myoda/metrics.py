"""Evaluation: per-class Dice, positive predictive value, erosion
sensitivity curves and summary tables.

Empty-mask conventions: Dice of two empty masks is 1.0; PPV of an empty
prediction is 1.0 and flagged as vacuous, so correctly-empty predictions
are not punished but remain visible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cohort import predict_labelmap, refine_pseudo_label
from .core import (
    CLASS_NAMES,
    DatasetManifest,
    LabelMap,
    MUSCLE_CLASSES,
    Mask,
    MaskKind,
    ValidationError,
    load_image,
    load_labelmap,
    load_manifest,
    load_mask,
)
from .nets import ROLE_SEGMENTER, load_model
from .preprocess import binary_erode

CLASS_COLUMNS = [CLASS_NAMES[c] for c in MUSCLE_CLASSES]


def _as_bool(mask) -> np.ndarray:
    v = getattr(mask, "values", mask)
    return np.asarray(v, dtype=bool)


def dice(s, g) -> float:
    """Overlap 2|S∩G| / (|S| + |G|); two empty masks count as perfect."""
    s = _as_bool(s)
    g = _as_bool(g)
    if s.shape != g.shape:
        raise ValidationError(f"shape mismatch: {s.shape} vs {g.shape}")
    denom = int(s.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(s, g).sum()) / denom


def ppv(s, g, return_flag: bool = False):
    """Precision |S∩G| / |S|; an empty prediction scores 1.0, flagged vacuous."""
    s = _as_bool(s)
    g = _as_bool(g)
    if s.shape != g.shape:
        raise ValidationError(f"shape mismatch: {s.shape} vs {g.shape}")
    n_s = int(s.sum())
    if n_s == 0:
        return (1.0, True) if return_flag else 1.0
    value = int(np.logical_and(s, g).sum()) / n_s
    return (value, False) if return_flag else value


@dataclass
class SensitivityResult:
    """Per-class erosion curves: list of (area_ratio, ppv) per step."""

    curves: dict[int, list[tuple[float, float]]] = field(default_factory=dict)
    skipped: list[int] = field(default_factory=list)


def erosion_sensitivity(s: LabelMap, g: LabelMap) -> SensitivityResult:
    """Erode each predicted muscle group with the 3x3 kernel until empty,
    recording (|eroded| / |G_class|, PPV(eroded, G_class)) at step 0 and
    after every erosion while the eroded mask is non-empty."""
    if s.classes.shape != g.classes.shape:
        raise ValidationError("prediction and truth shapes disagree")
    result = SensitivityResult()
    for cid in MUSCLE_CLASSES:
        g_mask = g.classes == cid
        if not g_mask.any():
            result.skipped.append(cid)
            continue
        pred = s.classes == cid
        g_area = int(g_mask.sum())
        curve = []
        while pred.any():
            curve.append((int(pred.sum()) / g_area, ppv(pred, g_mask)))
            pred = binary_erode(pred, 1)
        result.curves[cid] = curve
    return result


@dataclass
class ItemEval:
    item_id: str
    dice_per_class: dict[int, float]
    outside_mask_fraction: float | None = None

    @property
    def mean_dice(self) -> float:
        return float(np.mean([self.dice_per_class[c] for c in MUSCLE_CLASSES]))


@dataclass
class EvalResult:
    items: list[ItemEval]
    summary: dict[str, tuple[float, float]]  # row name -> (mean, std)

    def format_table(self) -> str:
        lines = [f"{'group':<12} {'mean dice':>10} {'std':>8}"]
        for name in CLASS_COLUMNS + ["average"]:
            m, s = self.summary[name]
            lines.append(f"{name:<12} {m:>10.4f} {s:>8.4f}")
        return "\n".join(lines)


def labelmap_dice(pred: LabelMap, truth: LabelMap) -> dict[int, float]:
    return {cid: dice(pred.classes == cid, truth.classes == cid) for cid in MUSCLE_CLASSES}


def summarize(items: list[ItemEval]) -> dict[str, tuple[float, float]]:
    """Per-class and 4-class-average mean/std; the average mean is the
    arithmetic mean of the four per-class means."""
    summary = {}
    class_means = []
    for cid, name in zip(MUSCLE_CLASSES, CLASS_COLUMNS):
        vals = np.array([it.dice_per_class[cid] for it in items])
        summary[name] = (float(vals.mean()), float(vals.std()))
        class_means.append(float(vals.mean()))
    item_means = np.array([it.mean_dice for it in items])
    summary["average"] = (float(np.mean(class_means)), float(item_means.std()))
    return summary


def evaluate(
    seg_checkpoint,
    test_manifest: DatasetManifest | str | Path,
    out_csv: str | Path | None = None,
    apply_mask: bool = False,
) -> EvalResult:
    """Run the segmenter over a labeled manifest and tabulate per-class Dice.

    ``seg_checkpoint`` is a checkpoint path or an already-built segmenter.
    With ``apply_mask`` the item's muscle mask is applied to the prediction
    before scoring (predictions outside it become background). The per-item
    CSV is sorted by item id, so results do not depend on manifest order.
    """
    if not hasattr(seg_checkpoint, "forward"):
        seg_checkpoint = load_model(seg_checkpoint, expected_role=ROLE_SEGMENTER)
    seg_checkpoint.eval()
    if not isinstance(test_manifest, DatasetManifest):
        test_manifest = load_manifest(test_manifest)

    items: list[ItemEval] = []
    for it in sorted(test_manifest.items, key=lambda i: i.item_id):
        if it.label_path is None:
            raise ValidationError(f"manifest item {it.item_id} has no label for evaluation")
        img = load_image(it.image_path)
        truth = load_labelmap(it.label_path)
        pred = predict_labelmap(seg_checkpoint, img)
        outside = None
        if it.mask_path is not None:
            muscle = load_mask(it.mask_path, MaskKind.MUSCLE)
            n_pred = int((pred.classes > 0).sum())
            n_out = int(((pred.classes > 0) & ~muscle.values).sum())
            if apply_mask:
                bone = Mask(values=np.zeros_like(muscle.values), kind=MaskKind.BONE)
                pred = refine_pseudo_label(pred, muscle, bone)
                n_pred = int((pred.classes > 0).sum())
                n_out = int(((pred.classes > 0) & ~muscle.values).sum())
            outside = n_out / n_pred if n_pred else 0.0
        elif apply_mask:
            raise ValidationError(f"apply_mask requested but item {it.item_id} has no mask")
        items.append(ItemEval(item_id=it.item_id, dice_per_class=labelmap_dice(pred, truth), outside_mask_fraction=outside))

    result = EvalResult(items=items, summary=summarize(items))
    if out_csv is not None:
        write_eval_csv(result, out_csv)
    return result


def write_eval_csv(result: EvalResult, path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["item"] + CLASS_COLUMNS + ["mean", "outside_mask_fraction"])
        for it in result.items:
            row = [it.item_id]
            row += [f"{it.dice_per_class[c]:.6f}" for c in MUSCLE_CLASSES]
            row.append(f"{it.mean_dice:.6f}")
            row.append("" if it.outside_mask_fraction is None else f"{it.outside_mask_fraction:.6f}")
            writer.writerow(row)
        for name in CLASS_COLUMNS + ["average"]:
            m, s = result.summary[name]
            writer.writerow([f"summary_{name}", f"{m:.6f}", f"{s:.6f}", "", "", "", ""])


def write_sensitivity_csv(per_item: dict[str, SensitivityResult], path: str | Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["item", "class", "step", "area_ratio", "ppv"])
        for item_id in sorted(per_item):
            res = per_item[item_id]
            for cid in sorted(res.curves):
                for step, (ratio, val) in enumerate(res.curves[cid]):
                    writer.writerow([item_id, CLASS_NAMES[cid], step, f"{ratio:.6f}", f"{val:.6f}"])


def write_sensitivity_svg(per_item: dict[str, SensitivityResult], path: str | Path):
    """Emit mean PPV-vs-area-ratio polylines as a standalone SVG plot."""
    # average curves per class across items, on a common step axis
    width, height, margin = 640, 480, 56
    colors = {1: "#d62728", 2: "#1f77b4", 3: "#2ca02c", 4: "#9467bd"}
    elements = [
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.0f}" y="{height - 12}" text-anchor="middle" font-size="14">area ratio</text>',
        f'<text x="16" y="{height / 2:.0f}" font-size="14" transform="rotate(-90 16 {height / 2:.0f})" text-anchor="middle">PPV</text>',
    ]

    def to_xy(ratio, val, max_ratio):
        x = margin + (ratio / max_ratio) * (width - 2 * margin)
        y = height - margin - val * (height - 2 * margin)
        return f"{x:.1f},{y:.1f}"

    for ci, cid in enumerate(MUSCLE_CLASSES):
        pts = []
        for res in per_item.values():
            pts.extend(res.curves.get(cid, []))
        if not pts:
            continue
        pts.sort(key=lambda p: -p[0])
        max_ratio = max(1.0, max(r for r, _ in pts))
        poly = " ".join(to_xy(r, v, max_ratio) for r, v in pts)
        elements.append(f'<polyline points="{poly}" fill="none" stroke="{colors[cid]}" stroke-width="1.5"/>')
        elements.append(
            f'<text x="{width - margin - 120}" y="{margin + 18 * ci + 4}" font-size="12" fill="{colors[cid]}">{CLASS_NAMES[cid]}</text>'
        )
    svg = (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
        + "".join(elements)
        + "</svg>"
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
