"""Stage 2: self-training on entropy-ranked pseudo-labels with intra-domain
adversarial alignment.

The frozen stage-1 segmenter first infers pseudo-labels and entropy maps
for every real CT training image; items are ranked by mean entropy and the
low-entropy fraction becomes the easy cohort. Easy pseudo-labels are
optionally refined with muscle/bone masks, then the segmenter is fine-tuned
on them while a split discriminator, built from scratch, pushes hard-split
self-information maps to look like easy ones. Easy maps are the "real"
class; hard items never contribute to the cross-entropy term.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .cohort import (
    CohortSplit,
    EntropyRecord,
    entropy_map,
    mean_entropy,
    probability_map,
    rank_and_split,
    refine_pseudo_label,
    self_information_map_t,
)
from .core import (
    DatasetManifest,
    Domain,
    Image2D,
    LabelMap,
    MaskKind,
    ValidationError,
    load_image,
    load_labelmap,
    load_manifest,
    load_mask,
    save_image,
    save_labelmap,
)
from .losses import LossWeights, d_adversarial, finetune_total_loss, g_adversarial, weighted_ce
from .nets import (
    NetConfig,
    ROLE_SEGMENTER,
    build_discriminator,
    load_model,
    save_model,
)
from .train_scratch import CheckpointSet, NonFiniteLossError, scalar


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    lr: float = 2e-5
    lambda6: float = 0.001
    fraction: float = 2.0 / 3.0
    seed: int = 7
    refine: bool = True
    batch_size: int = 1
    ce_class_weights: tuple[float, ...] = LossWeights().ce_class_weights
    adversarial_mode: str = "bce"
    entropy_scope: str = "all"
    selfinfo_entropy_only: bool = False
    checkpoint_every: int = 10

    def __post_init__(self):
        if self.lambda6 < 0:
            raise ValidationError("lambda6 must be >= 0")
        if not 0.0 < self.fraction <= 1.0:
            raise ValidationError("fraction must be in (0, 1]")


@dataclass
class FinetuneStepReport:
    seg_ce_easy: float = 0.0
    g_split: float = 0.0
    d_split: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


FINETUNE_REPORT_FIELDS = [f.name for f in fields(FinetuneStepReport)]


def generate_pseudo_labels(
    seg_checkpoint,
    ct_train_manifest: DatasetManifest | str | Path,
    out_dir: str | Path,
    entropy_scope: str = "all",
) -> list[EntropyRecord]:
    """Infer pseudo-labels and entropy maps for every CT training item.

    Writes ``<item>_pl.pgm`` (argmax label) and ``<item>_ent.mimg`` (entropy
    map) under out_dir and returns one EntropyRecord per manifest row.
    """
    if not hasattr(seg_checkpoint, "forward"):
        seg_checkpoint = load_model(seg_checkpoint, expected_role=ROLE_SEGMENTER)
    seg_checkpoint.eval()
    if not isinstance(ct_train_manifest, DatasetManifest):
        ct_train_manifest = load_manifest(ct_train_manifest)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for it in ct_train_manifest.items:
        img = load_image(it.image_path)
        p = probability_map(seg_checkpoint, img)
        pl = LabelMap(classes=np.argmax(p, axis=0).astype(np.uint8))
        ent = entropy_map(p)
        pl_path = out_dir / f"{it.item_id}_pl.pgm"
        ent_path = out_dir / f"{it.item_id}_ent.mimg"
        save_labelmap(pl, pl_path)
        save_image(Image2D(values=ent.astype(np.float32), spacing=img.spacing, domain=img.domain), ent_path)
        records.append(
            EntropyRecord(
                item_id=it.item_id,
                mean_entropy=mean_entropy(p, scope=entropy_scope),
                pseudo_label_path=str(pl_path),
                entropy_map_path=str(ent_path),
            )
        )
    return records


def split_cohorts(records: list[EntropyRecord], fraction: float = 2.0 / 3.0) -> CohortSplit:
    return rank_and_split(records, fraction)


def _self_information_input(logits: torch.Tensor, entropy_only: bool) -> torch.Tensor:
    probs = torch.softmax(logits, dim=1)
    si = self_information_map_t(probs)
    if entropy_only:
        si = si.sum(dim=1, keepdim=True)
    return si


def finetune_step(
    seg: torch.nn.Module,
    d_split: torch.nn.Module,
    opt_seg: torch.optim.Optimizer,
    opt_d: torch.optim.Optimizer,
    easy_batch: tuple[torch.Tensor, torch.Tensor],
    hard_batch: torch.Tensor | None,
    cfg: FinetuneConfig,
    out_dir: Path | None = None,
    step: int = 0,
) -> FinetuneStepReport:
    """One fine-tune update: segmenter on (easy CE + weighted split-GAN),
    then the split discriminator on easy-vs-hard self-information maps."""
    report = FinetuneStepReport()
    x_easy, y_easy = easy_batch

    def abort(what):
        if out_dir is not None:
            diag = out_dir / f"diagnostic_step{step}"
            save_model(seg, diag / "seg.ckpt", step=step)
            save_model(d_split, diag / "d_split.ckpt", step=step)
        raise NonFiniteLossError(f"non-finite {what} at step {step}")

    opt_seg.zero_grad(set_to_none=True)
    logits_easy = seg(x_easy)
    ce = weighted_ce(logits_easy, y_easy, cfg.ce_class_weights)
    si_hard = None
    if hard_batch is not None:
        logits_hard = seg(hard_batch)
        si_hard = _self_information_input(logits_hard, cfg.selfinfo_entropy_only)
        g_split = g_adversarial(d_split, si_hard, cfg.adversarial_mode)
    else:
        g_split = torch.zeros(())
    total = finetune_total_loss(ce, g_split, cfg.lambda6)
    if not torch.isfinite(total):
        abort("fine-tune loss")
    total.backward()
    opt_seg.step()

    if hard_batch is not None:
        opt_d.zero_grad(set_to_none=True)
        si_easy = _self_information_input(logits_easy.detach(), cfg.selfinfo_entropy_only)
        d_loss = d_adversarial(d_split, si_easy, si_hard.detach(), cfg.adversarial_mode)
        if not torch.isfinite(d_loss):
            abort("split-discriminator loss")
        d_loss.backward()
        opt_d.step()
        report.d_split = scalar(d_loss)

    report.seg_ce_easy = scalar(ce)
    report.g_split = scalar(g_split)
    report.total = scalar(total)
    return report


def plan_finetune_epoch(n_easy: int, n_hard: int, batch_size: int, seed: int, epoch: int):
    """Easy items drive the epoch; hard batches cycle their own shuffles."""
    steps = math.ceil(n_easy / batch_size)
    rng_easy = np.random.default_rng([seed, epoch, 10])
    easy = rng_easy.permutation(n_easy)
    easy = np.concatenate([easy, easy])[: steps * batch_size].reshape(steps, batch_size)
    if n_hard == 0:
        return easy, None
    rng_hard = np.random.default_rng([seed, epoch, 11])
    chunks = []
    while sum(len(c) for c in chunks) < steps * batch_size:
        chunks.append(rng_hard.permutation(n_hard))
    hard = np.concatenate(chunks)[: steps * batch_size].reshape(steps, batch_size)
    return easy, hard


def refine_cohort_labels(
    split: CohortSplit,
    records: list[EntropyRecord],
    ct_manifest: DatasetManifest,
    out_dir: str | Path,
) -> dict[str, str]:
    """Apply muscle/bone mask refinement to every easy-cohort pseudo-label;
    returns item_id -> refined label path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.item_id: r for r in records}
    items = {it.item_id: it for it in ct_manifest.items}
    refined = {}
    for item_id in split.easy:
        it = items[item_id]
        if it.mask_path is None:
            raise ValidationError(f"refinement requested but item {item_id} has no mask")
        pl = load_labelmap(by_id[item_id].pseudo_label_path)
        muscle = load_mask(it.mask_path, MaskKind.MUSCLE)
        bone = load_mask(it.bone_mask_path(), MaskKind.BONE)
        out = refine_pseudo_label(pl, muscle, bone)
        path = out_dir / f"{item_id}_refined.pgm"
        save_labelmap(out, path)
        refined[item_id] = str(path)
    return refined


def finetune(
    cfg: FinetuneConfig,
    seg_checkpoint,
    split: CohortSplit,
    records: list[EntropyRecord],
    ct_manifest: DatasetManifest | str | Path,
    out_dir: str | Path,
    net_cfg: NetConfig | None = None,
) -> CheckpointSet:
    """Fine-tune the segmenter per the stage-2 objective; writes the tuned
    segmenter, the split discriminator and a per-epoch loss log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(ct_manifest, DatasetManifest):
        ct_manifest = load_manifest(ct_manifest)
    seg = seg_checkpoint
    if not hasattr(seg, "forward"):
        seg = load_model(seg, expected_role=ROLE_SEGMENTER)
    seg.train()

    by_id = {r.item_id: r for r in records}
    items = {it.item_id: it for it in ct_manifest.items}
    missing = [i for i in split.easy + split.hard if i not in items]
    if missing:
        raise ValidationError(f"split items missing from manifest: {missing[:5]}")

    label_paths = {i: by_id[i].pseudo_label_path for i in split.easy}
    if cfg.refine:
        label_paths = refine_cohort_labels(split, records, ct_manifest, out_dir / "refined")

    def load_tensor(item_id: str) -> torch.Tensor:
        img = load_image(items[item_id].image_path)
        return torch.from_numpy(np.array(img.values, dtype=np.float32))[None]

    easy_imgs = [load_tensor(i) for i in split.easy]
    easy_lbls = [
        torch.from_numpy(np.array(load_labelmap(label_paths[i]).classes, dtype=np.int64))
        for i in split.easy
    ]
    hard_imgs = [load_tensor(i) for i in split.hard]

    in_channels = 1 if cfg.selfinfo_entropy_only else 5
    net_cfg = net_cfg or NetConfig(seed=cfg.seed)
    d_split = build_discriminator(
        NetConfig(**{**asdict(net_cfg), "seed": net_cfg.seed + 17}), in_channels=in_channels
    )
    opt_seg = torch.optim.Adam(seg.parameters(), lr=cfg.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(d_split.parameters(), lr=cfg.lr, betas=(0.5, 0.999))

    log_path = out_dir / "finetune_log.csv"
    with open(log_path, "w", newline="") as f:
        csv.writer(f).writerow(["epoch", "lr"] + FINETUNE_REPORT_FIELDS)

    for epoch in range(cfg.epochs):
        easy_batches, hard_batches = plan_finetune_epoch(
            len(easy_imgs), len(hard_imgs), cfg.batch_size, cfg.seed, epoch
        )
        sums = dict.fromkeys(FINETUNE_REPORT_FIELDS, 0.0)
        for step, ei in enumerate(easy_batches):
            easy_batch = (
                torch.stack([easy_imgs[i] for i in ei]),
                torch.stack([easy_lbls[i] for i in ei]),
            )
            hard_batch = None
            if hard_batches is not None:
                hard_batch = torch.stack([hard_imgs[i] for i in hard_batches[step]])
            report = finetune_step(
                seg,
                d_split,
                opt_seg,
                opt_d,
                easy_batch,
                hard_batch,
                cfg,
                out_dir=out_dir,
                step=epoch * len(easy_batches) + step,
            )
            for k, v in report.as_dict().items():
                sums[k] += v
        means = {k: v / len(easy_batches) for k, v in sums.items()}
        with open(log_path, "a", newline="") as f:
            csv.writer(f).writerow(
                [epoch, f"{cfg.lr:.8f}"] + [f"{means[k]:.6f}" for k in FINETUNE_REPORT_FIELDS]
            )

    paths = {}
    seg_path = out_dir / "seg_finetuned.ckpt"
    save_model(seg, seg_path, step=cfg.epochs)
    paths["seg"] = seg_path
    d_path = out_dir / "d_split.ckpt"
    save_model(d_split, d_path, step=cfg.epochs)
    paths["d_split"] = d_path
    return CheckpointSet(paths=paths)
