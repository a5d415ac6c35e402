"""Stage 1: co-train the two translation generators, their discriminators
and the segmenter on unpaired MR/CT batches.

Each step runs three alternating updates: (1) generators on the weighted
adversarial + cycle + identity + edge objective (plus segmentation when
gradient coupling is enabled), (2) discriminators against a pool of
historical fakes, (3) the segmenter on synthesized CT with the MR ground
truth. MR and CT items are sampled by independent per-epoch shuffles, so
the pairing of phantom geometry on disk is never exploited.

Determinism: every stochastic choice derives from (seed, epoch), so a run
resumed from an epoch-boundary checkpoint continues bit-identically.
"""

from __future__ import annotations

import csv
import itertools
import math
import random
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .cohort import predict_labelmap
from .core import DatasetManifest, MUSCLE_CLASSES, ValidationError, load_image, load_labelmap, load_manifest
from .losses import (
    LossWeights,
    ScratchLossParts,
    d_adversarial,
    g_adversarial,
    scratch_total_loss,
    sobel_magnitude_t,
    weighted_ce,
)
from .metrics import labelmap_dice
from .nets import NetConfig, build_discriminator, build_generator, build_segmenter, load_model, save_model


class NonFiniteLossError(RuntimeError):
    """A loss went NaN/Inf; a diagnostic checkpoint has been written."""


def scalar(value) -> float:
    """Plain float from a loss value, detaching when it carries a graph."""
    if isinstance(value, torch.Tensor):
        return float(value.detach())
    return float(value)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr0: float = 2e-4
    lr_const_epochs: int = 50
    batch_size: int = 1
    image_size: int = 128
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 7
    checkpoint_every: int = 10
    image_pool_size: int = 50
    coupled: bool = False
    adversarial_mode: str = "bce"
    sobel_paper_verbatim: bool = False
    seg_lr_scale: float = 1.0  # segmenter lr multiplier on the shared schedule

    def __post_init__(self):
        if self.lr_const_epochs > self.epochs:
            raise ValidationError("lr_const_epochs must be <= epochs")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.seg_lr_scale <= 0:
            raise ValidationError("seg_lr_scale must be > 0")


@dataclass
class StepReport:
    d_ct: float = 0.0
    d_mr: float = 0.0
    g_adv_ct: float = 0.0
    g_adv_mr: float = 0.0
    cyc_ct: float = 0.0
    cyc_mr: float = 0.0
    identity: float = 0.0
    edge: float = 0.0
    seg_ce: float = 0.0
    total_g: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


REPORT_FIELDS = [f.name for f in fields(StepReport)]


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Constant lr0 before lr_const_epochs, then linear decay to 0 at epochs."""
    if not 0 <= epoch <= cfg.epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.lr_const_epochs or cfg.epochs == cfg.lr_const_epochs:
        return cfg.lr0
    return cfg.lr0 * (cfg.epochs - epoch) / (cfg.epochs - cfg.lr_const_epochs)


class ImagePool:
    """Pool of historical fakes; discriminators see a 50/50 mix of current
    and past generator output, which damps adversarial oscillation."""

    def __init__(self, size: int):
        self.size = size
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor, rng: random.Random) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            img = img[None]
            if len(self.images) < self.size:
                self.images.append(img)
                out.append(img)
            elif rng.random() < 0.5:
                i = rng.randrange(self.size)
                out.append(self.images[i])
                self.images[i] = img
            else:
                out.append(img)
        return torch.cat(out, dim=0)


@dataclass
class ScratchModels:
    g_mr2ct: torch.nn.Module
    g_ct2mr: torch.nn.Module
    d_ct: torch.nn.Module
    d_mr: torch.nn.Module
    seg: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    opt_seg: torch.optim.Optimizer
    pool_ct: ImagePool
    pool_mr: ImagePool
    pool_rng: random.Random
    out_dir: Path | None = None

    def named_models(self) -> dict[str, torch.nn.Module]:
        return {
            "g_mr2ct": self.g_mr2ct,
            "g_ct2mr": self.g_ct2mr,
            "d_ct": self.d_ct,
            "d_mr": self.d_mr,
            "seg": self.seg,
        }

    def set_lr(self, lr: float, seg_lr_scale: float = 1.0):
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr
        for group in self.opt_seg.param_groups:
            group["lr"] = lr * seg_lr_scale


@dataclass
class CheckpointSet:
    paths: dict[str, Path]

    def __getitem__(self, name: str) -> Path:
        return self.paths[name]


def build_scratch_models(
    net_cfg: NetConfig, cfg: TrainConfig, out_dir: str | Path | None = None
) -> ScratchModels:
    betas = (0.5, 0.999)
    g_mr2ct = build_generator(NetConfig(**{**asdict(net_cfg), "seed": net_cfg.seed + 1}))
    g_ct2mr = build_generator(NetConfig(**{**asdict(net_cfg), "seed": net_cfg.seed + 2}))
    d_ct = build_discriminator(NetConfig(**{**asdict(net_cfg), "seed": net_cfg.seed + 3}))
    d_mr = build_discriminator(NetConfig(**{**asdict(net_cfg), "seed": net_cfg.seed + 4}))
    seg = build_segmenter(NetConfig(**{**asdict(net_cfg), "seed": net_cfg.seed + 5}))
    opt_g = torch.optim.Adam(
        itertools.chain(g_mr2ct.parameters(), g_ct2mr.parameters()), lr=cfg.lr0, betas=betas
    )
    opt_d = torch.optim.Adam(itertools.chain(d_ct.parameters(), d_mr.parameters()), lr=cfg.lr0, betas=betas)
    opt_seg = torch.optim.Adam(seg.parameters(), lr=cfg.lr0 * cfg.seg_lr_scale, betas=(0.9, 0.999))
    return ScratchModels(
        g_mr2ct=g_mr2ct,
        g_ct2mr=g_ct2mr,
        d_ct=d_ct,
        d_mr=d_mr,
        seg=seg,
        opt_g=opt_g,
        opt_d=opt_d,
        opt_seg=opt_seg,
        pool_ct=ImagePool(cfg.image_pool_size),
        pool_mr=ImagePool(cfg.image_pool_size),
        pool_rng=random.Random(cfg.seed),
        out_dir=Path(out_dir) if out_dir is not None else None,
    )


def _check_finite(value: torch.Tensor, models: ScratchModels, what: str, step: int):
    if torch.isfinite(value).all():
        return
    if models.out_dir is not None:
        diag = models.out_dir / f"diagnostic_step{step}"
        for name, model in models.named_models().items():
            save_model(model, diag / f"{name}.ckpt", step=step)
    raise NonFiniteLossError(f"non-finite {what} at step {step}")


def train_step(
    models: ScratchModels,
    batch_mr: tuple[torch.Tensor, torch.Tensor],
    batch_ct: torch.Tensor,
    cfg: TrainConfig,
    step: int = 0,
) -> StepReport:
    """One alternating G / D / Seg update on an unpaired MR/CT batch pair."""
    w = cfg.weights
    x_mr, y_mr = batch_mr
    x_ct = batch_ct
    report = StepReport()
    parts = ScratchLossParts()

    # (1) generators (and segmenter when coupled)
    models.opt_g.zero_grad(set_to_none=True)
    if cfg.coupled:
        models.opt_seg.zero_grad(set_to_none=True)
    fake_ct = models.g_mr2ct(x_mr)
    fake_mr = models.g_ct2mr(x_ct)
    if w.lambda1 > 0:
        parts.gan_ct = g_adversarial(models.d_ct, fake_ct, cfg.adversarial_mode)
        parts.gan_mr = g_adversarial(models.d_mr, fake_mr, cfg.adversarial_mode)
    if w.lambda2 > 0:
        parts.cyc_ct = (models.g_mr2ct(fake_mr) - x_ct).abs().mean()
        parts.cyc_mr = (models.g_ct2mr(fake_ct) - x_mr).abs().mean()
    if w.lambda3 > 0:
        parts.identity = (fake_ct - x_mr).abs().mean() + (fake_mr - x_ct).abs().mean()
    if w.lambda4 > 0:
        sv = cfg.sobel_paper_verbatim
        parts.edge = (sobel_magnitude_t(fake_ct, sv) - sobel_magnitude_t(x_mr, sv)).abs().mean() + (
            sobel_magnitude_t(fake_mr, sv) - sobel_magnitude_t(x_ct, sv)
        ).abs().mean()
    seg_in_g = 0.0
    if cfg.coupled and w.lambda5 > 0:
        seg_in_g = weighted_ce(models.seg(fake_ct), y_mr, w.ce_class_weights)
        parts.seg = seg_in_g
    g_total = (
        w.lambda1 * (parts.gan_ct + parts.gan_mr)
        + w.lambda2 * (parts.cyc_ct + parts.cyc_mr)
        + w.lambda3 * parts.identity
        + w.lambda4 * parts.edge
        + w.lambda5 * seg_in_g
    )
    if isinstance(g_total, torch.Tensor):
        _check_finite(g_total, models, "generator loss", step)
        g_total.backward()
        models.opt_g.step()
        if cfg.coupled and w.lambda5 > 0:
            models.opt_seg.step()

    # (2) discriminators, on pooled historical fakes
    if w.lambda1 > 0:
        models.opt_d.zero_grad(set_to_none=True)
        pooled_ct = models.pool_ct.query(fake_ct.detach(), models.pool_rng)
        pooled_mr = models.pool_mr.query(fake_mr.detach(), models.pool_rng)
        d_ct_loss = d_adversarial(models.d_ct, x_ct, pooled_ct, cfg.adversarial_mode)
        d_mr_loss = d_adversarial(models.d_mr, x_mr, pooled_mr, cfg.adversarial_mode)
        _check_finite(d_ct_loss + d_mr_loss, models, "discriminator loss", step)
        (d_ct_loss + d_mr_loss).backward()
        models.opt_d.step()
        report.d_ct = scalar(d_ct_loss)
        report.d_mr = scalar(d_mr_loss)

    # (3) segmenter on synthesized CT, gradient blocked from the generator
    if not cfg.coupled and w.lambda5 > 0:
        models.opt_seg.zero_grad(set_to_none=True)
        seg_ce = weighted_ce(models.seg(fake_ct.detach()), y_mr, w.ce_class_weights)
        _check_finite(seg_ce, models, "segmentation loss", step)
        (w.lambda5 * seg_ce).backward()
        models.opt_seg.step()
        parts.seg = seg_ce

    report.g_adv_ct = scalar(parts.gan_ct)
    report.g_adv_mr = scalar(parts.gan_mr)
    report.cyc_ct = scalar(parts.cyc_ct)
    report.cyc_mr = scalar(parts.cyc_mr)
    report.identity = scalar(parts.identity)
    report.edge = scalar(parts.edge)
    report.seg_ce = scalar(parts.seg)
    report.total_g = scalar(scratch_total_loss(parts, w))
    return report


# ---------------------------------------------------------------------------
# epoch planning and data loading


def plan_epoch(n_mr: int, n_ct: int, batch_size: int, seed: int, epoch: int):
    """Batched index streams for one epoch: each domain follows its own
    sequence of independent shuffles, reshuffling when exhausted."""
    steps = math.ceil(max(n_mr, n_ct) / batch_size)

    def stream(n: int, salt: int) -> np.ndarray:
        rng = np.random.default_rng([seed, epoch, salt])
        chunks = []
        while sum(len(c) for c in chunks) < steps * batch_size:
            chunks.append(rng.permutation(n))
        return np.concatenate(chunks)[: steps * batch_size]

    mr = stream(n_mr, 0).reshape(steps, batch_size)
    ct = stream(n_ct, 1).reshape(steps, batch_size)
    return mr, ct


class LoadedDomain:
    """A manifest's images (and labels, when present) held in memory."""

    def __init__(self, manifest: DatasetManifest, need_labels: bool):
        self.items = list(manifest.items)
        self.ids = [it.item_id for it in self.items]
        self.images = []
        self.labels = [] if need_labels else None
        for it in self.items:
            img = load_image(it.image_path)
            v = img.values
            if v.min() < -1.0 - 1e-5 or v.max() > 1.0 + 1e-5:
                raise ValidationError(f"image {it.item_id} is not normalized to [-1, 1]")
            self.images.append(torch.from_numpy(np.array(v, dtype=np.float32))[None])
            if need_labels:
                if it.label_path is None:
                    raise ValidationError(f"item {it.item_id} is missing a required label")
                lbl = load_labelmap(it.label_path)
                self.labels.append(torch.from_numpy(np.array(lbl.classes, dtype=np.int64)))

    def __len__(self):
        return len(self.items)

    def image_batch(self, idx: np.ndarray) -> torch.Tensor:
        return torch.stack([self.images[i] for i in idx])

    def label_batch(self, idx: np.ndarray) -> torch.Tensor:
        return torch.stack([self.labels[i] for i in idx])


def validation_dice(seg: torch.nn.Module, manifest: DatasetManifest) -> dict[int, float]:
    """Mean per-class Dice of the current segmenter over a labeled manifest."""
    seg.eval()
    per_class = {c: [] for c in MUSCLE_CLASSES}
    for it in manifest.items:
        img = load_image(it.image_path)
        truth = load_labelmap(it.label_path)
        scores = labelmap_dice(predict_labelmap(seg, img), truth)
        for c in MUSCLE_CLASSES:
            per_class[c].append(scores[c])
    seg.train()
    return {c: float(np.mean(v)) for c, v in per_class.items()}


# ---------------------------------------------------------------------------
# full training loop


LOG_COLUMNS = (
    ["epoch", "lr"]
    + REPORT_FIELDS
    + ["val_dice_gracilis", "val_dice_hamstring", "val_dice_quadriceps", "val_dice_sartorius", "val_dice_mean"]
)


def _save_all(models: ScratchModels, out_dir: Path, step: int) -> CheckpointSet:
    paths = {}
    for name, model in models.named_models().items():
        path = out_dir / f"{name}.ckpt"
        save_model(model, path, step=step)
        paths[name] = path
    return CheckpointSet(paths=paths)


def _save_train_state(models: ScratchModels, out_dir: Path, next_epoch: int):
    state = {
        "next_epoch": next_epoch,
        "opt_g": models.opt_g.state_dict(),
        "opt_d": models.opt_d.state_dict(),
        "opt_seg": models.opt_seg.state_dict(),
        "pool_ct": models.pool_ct.images,
        "pool_mr": models.pool_mr.images,
        "pool_rng": models.pool_rng.getstate(),
    }
    torch.save(state, out_dir / "train_state.pt")


def _load_train_state(models: ScratchModels, out_dir: Path) -> int:
    state = torch.load(out_dir / "train_state.pt", weights_only=False)
    models.opt_g.load_state_dict(state["opt_g"])
    models.opt_d.load_state_dict(state["opt_d"])
    models.opt_seg.load_state_dict(state["opt_seg"])
    models.pool_ct.images = list(state["pool_ct"])
    models.pool_mr.images = list(state["pool_mr"])
    models.pool_rng.setstate(state["pool_rng"])
    return int(state["next_epoch"])


def train_scratch(
    cfg: TrainConfig,
    mr_manifest: DatasetManifest | str | Path,
    ct_manifest: DatasetManifest | str | Path,
    out_dir: str | Path,
    net_cfg: NetConfig | None = None,
    val_manifest: DatasetManifest | str | Path | None = None,
    resume: bool = False,
) -> CheckpointSet:
    """Run the stage-1 loop; writes checkpoints, a resumable training state
    and a per-epoch CSV log (losses, lr, validation Dice when available)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not isinstance(mr_manifest, DatasetManifest):
        mr_manifest = load_manifest(mr_manifest)
    if not isinstance(ct_manifest, DatasetManifest):
        ct_manifest = load_manifest(ct_manifest)
    if val_manifest is not None and not isinstance(val_manifest, DatasetManifest):
        val_manifest = load_manifest(val_manifest)
    if len(mr_manifest) == 0 or len(ct_manifest) == 0:
        raise ValidationError("both training manifests must be non-empty")

    net_cfg = net_cfg or NetConfig(seed=cfg.seed)
    mr = LoadedDomain(mr_manifest, need_labels=True)
    ct = LoadedDomain(ct_manifest, need_labels=False)
    models = build_scratch_models(net_cfg, cfg, out_dir=out_dir)

    start_epoch = 0
    log_path = out_dir / "train_log.csv"
    if resume and (out_dir / "train_state.pt").exists():
        for name, model in models.named_models().items():
            loaded = load_model(out_dir / f"{name}.ckpt")
            model.load_state_dict(loaded.state_dict())
        start_epoch = _load_train_state(models, out_dir)
    elif not log_path.exists():
        with open(log_path, "w", newline="") as f:
            csv.writer(f).writerow(LOG_COLUMNS)

    checkpoints = None
    for epoch in range(start_epoch, cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        models.set_lr(lr, cfg.seg_lr_scale)
        models.pool_rng = random.Random(f"pool:{cfg.seed}:{epoch}")  # str seeds hash stably
        mr_batches, ct_batches = plan_epoch(len(mr), len(ct), cfg.batch_size, cfg.seed, epoch)
        sums = dict.fromkeys(REPORT_FIELDS, 0.0)
        for step_in_epoch, (mi, ci) in enumerate(zip(mr_batches, ct_batches)):
            global_step = epoch * len(mr_batches) + step_in_epoch
            report = train_step(
                models,
                (mr.image_batch(mi), mr.label_batch(mi)),
                ct.image_batch(ci),
                cfg,
                step=global_step,
            )
            for k, v in report.as_dict().items():
                sums[k] += v
        means = {k: v / len(mr_batches) for k, v in sums.items()}
        val_cells = ["", "", "", "", ""]
        if val_manifest is not None and len(val_manifest) > 0:
            vd = validation_dice(models.seg, val_manifest)
            val_cells = [f"{vd[c]:.6f}" for c in MUSCLE_CLASSES]
            val_cells.append(f"{np.mean(list(vd.values())):.6f}")
        with open(log_path, "a", newline="") as f:
            csv.writer(f).writerow(
                [epoch, f"{lr:.8f}"] + [f"{means[k]:.6f}" for k in REPORT_FIELDS] + val_cells
            )
        if (epoch + 1) % cfg.checkpoint_every == 0 or epoch + 1 == cfg.epochs:
            checkpoints = _save_all(models, out_dir, step=epoch + 1)
            _save_train_state(models, out_dir, next_epoch=epoch + 1)

    if checkpoints is None:
        checkpoints = _save_all(models, out_dir, step=start_epoch)
        _save_train_state(models, out_dir, next_epoch=start_epoch)
    return checkpoints
