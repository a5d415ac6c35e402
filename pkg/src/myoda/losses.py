"""Training objectives: adversarial, cycle, identity, edge, weighted
cross-entropy and the combined stage-1/stage-2 totals.

All functions are pure in (parameters, batch) and differentiable. The
adversarial objective is binary cross-entropy on patch logits with the
non-saturating generator form; a least-squares mode is available for
stability experiments. Identity compares each generator's output against
its own input image, matching the printed form of the objective this
module implements.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .core import Image2D, LabelMap, N_CLASSES, ValidationError

SOBEL_EPS = 1e-8

# central-difference kernels (default) and the printed variant whose
# vertical kernel sums instead of differencing
_KERNELS_CENTRAL = {
    "v": ((0.0, 1.0, 0.0), (0.0, 0.0, 0.0), (0.0, -1.0, 0.0)),
    "h": ((0.0, 0.0, 0.0), (-1.0, 0.0, 1.0), (0.0, 0.0, 0.0)),
}
_KERNELS_VERBATIM = {
    "v": ((0.0, 1.0, 0.0), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0)),
    "h": ((0.0, 0.0, 0.0), (-1.0, 0.0, 1.0), (0.0, 0.0, 0.0)),
}


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0  # adversarial
    lambda2: float = 30.0  # cycle
    lambda3: float = 0.5  # identity
    lambda4: float = 1.0  # edge
    lambda5: float = 1.0  # segmentation
    lambda6: float = 0.001  # split adversarial (fine-tune stage)
    ce_class_weights: tuple[float, ...] = (1.0, 10.0, 1.0, 1.0, 10.0)

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "lambda6"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if len(self.ce_class_weights) != N_CLASSES:
            raise ValidationError(f"ce_class_weights needs {N_CLASSES} entries")
        object.__setattr__(self, "ce_class_weights", tuple(float(w) for w in self.ce_class_weights))


@dataclass
class ScratchLossParts:
    """Per-step loss components entering the stage-1 total."""

    gan_ct: float | torch.Tensor = 0.0
    gan_mr: float | torch.Tensor = 0.0
    cyc_ct: float | torch.Tensor = 0.0
    cyc_mr: float | torch.Tensor = 0.0
    identity: float | torch.Tensor = 0.0
    edge: float | torch.Tensor = 0.0
    seg: float | torch.Tensor = 0.0


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[None]
    return x


# ---------------------------------------------------------------------------
# adversarial


def d_adversarial(disc, real: torch.Tensor, fake: torch.Tensor, mode: str = "bce") -> torch.Tensor:
    """Discriminator objective: real scored 1, fake (detached) scored 0."""
    score_real = disc(real)
    score_fake = disc(fake.detach())
    if mode == "bce":
        return F.binary_cross_entropy_with_logits(
            score_real, torch.ones_like(score_real)
        ) + F.binary_cross_entropy_with_logits(score_fake, torch.zeros_like(score_fake))
    if mode == "lsgan":
        return F.mse_loss(score_real, torch.ones_like(score_real)) + F.mse_loss(
            score_fake, torch.zeros_like(score_fake)
        )
    raise ValidationError(f"unknown adversarial mode {mode!r}")


def g_adversarial(disc, fake: torch.Tensor, mode: str = "bce") -> torch.Tensor:
    """Non-saturating generator objective: fake scored as real."""
    score = disc(fake)
    if mode == "bce":
        return F.binary_cross_entropy_with_logits(score, torch.ones_like(score))
    if mode == "lsgan":
        return F.mse_loss(score, torch.ones_like(score))
    raise ValidationError(f"unknown adversarial mode {mode!r}")


def adv_loss(disc, real_batch: torch.Tensor, fake_batch: torch.Tensor, mode: str = "bce"):
    """Both sides of the adversarial game: (d_loss, g_loss)."""
    real = _as_batch(real_batch)
    fake = _as_batch(fake_batch)
    if real.shape[1:] != fake.shape[1:]:
        raise ValidationError(f"real/fake shape mismatch: {tuple(real.shape)} vs {tuple(fake.shape)}")
    return d_adversarial(disc, real, fake, mode), g_adversarial(disc, fake, mode)


# ---------------------------------------------------------------------------
# reconstruction-style losses


def cycle_loss(g_ab, g_ba, batch_a: torch.Tensor) -> torch.Tensor:
    """Mean absolute error between a batch and its round-trip translation."""
    x = _as_batch(batch_a)
    return (g_ab(g_ba(x)) - x).abs().mean()


def identity_loss(g_mr2ct, g_ct2mr, x_mr: torch.Tensor, x_ct: torch.Tensor) -> torch.Tensor:
    """Sum of the two per-domain mean-L1 identity terms."""
    x_mr = _as_batch(x_mr)
    x_ct = _as_batch(x_ct)
    return (g_mr2ct(x_mr) - x_mr).abs().mean() + (g_ct2mr(x_ct) - x_ct).abs().mean()


# ---------------------------------------------------------------------------
# edge loss


def _sobel_kernels(paper_verbatim: bool, dtype, device):
    table = _KERNELS_VERBATIM if paper_verbatim else _KERNELS_CENTRAL
    v = torch.tensor(table["v"], dtype=dtype, device=device).view(1, 1, 3, 3)
    h = torch.tensor(table["h"], dtype=dtype, device=device).view(1, 1, 3, 3)
    return v, h


def sobel_magnitude_t(x: torch.Tensor, paper_verbatim: bool = False) -> torch.Tensor:
    """Per-pixel gradient magnitude sqrt(g_v^2 + g_h^2 + eps), reflect-padded."""
    x = _as_batch(x)
    v, h = _sobel_kernels(paper_verbatim, x.dtype, x.device)
    padded = F.pad(x, (1, 1, 1, 1), mode="reflect")
    gv = F.conv2d(padded, v)
    gh = F.conv2d(padded, h)
    return torch.sqrt(gv * gv + gh * gh + SOBEL_EPS)


def sobel_magnitude(img: Image2D, paper_verbatim: bool = False) -> Image2D:
    t = torch.from_numpy(np.array(img.values, dtype=np.float32))
    mag = sobel_magnitude_t(t, paper_verbatim)[0, 0].numpy()
    return Image2D(values=mag, spacing=img.spacing, domain=img.domain)


def edge_loss(
    g_mr2ct, g_ct2mr, x_mr: torch.Tensor, x_ct: torch.Tensor, paper_verbatim: bool = False
) -> torch.Tensor:
    """L1 discrepancy of edge magnitude between inputs and their translations."""
    x_mr = _as_batch(x_mr)
    x_ct = _as_batch(x_ct)
    loss_mr = (
        sobel_magnitude_t(g_mr2ct(x_mr), paper_verbatim) - sobel_magnitude_t(x_mr, paper_verbatim)
    ).abs().mean()
    loss_ct = (
        sobel_magnitude_t(g_ct2mr(x_ct), paper_verbatim) - sobel_magnitude_t(x_ct, paper_verbatim)
    ).abs().mean()
    return loss_mr + loss_ct


# ---------------------------------------------------------------------------
# segmentation


def weighted_ce(logits: torch.Tensor, target, weights) -> torch.Tensor:
    """Class-weighted cross-entropy, normalized by the total pixel weight.

    The weight-normalized form keeps the loss scale independent of class
    prevalence: scaling all class weights by a constant leaves it unchanged.
    """
    if isinstance(target, LabelMap):
        target = torch.from_numpy(np.array(target.classes, dtype=np.int64))
    logits = logits if logits.dim() == 4 else logits[None]
    target = target if target.dim() == 3 else target[None]
    if logits.shape[0] != target.shape[0] or logits.shape[-2:] != target.shape[-2:]:
        raise ValidationError(f"logits {tuple(logits.shape)} do not match target {tuple(target.shape)}")
    if logits.shape[1] != N_CLASSES:
        raise ValidationError(f"expected {N_CLASSES} logit channels, got {logits.shape[1]}")
    target = target.long()
    if int(target.min()) < 0 or int(target.max()) >= N_CLASSES:
        raise ValidationError("target contains class ids outside the label set")
    w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
    if w.numel() != N_CLASSES:
        raise ValidationError(f"need {N_CLASSES} class weights")
    log_probs = F.log_softmax(logits, dim=1)
    picked = log_probs.gather(1, target[:, None]).squeeze(1)
    pixel_w = w[target]
    return -(pixel_w * picked).sum() / pixel_w.sum()


# ---------------------------------------------------------------------------
# combined objectives


def scratch_total_loss(parts: ScratchLossParts, weights: LossWeights):
    """Stage-1 total: weighted sum of adversarial, cycle, identity, edge, seg."""
    return (
        weights.lambda1 * (parts.gan_ct + parts.gan_mr)
        + weights.lambda2 * (parts.cyc_ct + parts.cyc_mr)
        + weights.lambda3 * parts.identity
        + weights.lambda4 * parts.edge
        + weights.lambda5 * parts.seg
    )


def finetune_total_loss(seg_loss_easy, split_gan_loss, lambda6: float):
    """Stage-2 total: easy-cohort segmentation plus weighted split-adversarial."""
    return lambda6 * split_gan_loss + seg_loss_easy
