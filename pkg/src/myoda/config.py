"""Flat key=value configuration with per-module sections.

Files look like:

    [train]
    epochs = 20
    lr0 = 0.0002

    [losses]
    lambda2 = 30.0
    ce_class_weights = 1,10,1,1,10

Keys flatten to ``section.key``. Environment variables named
``MYODA_<SECTION>_<KEY>`` (uppercase) override file values. Every constant
of the method (lambda weights, class weights, clip window, easy fraction,
learning-rate schedule) is a config default named after its symbol.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .core import ValidationError
from .losses import LossWeights
from .nets import NetConfig
from .phantom import PhantomParams
from .preprocess import NormalizationSpec
from .train_finetune import FinetuneConfig
from .train_scratch import TrainConfig

ENV_PREFIX = "MYODA_"

DEFAULTS: dict[str, object] = {
    "run.seed": 7,
    "run.workers": 1,
    "phantom.n_samples": 252,
    "phantom.image_size": 128,
    "phantom.noise_sigma": 10.0,
    "phantom.deformation_amplitude": 0.08,
    "phantom.bone_contrast_flip": True,
    "preprocess.ct_clip_low": -200.0,
    "preprocess.ct_clip_high": 500.0,
    "preprocess.dilate": "quadriceps=6,hamstring=2",
    "split.fractions": [0.7937, 0.0794, 0.1269],
    "nets.base_channels": 32,
    "nets.depth": 4,
    "nets.norm_kind": "instance",
    "nets.seg_norm_kind": "group",
    "nets.patch_disc_layers": 3,
    "nets.res_blocks": 4,
    "losses.lambda1": 1.0,
    "losses.lambda2": 30.0,
    "losses.lambda3": 0.5,
    "losses.lambda4": 1.0,
    "losses.lambda5": 1.0,
    "losses.lambda6": 0.001,
    "losses.ce_class_weights": [1.0, 10.0, 1.0, 1.0, 10.0],
    "losses.adversarial_mode": "bce",
    "losses.sobel_paper_verbatim": False,
    "train.epochs": 100,
    "train.lr0": 2e-4,
    "train.lr_const_epochs": 50,
    "train.batch_size": 1,
    "train.checkpoint_every": 10,
    "train.image_pool_size": 50,
    "train.coupled": False,
    "train.seg_lr_scale": 1.0,
    "cohort.fraction": 2.0 / 3.0,
    "cohort.entropy_scope": "all",
    "cohort.selfinfo_entropy_only": False,
    "finetune.epochs": 20,
    "finetune.lr": 2e-5,
    "finetune.refine": True,
    "finetune.batch_size": 1,
}


def _parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if "," in text and "=" not in text:
        return [_parse_value(p) for p in text.split(",") if p.strip()]
    if "=" in text:
        return text  # schedule-style values such as quadriceps=6,hamstring=2
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict[str, object]:
    cfg: dict[str, object] = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno} is not key=value: {raw!r}")
        key, _, value = line.partition("=")
        full = f"{section}.{key.strip()}" if section else key.strip()
        cfg[full] = _parse_value(value)
    return cfg


def load_config(path: str | Path | None) -> dict[str, object]:
    """Defaults, overlaid with the file (when given), then the environment."""
    cfg = dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file not found: {path}")
        for key, value in parse_config_text(path.read_text(encoding="utf-8")).items():
            cfg[key] = value
    for key in list(cfg):
        env_name = ENV_PREFIX + key.upper().replace(".", "_")
        if env_name in os.environ:
            cfg[key] = _parse_value(os.environ[env_name])
    return cfg


def save_config(cfg: dict[str, object], path: str | Path):
    sections: dict[str, list[tuple[str, object]]] = {}
    for key, value in cfg.items():
        section, _, name = key.rpartition(".")
        sections.setdefault(section, []).append((name, value))
    lines = []
    for section in sorted(sections):
        if section:
            lines.append(f"[{section}]")
        for name, value in sorted(sections[section]):
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            lines.append(f"{name} = {value}")
        lines.append("")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines), encoding="utf-8")


def config_hash(cfg: dict[str, object]) -> str:
    blob = repr(sorted(cfg.items())).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# typed views


def _floats(value) -> list[float]:
    if isinstance(value, (int, float)):
        return [float(value)]
    return [float(v) for v in value]


def loss_weights(cfg: dict[str, object]) -> LossWeights:
    return LossWeights(
        lambda1=float(cfg["losses.lambda1"]),
        lambda2=float(cfg["losses.lambda2"]),
        lambda3=float(cfg["losses.lambda3"]),
        lambda4=float(cfg["losses.lambda4"]),
        lambda5=float(cfg["losses.lambda5"]),
        lambda6=float(cfg["losses.lambda6"]),
        ce_class_weights=tuple(_floats(cfg["losses.ce_class_weights"])),
    )


def net_config(cfg: dict[str, object], seed_offset: int = 0) -> NetConfig:
    return NetConfig(
        base_channels=int(cfg["nets.base_channels"]),
        depth=int(cfg["nets.depth"]),
        norm_kind=str(cfg["nets.norm_kind"]),
        seg_norm_kind=str(cfg["nets.seg_norm_kind"]),
        patch_disc_layers=int(cfg["nets.patch_disc_layers"]),
        res_blocks=int(cfg["nets.res_blocks"]),
        seed=int(cfg["run.seed"]) + seed_offset,
    )


def train_config(cfg: dict[str, object]) -> TrainConfig:
    return TrainConfig(
        epochs=int(cfg["train.epochs"]),
        lr0=float(cfg["train.lr0"]),
        lr_const_epochs=int(cfg["train.lr_const_epochs"]),
        batch_size=int(cfg["train.batch_size"]),
        image_size=int(cfg["phantom.image_size"]),
        weights=loss_weights(cfg),
        seed=int(cfg["run.seed"]),
        checkpoint_every=int(cfg["train.checkpoint_every"]),
        image_pool_size=int(cfg["train.image_pool_size"]),
        coupled=bool(cfg["train.coupled"]),
        adversarial_mode=str(cfg["losses.adversarial_mode"]),
        sobel_paper_verbatim=bool(cfg["losses.sobel_paper_verbatim"]),
        seg_lr_scale=float(cfg["train.seg_lr_scale"]),
    )


def finetune_config(cfg: dict[str, object]) -> FinetuneConfig:
    return FinetuneConfig(
        epochs=int(cfg["finetune.epochs"]),
        lr=float(cfg["finetune.lr"]),
        lambda6=float(cfg["losses.lambda6"]),
        fraction=float(cfg["cohort.fraction"]),
        seed=int(cfg["run.seed"]),
        refine=bool(cfg["finetune.refine"]),
        batch_size=int(cfg["finetune.batch_size"]),
        ce_class_weights=tuple(_floats(cfg["losses.ce_class_weights"])),
        adversarial_mode=str(cfg["losses.adversarial_mode"]),
        entropy_scope=str(cfg["cohort.entropy_scope"]),
        selfinfo_entropy_only=bool(cfg["cohort.selfinfo_entropy_only"]),
    )


def phantom_params(cfg: dict[str, object], seed: int | None = None) -> PhantomParams:
    return PhantomParams(
        image_size=int(cfg["phantom.image_size"]),
        n_samples=int(cfg["phantom.n_samples"]),
        noise_sigma=float(cfg["phantom.noise_sigma"]),
        deformation_amplitude=float(cfg["phantom.deformation_amplitude"]),
        bone_contrast_flip=bool(cfg["phantom.bone_contrast_flip"]),
        seed=int(cfg["run.seed"]) if seed is None else seed,
    )


def normalization_spec(cfg: dict[str, object]) -> NormalizationSpec:
    return NormalizationSpec(
        ct_clip=(float(cfg["preprocess.ct_clip_low"]), float(cfg["preprocess.ct_clip_high"]))
    )
