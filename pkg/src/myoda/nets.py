"""Network architectures: translation generators, patch discriminators and
the U-Net segmenter, plus a portable checkpoint format.

Generators are residual encoder-decoders (two stride-2 downsampling stages,
``res_blocks`` residual blocks, mirror upsampling, tanh output). The
segmenter is a U-Net of ``depth`` levels with skip connections and a
5-channel logit head. Discriminators are PatchGAN stacks emitting a grid of
realness logits; the split discriminator is the same stack reading
5-channel self-information maps.

Inputs of any spatial size are accepted: forwards pad internally to the
required multiple and crop back.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import N_CLASSES, ValidationError

CHECKPOINT_MAGIC = b"MYOCKPT1"

ROLE_GENERATOR = "generator"
ROLE_SEGMENTER = "segmenter"
ROLE_DISCRIMINATOR = "discriminator"
ROLE_SPLIT_DISCRIMINATOR = "split_discriminator"


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 32
    depth: int = 4
    norm_kind: str = "instance"
    seg_norm_kind: str = "group"
    patch_disc_layers: int = 3
    res_blocks: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValidationError("depth must be >= 2")
        for field_name in ("norm_kind", "seg_norm_kind"):
            if getattr(self, field_name) not in ("instance", "batch", "group", "none"):
                raise ValidationError(f"unknown {field_name} {getattr(self, field_name)!r}")

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "instance":
        return nn.InstanceNorm2d(channels)
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    if kind == "group":
        return nn.GroupNorm(math.gcd(channels, 8), channels)
    return nn.Identity()


def _init_weights(module: nn.Module, scheme: str = "gan"):
    """'gan': DCGAN-style normal(0, 0.02) for translation nets; 'he':
    Kaiming fan-in init, which deep ReLU segmentation stacks need to keep
    early features non-degenerate."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            if scheme == "he":
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
            else:
                nn.init.normal_(m.weight, 0.0, 0.02)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.normal_(m.weight, 1.0, 0.02)
            nn.init.zeros_(m.bias)


def _pad_to_multiple(x: torch.Tensor, multiple: int):
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    return x, (h, w)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm_kind: str):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(norm_kind, channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(norm_kind, channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Generator(nn.Module):
    """Residual encoder-decoder mapping an image batch to the other domain."""

    role = ROLE_GENERATOR

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers = [
            nn.Conv2d(1, c, 7, padding=3, padding_mode="reflect"),
            _norm(cfg.norm_kind, c),
            nn.ReLU(inplace=True),
        ]
        for _ in range(2):
            layers += [
                nn.Conv2d(c, c * 2, 3, stride=2, padding=1),
                _norm(cfg.norm_kind, c * 2),
                nn.ReLU(inplace=True),
            ]
            c *= 2
        layers += [_ResidualBlock(c, cfg.norm_kind) for _ in range(cfg.res_blocks)]
        for _ in range(2):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(c, c // 2, 3, padding=1),
                _norm(cfg.norm_kind, c // 2),
                nn.ReLU(inplace=True),
            ]
            c //= 2
        layers += [nn.Conv2d(c, 1, 7, padding=3, padding_mode="reflect"), nn.Tanh()]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        x, (h, w) = _pad_to_multiple(x, 4)
        return self.model(x)[..., :h, :w]


class UNetSegmenter(nn.Module):
    """U-Net with skip connections; 1 channel in, N_CLASSES logits out."""

    role = ROLE_SEGMENTER

    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg

        def conv_block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                _norm(cfg.seg_norm_kind, cout),
                nn.ReLU(inplace=True),
                nn.Conv2d(cout, cout, 3, padding=1),
                _norm(cfg.seg_norm_kind, cout),
                nn.ReLU(inplace=True),
            )

        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        cin = 1
        for c in chans:
            self.encoders.append(conv_block(cin, c))
            cin = c
        self.bottleneck = conv_block(chans[-1], chans[-1] * 2)
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for c in reversed(chans):
            self.ups.append(nn.ConvTranspose2d(c * 2, c, 2, stride=2))
            self.decoders.append(conv_block(c * 2, c))
        self.head = nn.Conv2d(chans[0], N_CLASSES, 1)

    def forward(self, x):
        x, (h, w) = _pad_to_multiple(x, 2**self.cfg.depth)
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = up(x)
            x = dec(torch.cat([x, skip], dim=1))
        return self.head(x)[..., :h, :w]


class PatchDiscriminator(nn.Module):
    """PatchGAN stack: grid of realness logits over overlapping patches."""

    def __init__(self, cfg: NetConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.role = ROLE_DISCRIMINATOR if in_channels == 1 else ROLE_SPLIT_DISCRIMINATOR
        c = cfg.base_channels
        layers = [nn.Conv2d(in_channels, c, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        for _ in range(cfg.patch_disc_layers - 1):
            layers += [
                nn.Conv2d(c, c * 2, 4, stride=2, padding=1),
                _norm(cfg.norm_kind, c * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            c *= 2
        layers += [nn.Conv2d(c, 1, 4, stride=1, padding=1)]
        self.model = nn.Sequential(*layers)

    def forward(self, x):
        x, _ = _pad_to_multiple(x, 2**self.cfg.patch_disc_layers)
        out = self.model(x)
        if out.shape[-1] < 1 or out.shape[-2] < 1:
            raise ValidationError(f"input too small for {self.cfg.patch_disc_layers} discriminator layers")
        return out


def _build(factory, cfg: NetConfig, scheme: str = "gan") -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = factory()
        _init_weights(model, scheme)
    return model


def build_generator(cfg: NetConfig) -> Generator:
    return _build(lambda: Generator(cfg), cfg)


def build_segmenter(cfg: NetConfig) -> UNetSegmenter:
    return _build(lambda: UNetSegmenter(cfg), cfg, scheme="he")


def build_discriminator(cfg: NetConfig, in_channels: int = 1) -> PatchDiscriminator:
    if in_channels not in (1, N_CLASSES):
        raise ValidationError(f"discriminator input channels must be 1 or {N_CLASSES}")
    return _build(lambda: PatchDiscriminator(cfg, in_channels), cfg)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# checkpoints: magic, JSON header (role, cfg, cfg hash, step, tensor names
# and shapes), then raw little-endian float32 payloads in header order


def save_model(model: nn.Module, path: str | Path, step: int = 0):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = list(state.keys())
    header = {
        "role": model.role,
        "cfg": asdict(model.cfg),
        "cfg_hash": model.cfg.hash(),
        "step": int(step),
        "in_channels": getattr(model, "in_channels", 1),
        "tensors": [{"name": n, "shape": list(state[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(state[n].detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def load_model(path: str | Path, expected_role: str | None = None) -> nn.Module:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValidationError(f"not a myoda checkpoint: {path}")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<I", raw[pos : pos + 4])
    pos += 4
    header = json.loads(raw[pos : pos + hlen])
    pos += hlen
    role = header["role"]
    if expected_role is not None and role != expected_role:
        raise ValidationError(f"checkpoint role {role!r} does not match expected {expected_role!r}")
    cfg = NetConfig(**header["cfg"])
    if role == ROLE_GENERATOR:
        model = build_generator(cfg)
    elif role == ROLE_SEGMENTER:
        model = build_segmenter(cfg)
    elif role in (ROLE_DISCRIMINATOR, ROLE_SPLIT_DISCRIMINATOR):
        model = build_discriminator(cfg, in_channels=header.get("in_channels", 1))
    else:
        raise ValidationError(f"unknown checkpoint role {role!r}")
    state = {}
    for rec in header["tensors"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw[pos : pos + 4 * count], dtype="<f4").reshape(shape)
        pos += 4 * count
        state[rec["name"]] = torch.from_numpy(arr.copy())
    model.load_state_dict(state)
    model.checkpoint_step = header["step"]
    return model
