"""Residual backbone with four feature taps, projection heads, and the
online/target pair updated by exponential moving average.

Single-channel input. The stem downsamples by 4, each later stage by 2,
so the taps sit at strides 4, 8, 16, 32. The shallow tap index (1..3)
selects which of the first three stages feeds the contour-consistency
head; the deep tap is always stage 4.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

TAP_STRIDES = (4, 8, 16, 32)


@dataclass(frozen=True)
class BackboneConfig:
    stem_channels: int
    stage_channels: tuple[int, int, int, int]
    blocks_per_stage: tuple[int, int, int, int]
    block: str = "basic"  # "basic" or "bottleneck"

    def validate(self) -> None:
        if self.block not in ("basic", "bottleneck"):
            raise ConfigError(f"unknown block type {self.block!r}")
        if self.stem_channels < 1:
            raise ConfigError("stem_channels must be >= 1")
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ConfigError("expected 4 stages")
        if any(c < 1 for c in self.stage_channels) or any(
            b < 1 for b in self.blocks_per_stage
        ):
            raise ConfigError("stage widths and depths must be >= 1")


@dataclass(frozen=True)
class EncoderConfig:
    backbone: BackboneConfig
    head_hidden: int
    head_out: int
    cc_tap: int = 3
    ema_momentum: float = 0.999

    def validate(self) -> None:
        self.backbone.validate()
        if self.head_hidden < 1 or self.head_out < 1:
            raise ConfigError("head dims must be >= 1")
        if self.cc_tap not in (1, 2, 3):
            raise ConfigError(f"cc_tap must be 1, 2, or 3, got {self.cc_tap}")
        if not (0.0 <= self.ema_momentum <= 1.0):
            raise ConfigError(
                f"ema_momentum must be in [0, 1], got {self.ema_momentum}"
            )


@dataclass(frozen=True)
class Preset:
    encoder: EncoderConfig
    bank_capacity: int
    decoder_width: int


PRESETS: dict[str, Preset] = {
    "tiny": Preset(
        encoder=EncoderConfig(
            backbone=BackboneConfig(16, (16, 32, 64, 128), (1, 1, 1, 1), "basic"),
            head_hidden=64,
            head_out=32,
            ema_momentum=0.99,
        ),
        bank_capacity=1024,
        decoder_width=64,
    ),
    "paper": Preset(
        encoder=EncoderConfig(
            backbone=BackboneConfig(
                64, (256, 512, 1024, 2048), (3, 4, 6, 3), "bottleneck"
            ),
            head_hidden=2048,
            head_out=128,
            ema_momentum=0.999,
        ),
        bank_capacity=65536,
        decoder_width=256,
    ),
    "paper101": Preset(
        encoder=EncoderConfig(
            backbone=BackboneConfig(
                64, (256, 512, 1024, 2048), (3, 4, 23, 3), "bottleneck"
            ),
            head_hidden=2048,
            head_out=128,
            ema_momentum=0.999,
        ),
        bank_capacity=65536,
        decoder_width=256,
    ),
}


def get_preset(name: str) -> Preset:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}, expected one of {sorted(PRESETS)}")
    return PRESETS[name]


def conv3x3(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)


def conv1x1(cin: int, cout: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 1, stride=stride, bias=False)


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = conv3x3(cin, cout, stride)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = conv3x3(cout, cout)
        self.bn2 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


class Bottleneck(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        mid = cout // 4
        self.conv1 = conv1x1(cin, mid)
        self.bn1 = nn.BatchNorm2d(mid)
        self.conv2 = conv3x3(mid, mid, stride)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv3 = conv1x1(mid, cout)
        self.bn3 = nn.BatchNorm2d(cout)
        self.down = None
        if stride != 1 or cin != cout:
            self.down = nn.Sequential(conv1x1(cin, cout, stride), nn.BatchNorm2d(cout))

    def forward(self, x):
        identity = x if self.down is None else self.down(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = F.relu(self.bn2(self.conv2(out)), inplace=True)
        out = self.bn3(self.conv3(out))
        return F.relu(out + identity, inplace=True)


class Backbone(nn.Module):
    """Four-stage residual trunk over single-channel input.

    ``forward`` returns the list of the four stage outputs, shallowest
    first, at strides 4, 8, 16, 32.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        block = BasicBlock if cfg.block == "basic" else Bottleneck
        self.stem = nn.Sequential(
            nn.Conv2d(1, cfg.stem_channels, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(cfg.stem_channels),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        stages = []
        cin = cfg.stem_channels
        for i, (cout, depth) in enumerate(zip(cfg.stage_channels, cfg.blocks_per_stage)):
            blocks = []
            for j in range(depth):
                stride = 2 if (i > 0 and j == 0) else 1
                blocks.append(block(cin, cout, stride))
                cin = cout
            stages.append(nn.Sequential(*blocks))
        self.stages = nn.ModuleList(stages)
        self.tap_channels = tuple(cfg.stage_channels)
        self.tap_strides = TAP_STRIDES

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        taps = []
        out = self.stem(x)
        for stage in self.stages:
            out = stage(out)
            taps.append(out)
        return taps


@dataclass
class FeatureTaps:
    """Shallow and deep stage outputs for one batch of views."""

    shallow: torch.Tensor  # (N, Cs, S/stride_s, S/stride_s)
    deep: torch.Tensor  # (N, Cd, S/32, S/32)
    shallow_stride: int
    deep_stride: int


def forward_taps(backbone: Backbone, view: torch.Tensor, cc_tap: int = 3) -> FeatureTaps:
    """Run the trunk once and pick the shallow and deep taps.

    ``view`` is ``(N, 1, S, S)`` (a ``(1, S, S)`` single view is
    accepted and batched). ``cc_tap`` selects stage 1..3 for the shallow
    tap; the deep tap is stage 4.
    """
    if cc_tap not in (1, 2, 3):
        raise ConfigError(f"cc_tap must be 1, 2, or 3, got {cc_tap}")
    if view.ndim == 3:
        view = view.unsqueeze(0)
    taps = backbone(view)
    return FeatureTaps(
        shallow=taps[cc_tap - 1],
        deep=taps[3],
        shallow_stride=TAP_STRIDES[cc_tap - 1],
        deep_stride=TAP_STRIDES[3],
    )


class Mlp(nn.Module):
    """Two-layer perceptron used for every projection/prediction head."""

    def __init__(self, din, hidden, dout):
        super().__init__()
        self.fc1 = nn.Linear(din, hidden)
        self.fc2 = nn.Linear(hidden, dout)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x), inplace=True))


def global_pool(fmap: torch.Tensor) -> torch.Tensor:
    """Spatial mean over the last two axes: (..., C, H, W) -> (..., C)."""
    return fmap.mean(dim=(-2, -1))


def project(head: nn.Module, features: torch.Tensor) -> torch.Tensor:
    """Head forward followed by row L2 normalization."""
    return F.normalize(head(features), dim=-1, eps=1e-12)


class EncoderStack(nn.Module):
    """Backbone plus the three projection heads (deep, shallow, local)."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone)
        shallow_c = cfg.backbone.stage_channels[cfg.cc_tap - 1]
        deep_c = cfg.backbone.stage_channels[3]
        self.proj_deep = Mlp(deep_c, cfg.head_hidden, cfg.head_out)
        self.proj_shallow = Mlp(shallow_c, cfg.head_hidden, cfg.head_out)
        self.proj_local = Mlp(deep_c, cfg.head_hidden, cfg.head_out)

    def taps(self, view: torch.Tensor) -> FeatureTaps:
        return forward_taps(self.backbone, view, self.cfg.cc_tap)


class NetworkPair(nn.Module):
    """Online stack with predictor, plus a frozen-by-gradient target stack.

    The target starts as an exact copy of the online stack and is only
    ever changed by :func:`ema_update`.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.online = EncoderStack(cfg)
        self.predictor = Mlp(cfg.head_out, cfg.head_hidden, cfg.head_out)
        self.target = EncoderStack(cfg)
        self.target.load_state_dict(self.online.state_dict())
        for p in self.target.parameters():
            p.requires_grad_(False)
        self.momentum = cfg.ema_momentum

    def trainable_parameters(self):
        yield from self.online.parameters()
        yield from self.predictor.parameters()


@torch.no_grad()
def ema_update(pair: NetworkPair, momentum: float | None = None) -> None:
    """Move every target parameter toward its online counterpart:
    ``t = m * t + (1 - m) * o``. ``m = 1`` freezes the target, ``m = 0``
    copies the online weights. BN statistics are left to the target's
    own forward passes."""
    m = pair.momentum if momentum is None else momentum
    if not (0.0 <= m <= 1.0):
        raise ConfigError(f"ema momentum must be in [0, 1], got {m}")
    for po, pt in zip(pair.online.parameters(), pair.target.parameters()):
        pt.mul_(m).add_(po.detach(), alpha=1.0 - m)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
