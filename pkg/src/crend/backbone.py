"""Asymmetric 3D encoder-decoder producing a full-size coarse probability map
and a half-size 96-channel fine feature map."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn


class ShapeError(ValueError):
    pass


@dataclass
class BackboneConfig:
    base_channels: int = 32
    n_pool: int = 4
    n_deconv: int = 3
    dilation_rates: tuple[int, int] = (1, 2)
    fine_channels: int = 96
    n_classes: int = 2
    in_channels: int = 1

    def __post_init__(self):
        self.dilation_rates = tuple(int(d) for d in self.dilation_rates)
        if self.n_deconv != self.n_pool - 1:
            raise ValueError("the segmentor decoder must have exactly n_pool - 1 deconvolutions")
        if self.fine_channels != 96 or self.n_classes != 2:
            raise ValueError("fine_channels must be 96 and n_classes 2")
        if self.base_channels < 1 or self.n_pool < 1:
            raise ValueError("base_channels and n_pool must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


class BackboneOutput(NamedTuple):
    probs: torch.Tensor    # (B, 2, D1, D2, D3), sigmoid outputs
    fine: torch.Tensor     # (B, 96, D1/2, D2/2, D3/2)
    logits: torch.Tensor   # (B, 2, D1, D2, D3)


class DilatedBlock(nn.Sequential):
    """Two 3x3x3 convolutions with the given dilations, each followed by
    instance normalization and a leaky ReLU."""

    def __init__(self, cin: int, cout: int, dilations=(1, 2)):
        layers = []
        for i, d in enumerate(dilations):
            layers += [
                nn.Conv3d(cin if i == 0 else cout, cout, 3, padding=d, dilation=d),
                nn.InstanceNorm3d(cout, affine=True),
                nn.LeakyReLU(0.1, inplace=True),
            ]
        super().__init__(*layers)


class UNet3d(nn.Module):
    """3D U-net with ``n_pool`` pooling stages and ``n_up`` transposed-conv
    decoder stages. ``n_up == n_pool`` is the classic symmetric layout."""

    def __init__(self, base_channels: int, n_pool: int, n_up: int, dilations=(1, 2), in_channels: int = 1):
        super().__init__()
        if not 1 <= n_up <= n_pool:
            raise ValueError("n_up must lie in [1, n_pool]")
        self.n_pool = n_pool
        chans = [base_channels * 2 ** level for level in range(n_pool + 1)]
        self.channels = chans
        self.encoder = nn.ModuleList()
        cin = in_channels
        for level in range(n_pool + 1):
            self.encoder.append(DilatedBlock(cin, chans[level], dilations))
            cin = chans[level]
        self.ups = nn.ModuleList()
        self.decoder = nn.ModuleList()
        for level in range(n_pool - 1, n_pool - 1 - n_up, -1):
            self.ups.append(nn.ConvTranspose3d(chans[level + 1], chans[level], 2, stride=2))
            self.decoder.append(DilatedBlock(2 * chans[level], chans[level], dilations))
        self.out_level = n_pool - n_up
        self.out_channels = chans[self.out_level]

    def check_input(self, x: torch.Tensor):
        if x.dim() != 5:
            raise ShapeError(f"expected (B, C, D1, D2, D3) input, got {tuple(x.shape)}")
        factor = 2 ** self.n_pool
        for axis, n in enumerate(x.shape[2:]):
            if n % factor:
                raise ShapeError(
                    f"patch axis {axis} has size {n}, not divisible by {factor}"
                )

    def features(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        skips = []
        for level, block in enumerate(self.encoder):
            x = block(x)
            if level < self.n_pool:
                skips.append(x)
                x = F.max_pool3d(x, 2)
        for up, block in zip(self.ups, self.decoder):
            x = up(x)
            x = block(torch.cat([skips.pop(), x], dim=1))
        return x


class SymmetricUNet3d(UNet3d):
    """Baseline with all ``n_pool`` deconvolutions and a full-resolution head."""

    def __init__(self, base_channels: int = 32, n_pool: int = 4, dilations=(1, 2), in_channels: int = 1, n_classes: int = 2):
        super().__init__(base_channels, n_pool, n_pool, dilations, in_channels)
        self.head = nn.Conv3d(self.out_channels, n_classes, 1)

    def forward(self, x):
        logits = self.head(self.features(x))
        return torch.sigmoid(logits)


class SegmentorBackbone(UNet3d):
    """Decoder stops one stage early; the fine feature map is a 96-channel
    projection of the half-resolution decoder output and the coarse map is
    that projection's 2-channel head, upsampled x2 without parameters."""

    def __init__(self, cfg: BackboneConfig | None = None):
        cfg = cfg or BackboneConfig()
        super().__init__(cfg.base_channels, cfg.n_pool, cfg.n_deconv, cfg.dilation_rates, cfg.in_channels)
        self.cfg = cfg
        self.fine_proj = nn.Sequential(
            nn.Conv3d(self.out_channels, cfg.fine_channels, 1),
            nn.LeakyReLU(0.1, inplace=True),
        )
        self.coarse_head = nn.Conv3d(cfg.fine_channels, cfg.n_classes, 1)

    def forward(self, x: torch.Tensor) -> BackboneOutput:
        fine = self.fine_proj(self.features(x))
        logits = F.interpolate(
            self.coarse_head(fine), scale_factor=2, mode="trilinear", align_corners=False
        )
        return BackboneOutput(torch.sigmoid(logits), fine, logits)


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def param_count(cfg: BackboneConfig, include_heads: bool = False, hidden_width: int = 256) -> int:
    """Exact number of trainable scalars in the segmentor, optionally with
    the rendering-head MLP."""
    from .rendering import RenderingHead

    total = count_trainable(SegmentorBackbone(cfg))
    if include_heads:
        total += count_trainable(
            RenderingHead(cfg.n_classes + cfg.fine_channels, hidden_width, cfg.n_classes)
        )
    return total


def baseline_param_count(cfg: BackboneConfig) -> int:
    """Parameter count of the symmetric 4-deconvolution U-net at the same widths."""
    return count_trainable(
        SymmetricUNet3d(cfg.base_channels, cfg.n_pool, cfg.dilation_rates, cfg.in_channels, cfg.n_classes)
    )
