"""Small strided conv backbone with a top-down feature pyramid."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import LEVEL_STRIDES, ConfigError


@dataclass
class FeaturePyramid:
    levels: list[int]
    maps: list[torch.Tensor]  # each (N, D, H_k, W_k)
    strides: list[int]

    def __len__(self) -> int:
        return len(self.maps)

    def __iter__(self):
        return iter(zip(self.levels, self.maps, self.strides))


def conv_block(cin: int, cout: int, stride: int = 1, norm: bool = False, groups: int = 8) -> nn.Sequential:
    layers: list[nn.Module] = [nn.Conv2d(cin, cout, 3, stride=stride, padding=1)]
    if norm:
        layers.append(nn.GroupNorm(min(groups, cout), cout))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class Backbone(nn.Module):
    """Five stride-2 stages; returns C3, C4, C5 (strides 8, 16, 32).

    Like VGG, the default has no normalisation layers, so global appearance
    statistics of the input reach the features.
    """

    def __init__(self, widths: tuple[int, ...] = (16, 32, 48, 64, 96), norm: bool = False):
        super().__init__()
        w = widths
        self.stem = conv_block(3, w[0], 2, norm)  # /2
        self.stage2 = conv_block(w[0], w[1], 2, norm)  # /4
        self.stage3 = conv_block(w[1], w[2], 2, norm)  # /8
        self.stage4 = conv_block(w[2], w[3], 2, norm)  # /16
        self.stage5 = conv_block(w[3], w[4], 2, norm)  # /32
        self.out_channels = (w[2], w[3], w[4])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.stage2(self.stem(x))
        c3 = self.stage3(x)
        c4 = self.stage4(c3)
        c5 = self.stage5(c4)
        return [c3, c4, c5]


class PyramidExtractor(nn.Module):
    """Backbone + FPN producing the requested pyramid levels with ``channels`` each.

    Levels 6 and 7 are produced by extra stride-2 convs on P5 when requested.
    """

    def __init__(self, levels: tuple[int, ...] = (3, 4, 5), channels: int = 64, norm: bool = False):
        super().__init__()
        if not levels or any(k not in LEVEL_STRIDES for k in levels):
            raise ConfigError(f"unsupported pyramid levels {levels}")
        self.levels = tuple(levels)
        self.strides = tuple(LEVEL_STRIDES[k] for k in self.levels)
        self.backbone = Backbone(norm=norm)
        self.lateral = nn.ModuleList(nn.Conv2d(c, channels, 1) for c in self.backbone.out_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(channels, channels, 3, padding=1) for _ in range(3))
        self.extra = nn.ModuleList()
        for k in (6, 7):
            if max(self.levels) >= k:
                self.extra.append(nn.Conv2d(channels, channels, 3, stride=2, padding=1))

    def check_input(self, height: int, width: int) -> None:
        largest = max(self.strides)
        if height % largest or width % largest:
            raise ConfigError(
                f"image size {height}x{width} is not divisible by the largest stride {largest}"
            )

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        self.check_input(images.shape[-2], images.shape[-1])
        c3, c4, c5 = self.backbone(images)
        p5 = self.lateral[2](c5)
        p4 = self.lateral[1](c4) + F.interpolate(p5, size=c4.shape[-2:], mode="nearest")
        p3 = self.lateral[0](c3) + F.interpolate(p4, size=c3.shape[-2:], mode="nearest")
        outs = {3: self.smooth[0](p3), 4: self.smooth[1](p4), 5: self.smooth[2](p5)}
        top = outs[5]
        for k, conv in zip((6, 7), self.extra):
            top = conv(F.relu(top) if k == 7 else top)
            outs[k] = top
        return FeaturePyramid(
            levels=list(self.levels),
            maps=[outs[k] for k in self.levels],
            strides=list(self.strides),
        )
