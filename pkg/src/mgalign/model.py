"""The full detector: pyramid -> guidance -> fusion -> head, plus the three discriminators."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .backbone import FeaturePyramid, PyramidExtractor
from .config import ModelConfig
from .discriminators import CategoryDiscriminator, LevelDiscriminators
from .fusion import GatedFusion, GuidanceHead
from .head import DetectionHead, DetectionOutputs


@dataclass
class ForwardResult:
    pyramid: FeaturePyramid
    guidance: list[torch.Tensor]
    merged: list[torch.Tensor]
    gates: list[torch.Tensor | None]
    detections: DetectionOutputs


class MultiGranularityDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        d = cfg.channels
        self.pyramid = PyramidExtractor(cfg.levels, d, cfg.backbone_norm)
        self.guidance = GuidanceHead(d, cfg.head_convs, cfg.gn_groups)
        self.fusion = GatedFusion(d, cfg.fusion_mode, cfg.tau)
        self.head = DetectionHead(d, cfg.num_classes, cfg.head_convs, cfg.gn_groups)
        n = len(cfg.levels)
        self.pixel_disc = LevelDiscriminators(n, d, cfg.disc_channels, cfg.gn_groups)
        self.instance_disc = LevelDiscriminators(n, d, cfg.disc_channels, cfg.gn_groups)
        self.category_disc = CategoryDiscriminator(d, cfg.num_classes, cfg.disc_channels, cfg.gn_groups)

    @property
    def strides(self) -> list[int]:
        return list(self.pyramid.strides)

    def forward(self, images: torch.Tensor, guidance: list[torch.Tensor] | None = None) -> ForwardResult:
        """Full forward pass; ``guidance`` replaces the predicted coarse boxes when given."""
        pyr = self.pyramid(images)
        if guidance is None:
            guidance = self.guidance(pyr.maps, pyr.strides)
        merged, gates = [], []
        for feat, guide, stride in zip(pyr.maps, guidance, pyr.strides):
            m, g = self.fusion(feat, guide, stride)
            merged.append(m)
            gates.append(g)
        dets = self.head(merged, pyr.strides)
        return ForwardResult(pyr, guidance, merged, gates, dets)
