"""Omni-scale gated fusion.

A guidance head predicts a coarse LTRB box per pixel. Its stride-normalised
size is compared with the footprint of six parallel convolution branches
(three kernel shapes in a low-resolution and a stride-2 high-resolution
stream); a temperature softmax over those overlaps weights the branch outputs,
and a 1x1 residual path is added on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .config import FUSION_MODES
from .geometry import kernel_iou_t, ltrb_iou_t, normalized_scale_t


@dataclass(frozen=True)
class GateBranch:
    kernel: tuple[int, int]  # (kh, kw), as passed to nn.Conv2d
    stream: str  # "low" | "high"

    @property
    def effective_size(self) -> tuple[float, float]:
        """(width, height) of the branch footprint in stride units."""
        kh, kw = self.kernel
        factor = 2.0 if self.stream == "high" else 1.0
        return (factor * kw, factor * kh)

    @property
    def name(self) -> str:
        return f"{self.stream}_{self.kernel[0]}x{self.kernel[1]}"


KERNELS = ((3, 3), (3, 5), (5, 3))
BRANCHES: tuple[GateBranch, ...] = tuple(
    GateBranch(k, stream) for stream in ("low", "high") for k in KERNELS
)


# --- losses and pure functions ----------------------------------------------------


def guidance_loss(
    preds: list[torch.Tensor],
    targets: list[torch.Tensor],
    fg_masks: list[torch.Tensor],
    normalize: bool = False,
) -> torch.Tensor:
    """Sum of ``-ln IoU`` between predicted and target LTRB boxes over foreground pixels.

    Parameters
    ----------
    preds, targets
        Per-level ``(N, 4, H, W)`` LTRB maps.
    fg_masks
        Per-level ``(N, H, W)`` boolean masks.
    normalize
        Divide by the number of foreground pixels instead of summing.
    """
    total = preds[0].new_zeros(())
    count = 0
    for pred, target, mask in zip(preds, targets, fg_masks):
        if not mask.any():
            continue
        p = pred.permute(0, 2, 3, 1)[mask]
        t = target.permute(0, 2, 3, 1)[mask]
        total = total - torch.log(ltrb_iou_t(p, t)).sum()
        count += int(mask.sum())
    if normalize and count:
        total = total / count
    return total


def gate_mask(
    scales: torch.Tensor,
    branches: tuple[GateBranch, ...] = BRANCHES,
    tau: float = 10.0,
) -> torch.Tensor:
    """Per-pixel softmax over branch overlaps.

    ``scales`` is ``(N, 2, H, W)`` holding stride-normalised (w, h); returns
    ``(N, len(branches), H, W)``.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    overlaps = torch.stack([kernel_iou_t(scales, b.effective_size) for b in branches], dim=1)
    return gate_from_overlaps(overlaps, tau)


def gate_from_overlaps(overlaps: torch.Tensor, tau: float) -> torch.Tensor:
    shifted = tau * (overlaps - overlaps.amax(dim=1, keepdim=True))
    weights = shifted.exp()
    return weights / weights.sum(dim=1, keepdim=True)


def fuse(
    branch_outputs: list[torch.Tensor],
    gate: torch.Tensor,
    residual: torch.Tensor,
) -> torch.Tensor:
    """Gate-weighted sum of branch feature maps plus the residual path."""
    if gate.shape[1] != len(branch_outputs):
        raise ValueError(f"gate has {gate.shape[1]} channels for {len(branch_outputs)} branches")
    out = residual
    for idx, feat in enumerate(branch_outputs):
        if feat.shape != residual.shape or feat.shape[-2:] != gate.shape[-2:]:
            raise ValueError(
                f"branch {idx} shape {tuple(feat.shape)} incompatible with residual "
                f"{tuple(residual.shape)} / gate {tuple(gate.shape)}"
            )
        out = out + feat * gate[:, idx : idx + 1]
    return out


# --- modules ---------------------------------------------------------------------------


class GuidanceHead(nn.Module):
    """Conv stack predicting a non-negative LTRB box (in pixels) per location, shared across levels."""

    def __init__(self, channels: int, num_convs: int = 2, groups: int = 16):
        super().__init__()
        layers: list[nn.Module] = []
        for _ in range(num_convs):
            layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.GroupNorm(groups, channels), nn.ReLU()]
        self.tower = nn.Sequential(*layers)
        self.pred = nn.Conv2d(channels, 4, 3, padding=1)

    def forward(self, feats: list[torch.Tensor], strides: list[int]) -> list[torch.Tensor]:
        return [F.softplus(self.pred(self.tower(f))) * s for f, s in zip(feats, strides)]


class GatedFusion(nn.Module):
    """Six scale-specific branches merged per pixel; ``mode`` selects the merge rule.

    ``gated`` uses the guidance-driven gate, ``average`` a uniform 1/6 gate,
    ``conv1x1`` a learned 1x1 conv over the concatenated branches, and ``none``
    passes the input through unchanged.
    """

    def __init__(self, channels: int, mode: str = "gated", tau: float = 10.0):
        super().__init__()
        if mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.tau = tau
        self.branches = BRANCHES
        if mode == "none":
            return
        self.low = nn.ModuleList(
            nn.Conv2d(channels, channels, k, padding=(k[0] // 2, k[1] // 2)) for k in KERNELS
        )
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.high = nn.ModuleList(
            nn.Conv2d(channels, channels, k, padding=(k[0] // 2, k[1] // 2)) for k in KERNELS
        )
        self.residual = nn.Conv2d(channels, channels, 1)
        if mode == "conv1x1":
            self.mix = nn.Conv2d(channels * len(BRANCHES), channels, 1)

    def branch_outputs(self, feat: torch.Tensor) -> list[torch.Tensor]:
        outs = [F.relu(conv(feat)) for conv in self.low]
        down = F.relu(self.down(feat))
        size = feat.shape[-2:]
        for conv in self.high:
            outs.append(F.interpolate(F.relu(conv(down)), size=size, mode="nearest"))
        return outs

    def forward(
        self, feat: torch.Tensor, guidance: torch.Tensor, stride: int
    ) -> tuple[torch.Tensor, torch.Tensor | None]:
        """Return merged features and the gate used (``None`` for conv1x1/none)."""
        if self.mode == "none":
            return feat, None
        outs = self.branch_outputs(feat)
        residual = self.residual(feat)
        if self.mode == "conv1x1":
            return self.mix(torch.cat(outs, dim=1)) + residual, None
        if self.mode == "average":
            n, _, h, w = feat.shape
            gate = feat.new_full((n, len(outs), h, w), 1.0 / len(outs))
        else:
            scales = normalized_scale_t(guidance.detach(), stride)
            gate = gate_mask(scales, self.branches, self.tau)
        return fuse(outs, gate, residual), gate

