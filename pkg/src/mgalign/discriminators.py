"""Pixel-, instance- and category-level domain discriminators.

Category-level maps carry ``2C`` channels laid out as
``[c0/source, c0/target, c1/source, c1/target, ...]``. Loss functions take
logits with channels on dim 1 and any trailing spatial shape (or none).
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .grl import reverse

SOURCE, TARGET = 0, 1


class DiscriminatorNet(nn.Module):
    """Four conv-GroupNorm-ReLU blocks followed by a 3x3 conv; spatial size is preserved."""

    def __init__(self, in_channels: int, out_channels: int = 1, width: int = 64, groups: int = 16):
        super().__init__()
        layers: list[nn.Module] = []
        cin = in_channels
        for _ in range(4):
            layers += [nn.Conv2d(cin, width, 3, padding=1), nn.GroupNorm(groups, width), nn.ReLU()]
            cin = width
        layers.append(nn.Conv2d(width, out_channels, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class LevelDiscriminators(nn.Module):
    """One binary domain discriminator per pyramid level, each fed through gradient reversal."""

    def __init__(self, num_levels: int, channels: int, width: int = 64, groups: int = 16):
        super().__init__()
        self.nets = nn.ModuleList(DiscriminatorNet(channels, 1, width, groups) for _ in range(num_levels))

    def forward(self, feats: list[torch.Tensor], grl_scale: float = 1.0) -> list[torch.Tensor]:
        return [net(reverse(f, grl_scale)) for net, f in zip(self.nets, feats)]


def domain_labels(domains: torch.Tensor) -> torch.Tensor:
    """Binary target per image: 1 for source, 0 for target."""
    return (domains == SOURCE).to(torch.get_default_dtype())


def pixel_domain_loss(logits: list[torch.Tensor], domains: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy of per-pixel domain logits, averaged over pixels then levels.

    ``logits`` are per-level ``(N, 1, H, W)``; ``domains`` is ``(N,)`` with
    0 = source, 1 = target.
    """
    y = domain_labels(domains).to(logits[0].dtype)
    losses = [
        F.binary_cross_entropy_with_logits(lg, y.view(-1, 1, 1, 1).expand_as(lg)) for lg in logits
    ]
    return torch.stack(losses).mean()


# the instance-level discriminator sees merged features but shares the loss
instance_domain_loss = pixel_domain_loss


# --- category level -------------------------------------------------------------------


def select_important(probs: list[torch.Tensor], theta: float) -> list[torch.Tensor]:
    """Mark cells whose max category probability exceeds ``theta`` times the batch maximum.

    ``probs`` are per-level ``(N, H, W)`` max-over-categories probabilities;
    returns boolean masks of the same shapes.
    """
    if not 0 < theta <= 1:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    peak = max(float(p.max()) for p in probs if p.numel()) if probs else 0.0
    return [p > theta * peak for p in probs]


@dataclass
class PseudoLabels:
    dis: torch.Tensor  # (..., C) one-hot category on selected cells
    sim: torch.Tensor  # (..., 2C) one-hot (category, domain) on selected cells
    selected: torch.Tensor  # (...) bool


def build_pseudo_labels(categories: torch.Tensor, domains: torch.Tensor, selected: torch.Tensor,
                        num_classes: int) -> PseudoLabels:
    """One-hot pseudo labels for selected cells.

    ``categories`` holds the category per cell (detector argmax), ``domains``
    the domain tag per cell (0 source, 1 target) and ``selected`` the mask;
    all share one shape. Unselected cells get all-zero rows.
    """
    dis = F.one_hot(categories.long(), num_classes).to(torch.get_default_dtype())
    sim = F.one_hot(2 * categories.long() + domains.long(), 2 * num_classes).to(dis.dtype)
    keep = selected[..., None].to(dis.dtype)
    return PseudoLabels(dis * keep, sim * keep, selected)


def _rows(x: torch.Tensor) -> torch.Tensor:
    """(N, K, *spatial) -> (P, K); 2-D input passes through."""
    if x.dim() == 2:
        return x
    return x.movedim(1, -1).reshape(-1, x.shape[1])


def category_probs(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over categories of the summed (source + target) logits; channels on dim 1."""
    n = logits.shape[1] // 2
    pair = logits.unflatten(1, (n, 2)).sum(dim=2)
    return torch.softmax(pair, dim=1)


def domain_probs(logits: torch.Tensor) -> torch.Tensor:
    """Two-way softmax within every (source, target) channel pair; channels on dim 1."""
    n = logits.shape[1] // 2
    pairs = logits.unflatten(1, (n, 2))
    return torch.softmax(pairs, dim=2).flatten(1, 2)


def category_discriminability_loss(logits: torch.Tensor, y_dis: torch.Tensor,
                                   selected: torch.Tensor) -> torch.Tensor:
    """Cross-entropy between category-marginal probabilities and pseudo categories over the selected set.

    ``logits``: ``(N, 2C, ...)`` or ``(P, 2C)``; ``y_dis``: matching
    ``(..., C)`` one-hot rows; ``selected``: boolean mask over cells.
    """
    mask = selected.reshape(-1)
    if not mask.any():
        return logits.sum() * 0.0
    n = logits.shape[1] // 2
    rows = _rows(logits)[mask]
    log_p = torch.log_softmax(rows.unflatten(1, (n, 2)).sum(dim=2), dim=1)
    y = y_dis.reshape(-1, n)[mask].to(log_p.dtype)
    return -(y * log_p).sum() / mask.sum()


def category_consistency_loss(logits: torch.Tensor, y_sim: torch.Tensor,
                              selected: torch.Tensor) -> torch.Tensor:
    """Cross-entropy of the within-category domain softmax against pseudo (category, domain) labels.

    Callers pass logits computed on gradient-reversed features; shapes as in
    :func:`category_discriminability_loss` with ``2C`` label channels.
    """
    mask = selected.reshape(-1)
    if not mask.any():
        return logits.sum() * 0.0
    n = logits.shape[1] // 2
    rows = _rows(logits)[mask]
    log_p = torch.log_softmax(rows.unflatten(1, (n, 2)), dim=2).flatten(1, 2)
    y = y_sim.reshape(-1, 2 * n)[mask].to(log_p.dtype)
    return -(y * log_p).sum() / mask.sum()


def category_loss(l_dis: torch.Tensor | float, l_sim: torch.Tensor | float,
                  lambda_dis: float = 1.0, lambda_sim: float = 0.1):
    if lambda_dis < 0 or lambda_sim < 0:
        raise ValueError("balancing factors must be non-negative")
    return lambda_dis * l_dis + lambda_sim * l_sim


class CategoryDiscriminator(nn.Module):
    """Shared-across-levels ``2C``-channel discriminator.

    :meth:`forward` returns two logit sets from one network: the direct path
    (for the discriminability loss) and the gradient-reversed path (for the
    consistency loss).
    """

    def __init__(self, channels: int, num_classes: int, width: int = 64, groups: int = 16):
        super().__init__()
        self.num_classes = num_classes
        self.net = DiscriminatorNet(channels, 2 * num_classes, width, groups)

    def forward(self, feats: list[torch.Tensor], grl_scale: float = 1.0
                ) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
        direct = [self.net(f) for f in feats]
        reversed_ = [self.net(reverse(f, grl_scale)) for f in feats]
        return direct, reversed_
