"""Gradient reversal: identity forward, ``-scale * grad`` backward."""

from __future__ import annotations

import torch
from torch import nn


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return -ctx.scale * grad_output, None


def reverse(x: torch.Tensor, scale: float = 1.0) -> torch.Tensor:
    if scale < 0:
        raise ValueError(f"reversal scale must be >= 0, got {scale}")
    return _ReverseGrad.apply(x, scale)


class GradientReversal(nn.Module):
    def __init__(self, scale: float = 1.0):
        super().__init__()
        if scale < 0:
            raise ValueError(f"reversal scale must be >= 0, got {scale}")
        self.scale = scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return reverse(x, self.scale)

    def extra_repr(self) -> str:
        return f"scale={self.scale}"
