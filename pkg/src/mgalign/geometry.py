"""Box arithmetic shared by the fusion gate, the detection head and evaluation.

Scalar helpers operate on small named tuples and validate their inputs; the
``*_t`` variants are vectorised torch versions used inside the network and
assume already-valid tensors.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np
import torch


class InvalidBoxError(ValueError):
    pass


class BoxXYXY(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)


class BoxLTRB(NamedTuple):
    l: float
    t: float
    r: float
    b: float


class NormalizedScale(NamedTuple):
    w: float
    h: float


def _check_xyxy(box: Sequence[float]) -> BoxXYXY:
    box = BoxXYXY(*map(float, box))
    if not all(math.isfinite(v) for v in box):
        raise InvalidBoxError(f"non-finite box coordinates: {tuple(box)}")
    if box.x2 < box.x1 or box.y2 < box.y1:
        raise InvalidBoxError(f"box has x2 < x1 or y2 < y1: {tuple(box)}")
    return box


def iou(a: Sequence[float], c: Sequence[float]) -> float:
    """Intersection over union of two xyxy boxes; 0 when the union is empty."""
    a, c = _check_xyxy(a), _check_xyxy(c)
    iw = min(a.x2, c.x2) - max(a.x1, c.x1)
    ih = min(a.y2, c.y2) - max(a.y1, c.y1)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = a.area + c.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def pixel_center(pixel: tuple[int, int], stride: float) -> tuple[float, float]:
    """Image-space center of grid cell ``pixel = (ix, iy)`` (column, row)."""
    ix, iy = pixel
    return (ix + 0.5) * stride, (iy + 0.5) * stride


def ltrb_to_xyxy(box: Sequence[float], pixel: tuple[int, int], stride: float) -> BoxXYXY:
    """Decode distances measured from a grid cell's center into an xyxy box.

    ``pixel`` is ``(ix, iy)``, i.e. column then row.
    """
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    box = BoxLTRB(*map(float, box))
    if any(v < 0 or not math.isfinite(v) for v in box):
        raise InvalidBoxError(f"LTRB components must be finite and >= 0: {tuple(box)}")
    cx, cy = pixel_center(pixel, stride)
    return BoxXYXY(cx - box.l, cy - box.t, cx + box.r, cy + box.b)


def xyxy_to_ltrb(box: Sequence[float], pixel: tuple[int, int], stride: float) -> BoxLTRB:
    """Inverse of :func:`ltrb_to_xyxy`. Components are negative for cells outside the box."""
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    box = _check_xyxy(box)
    cx, cy = pixel_center(pixel, stride)
    return BoxLTRB(cx - box.x1, cy - box.y1, box.x2 - cx, box.y2 - cy)


def normalized_scale(pred: Sequence[float], stride: float) -> NormalizedScale:
    if stride <= 0:
        raise ValueError(f"stride must be positive, got {stride}")
    l, t, r, b = map(float, pred)
    return NormalizedScale((r + l) / stride, (b + t) / stride)


def kernel_iou(scale: Sequence[float], kernel: Sequence[float]) -> float:
    """IoU between a box of size ``scale`` and a kernel footprint, both centered at the origin.

    Both sizes are ``(width, height)`` in stride units.
    """
    w, h = map(float, scale)
    kw, kh = map(float, kernel)
    if kw <= 0 or kh <= 0:
        raise ValueError(f"kernel sides must be positive, got {(kw, kh)}")
    inter = min(w, kw) * min(h, kh)
    union = w * h + kw * kh - inter
    if union <= 0.0:
        return 0.0
    return inter / union


# --- vectorised variants -------------------------------------------------------


def ltrb_iou_t(pred: torch.Tensor, target: torch.Tensor, eps: float = 1e-7) -> torch.Tensor:
    """IoU between LTRB boxes anchored at the same location; last dim is (l, t, r, b)."""
    pl, pt, pr, pb = pred.unbind(-1)
    tl, tt, tr, tb = target.unbind(-1)
    pred_area = (pl + pr) * (pt + pb)
    target_area = (tl + tr) * (tt + tb)
    inter = (torch.minimum(pl, tl) + torch.minimum(pr, tr)) * (
        torch.minimum(pt, tt) + torch.minimum(pb, tb)
    )
    union = pred_area + target_area - inter
    return (inter + eps) / (union + eps)


def normalized_scale_t(pred: torch.Tensor, stride: float, dim: int = 1) -> torch.Tensor:
    """Stride-normalised (w, h) from an LTRB tensor whose channels lie on ``dim``."""
    l, t, r, b = pred.unbind(dim)
    return torch.stack(((l + r) / stride, (t + b) / stride), dim=dim)


def kernel_iou_t(scale: torch.Tensor, kernel: tuple[float, float], dim: int = 1) -> torch.Tensor:
    w, h = scale.unbind(dim)
    kw, kh = kernel
    inter = torch.clamp(w, max=kw) * torch.clamp(h, max=kh)
    union = w * h + kw * kh - inter
    return inter / union.clamp_min(1e-12)


def box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]).clip(0) * (a[:, 3] - a[:, 1]).clip(0)
    area_b = (b[:, 2] - b[:, 0]).clip(0) * (b[:, 3] - b[:, 1]).clip(0)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clip(0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out
