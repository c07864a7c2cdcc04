"""FCOS-style per-pixel detection head: targets, losses and decoding."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torchvision.ops import batched_nms, sigmoid_focal_loss

from .geometry import BoxXYXY, ltrb_iou_t

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


@dataclass
class DetectionOutputs:
    cls_logits: list[torch.Tensor]  # (N, C, H, W)
    centerness: list[torch.Tensor]  # (N, 1, H, W)
    boxes: list[torch.Tensor]  # (N, 4, H, W) LTRB in pixels, >= 0
    strides: list[int]


@dataclass
class AssignedTargets:
    labels: list[torch.Tensor]  # ([N,] H, W) long, -1 for background
    boxes: list[torch.Tensor]  # ([N,] 4, H, W)
    centerness: list[torch.Tensor]  # ([N,] H, W)
    fg: list[torch.Tensor]  # ([N,] H, W) bool

    @property
    def num_fg(self) -> int:
        return int(sum(int(m.sum()) for m in self.fg))


@dataclass
class Detection:
    box: BoxXYXY
    category: int
    score: float
    image_id: str | None = None

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "bbox": [float(v) for v in self.box],
            "category": int(self.category),
            "score": float(self.score),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Detection":
        return cls(BoxXYXY(*rec["bbox"]), int(rec["category"]), float(rec["score"]), rec.get("image_id"))


# --- target assignment -------------------------------------------------------------


def centerness_target(ltrb: torch.Tensor) -> torch.Tensor:
    """sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)); ``ltrb`` has (l,t,r,b) on dim 0."""
    l, t, r, b = ltrb
    lr = torch.minimum(l, r) / torch.maximum(l, r).clamp_min(1e-12)
    tb = torch.minimum(t, b) / torch.maximum(t, b).clamp_min(1e-12)
    return torch.sqrt((lr * tb).clamp_min(0))


def assign_targets(
    gt_boxes: Sequence[Sequence[float]] | np.ndarray | torch.Tensor,
    gt_labels: Sequence[int] | np.ndarray | torch.Tensor,
    image_size: tuple[int, int],
    strides: Sequence[int],
    ranges: Sequence[tuple[float, float | None]],
) -> AssignedTargets:
    """Assign each grid cell of every level to at most one ground-truth box.

    A cell is foreground at a level when its center lies strictly inside a box
    and the largest of its four LTRB distances falls in that level's
    ``(lo, hi]`` range. Among several candidates the smallest-area box wins.
    """
    boxes = torch.as_tensor(np.asarray(gt_boxes, dtype=np.float32).reshape(-1, 4))
    labels = torch.as_tensor(np.asarray(gt_labels, dtype=np.int64).reshape(-1))
    height, width = image_size
    out = AssignedTargets([], [], [], [])
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for stride, (lo, hi) in zip(strides, ranges):
        h, w = math.ceil(height / stride), math.ceil(width / stride)
        ys = (torch.arange(h, dtype=torch.float32) + 0.5) * stride
        xs = (torch.arange(w, dtype=torch.float32) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        if len(boxes) == 0:
            out.labels.append(torch.full((h, w), -1, dtype=torch.long))
            out.boxes.append(torch.zeros(4, h, w))
            out.centerness.append(torch.zeros(h, w))
            out.fg.append(torch.zeros(h, w, dtype=torch.bool))
            continue
        ltrb = torch.stack(
            (
                cx[None] - boxes[:, 0, None, None],
                cy[None] - boxes[:, 1, None, None],
                boxes[:, 2, None, None] - cx[None],
                boxes[:, 3, None, None] - cy[None],
            ),
            dim=1,
        )  # (G, 4, h, w)
        inside = ltrb.amin(dim=1) > 0
        reach = ltrb.amax(dim=1)
        upper = math.inf if hi is None else hi
        valid = inside & (reach > lo) & (reach <= upper)
        cand_area = torch.where(valid, areas[:, None, None], torch.full_like(reach, math.inf))
        best_area, best = cand_area.min(dim=0)
        fg = torch.isfinite(best_area)
        target = ltrb.gather(0, best[None, None].expand(1, 4, h, w))[0]
        target = torch.where(fg[None], target, torch.zeros_like(target))
        out.labels.append(torch.where(fg, labels[best], torch.full_like(best, -1)))
        out.boxes.append(target)
        out.centerness.append(torch.where(fg, centerness_target(target), torch.zeros(h, w)))
        out.fg.append(fg)
    return out


def stack_targets(items: Sequence[AssignedTargets]) -> AssignedTargets:
    return AssignedTargets(
        labels=[torch.stack(t) for t in zip(*(i.labels for i in items))],
        boxes=[torch.stack(t) for t in zip(*(i.boxes for i in items))],
        centerness=[torch.stack(t) for t in zip(*(i.centerness for i in items))],
        fg=[torch.stack(t) for t in zip(*(i.fg for i in items))],
    )


# --- network ------------------------------------------------------------------------


class DetectionHead(nn.Module):
    """Classification tower plus a shared regression/centerness tower, shared over levels."""

    def __init__(self, channels: int, num_classes: int, num_convs: int = 2, groups: int = 16,
                 prior_prob: float = 0.01):
        super().__init__()
        def tower() -> nn.Sequential:
            layers: list[nn.Module] = []
            for _ in range(num_convs):
                layers += [nn.Conv2d(channels, channels, 3, padding=1), nn.GroupNorm(groups, channels), nn.ReLU()]
            return nn.Sequential(*layers)

        self.cls_tower = tower()
        self.reg_tower = tower()
        self.cls_logits = nn.Conv2d(channels, num_classes, 3, padding=1)
        self.centerness = nn.Conv2d(channels, 1, 3, padding=1)
        self.bbox = nn.Conv2d(channels, 4, 3, padding=1)
        nn.init.constant_(self.cls_logits.bias, -math.log((1 - prior_prob) / prior_prob))

    def forward(self, feats: list[torch.Tensor], strides: list[int]) -> DetectionOutputs:
        cls, ctr, box = [], [], []
        for feat, stride in zip(feats, strides):
            c = self.cls_tower(feat)
            r = self.reg_tower(feat)
            cls.append(self.cls_logits(c))
            ctr.append(self.centerness(r))
            box.append(F.softplus(self.bbox(r)) * stride)
        return DetectionOutputs(cls, ctr, box, list(strides))


# --- loss ------------------------------------------------------------------------------


def _flatten(maps: Iterable[torch.Tensor]) -> torch.Tensor:
    """(N, K, H, W) per level -> (P, K)."""
    return torch.cat([m.permute(0, 2, 3, 1).reshape(-1, m.shape[1]) for m in maps])


def detection_loss(outputs: DetectionOutputs, targets: AssignedTargets) -> dict[str, torch.Tensor]:
    """Focal classification, centerness BCE and IoU regression losses.

    Returns a dict with ``cls``, ``ctr``, ``reg`` and their unweighted sum ``det``.
    ``targets`` must carry a batch dimension matching ``outputs``.
    """
    logits = _flatten(outputs.cls_logits)
    labels = torch.cat([t.reshape(-1) for t in targets.labels])
    fg = labels >= 0
    num_fg = int(fg.sum())
    onehot = torch.zeros_like(logits)
    if num_fg:
        onehot[fg, labels[fg]] = 1.0
    cls = sigmoid_focal_loss(logits, onehot, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA, reduction="sum")
    cls = cls / max(num_fg, 1)
    if num_fg:
        ctr_logits = _flatten(outputs.centerness)[fg, 0]
        ctr_target = torch.cat([t.reshape(-1) for t in targets.centerness])[fg].to(ctr_logits.dtype)
        ctr = F.binary_cross_entropy_with_logits(ctr_logits, ctr_target)
        pred_boxes = _flatten(outputs.boxes)[fg]
        tgt_boxes = _flatten([b if b.dim() == 4 else b[None] for b in targets.boxes])[fg]
        reg = -torch.log(ltrb_iou_t(pred_boxes, tgt_boxes.to(pred_boxes.dtype))).mean()
    else:
        ctr = logits.sum() * 0.0
        reg = logits.sum() * 0.0
    return {"cls": cls, "ctr": ctr, "reg": reg, "det": cls + ctr + reg}


# --- decoding ------------------------------------------------------------------------------


@torch.no_grad()
def decode_detections(
    outputs: DetectionOutputs,
    score_threshold: float = 0.05,
    nms_iou: float = 0.5,
    image_size: tuple[int, int] | None = None,
    max_candidates: int = 1000,
    max_detections: int = 100,
    image_ids: Sequence[str] | None = None,
) -> list[list[Detection]]:
    """Decode every image in the batch into NMS-filtered detections.

    Each (cell, category) pair is a candidate scored by class probability times
    centerness; candidates at or below ``score_threshold`` are dropped.
    """
    if not 0 <= score_threshold <= 1 or not 0 <= nms_iou <= 1:
        raise ValueError("score_threshold and nms_iou must lie in [0, 1]")
    batch = outputs.cls_logits[0].shape[0]
    results: list[list[Detection]] = []
    for n in range(batch):
        all_boxes, all_scores, all_cats = [], [], []
        for logit, ctr, ltrb, stride in zip(outputs.cls_logits, outputs.centerness, outputs.boxes, outputs.strides):
            probs = torch.sigmoid(logit[n]) * torch.sigmoid(ctr[n])  # (C, H, W)
            probs = probs.clamp(0, 1)
            cats, ys, xs = torch.nonzero(probs > score_threshold, as_tuple=True)
            if len(cats) == 0:
                continue
            scores = probs[cats, ys, xs]
            cx = (xs.to(probs.dtype) + 0.5) * stride
            cy = (ys.to(probs.dtype) + 0.5) * stride
            l, t, r, b = ltrb[n][:, ys, xs]
            boxes = torch.stack((cx - l, cy - t, cx + r, cy + b), dim=1)
            all_boxes.append(boxes)
            all_scores.append(scores)
            all_cats.append(cats)
        if not all_boxes:
            results.append([])
            continue
        boxes = torch.cat(all_boxes)
        scores = torch.cat(all_scores)
        cats = torch.cat(all_cats)
        if image_size is not None:
            boxes[:, 0::2] = boxes[:, 0::2].clamp(0, image_size[1])
            boxes[:, 1::2] = boxes[:, 1::2].clamp(0, image_size[0])
        if len(scores) > max_candidates:
            top = scores.topk(max_candidates).indices
            boxes, scores, cats = boxes[top], scores[top], cats[top]
        keep = batched_nms(boxes.float(), scores.float(), cats, nms_iou)[:max_detections]
        image_id = image_ids[n] if image_ids is not None else None
        results.append(
            [
                Detection(BoxXYXY(*boxes[k].tolist()), int(cats[k]), float(scores[k]), image_id)
                for k in keep.tolist()
            ]
        )
    return results


def write_detections(path: str | Path, detections: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(det.to_record()) + "\n")


def read_detections(path: str | Path) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        return [Detection.from_record(json.loads(line)) for line in fh if line.strip()]
