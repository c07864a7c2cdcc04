"""Batched inference and dataset-level scoring for a trained detector."""

from __future__ import annotations

from typing import Sequence

import torch

from .data import AnnotatedImage
from .evaluation import EvalReport, evaluate
from .head import Detection, decode_detections
from .model import MultiGranularityDetector
from .training import images_to_tensor


@torch.no_grad()
def detect(
    model: MultiGranularityDetector,
    images: Sequence[AnnotatedImage],
    score_threshold: float = 0.01,
    nms_iou: float = 0.5,
    batch_size: int = 16,
) -> list[Detection]:
    model.eval()
    out: list[Detection] = []
    for start in range(0, len(images), batch_size):
        chunk = list(images[start : start + batch_size])
        x = images_to_tensor(chunk)
        res = model(x)
        per_image = decode_detections(
            res.detections,
            score_threshold=score_threshold,
            nms_iou=nms_iou,
            image_size=tuple(x.shape[-2:]),
            image_ids=[im.image_id for im in chunk],
        )
        for dets in per_image:
            out.extend(dets)
    return out


def ground_truth(images: Sequence[AnnotatedImage]) -> dict:
    return {im.image_id: (im.boxes, im.categories) for im in images}


def evaluate_model(
    model: MultiGranularityDetector,
    images: Sequence[AnnotatedImage],
    score_threshold: float = 0.01,
    nms_iou: float = 0.5,
) -> tuple[EvalReport, list[Detection]]:
    dets = detect(model, images, score_threshold, nms_iou)
    return evaluate(dets, ground_truth(images), model.cfg.num_classes), dets
