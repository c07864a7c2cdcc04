"""mAP@0.5 with area-stratified variants, and an exhaustive oracle for small instances."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import box_iou_matrix
from .head import Detection

AREA_RANGES = {
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, math.inf),
}


def _area(box: Sequence[float]) -> float:
    return max(box[2] - box[0], 0.0) * max(box[3] - box[1], 0.0)


def _in_range(area: float, area_range: tuple[float, float] | None) -> bool:
    if area_range is None:
        return True
    lo, hi = area_range
    # first bucket is closed at 0: [0, 32^2], later ones (lo, hi]
    return (lo < area or (lo == 0 and area == 0)) and area <= hi


def _det_order(dets: Sequence[tuple]) -> list[int]:
    """Indices by descending score; ties broken by image id then box for order independence."""
    return sorted(range(len(dets)), key=lambda i: (-dets[i][2], str(dets[i][0]), tuple(dets[i][1])))


def match_detections(
    dets: Sequence[tuple[str, Sequence[float], float]],
    gts: Mapping[str, Sequence[Sequence[float]]],
    iou_threshold: float = 0.5,
    area_range: tuple[float, float] | None = None,
) -> tuple[list[int], int]:
    """Greedy matching in score order.

    Returns per-detection flags in score order (1 TP, 0 FP, -1 ignored) and
    the number of non-ignored ground truths. Each detection takes the
    highest-IoU unmatched in-range GT; failing that, an unmatched
    out-of-range GT makes it ignored. Unmatched detections whose own area lies
    outside ``area_range`` are ignored as well.
    """
    gt_arrays = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in gts.items()}
    ignore = {k: np.array([not _in_range(_area(b), area_range) for b in v], dtype=bool)
              for k, v in gt_arrays.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gt_arrays.items()}
    npos = int(sum((~ig).sum() for ig in ignore.values()))
    flags = []
    for i in _det_order(dets):
        image_id, box, _ = dets[i]
        boxes = gt_arrays.get(image_id)
        flag = 0
        if boxes is not None and len(boxes):
            ious = box_iou_matrix(np.asarray(box)[None], boxes)[0]
            for want_ignored in (False, True):
                cand = (~used[image_id]) & (ignore[image_id] == want_ignored) & (ious >= iou_threshold)
                if cand.any():
                    j = int(np.argmax(np.where(cand, ious, -1.0)))
                    used[image_id][j] = True
                    flag = -1 if want_ignored else 1
                    break
        if flag == 0 and not _in_range(_area(box), area_range):
            flag = -1
        flags.append(flag)
    return flags, npos


def ap_from_flags(flags: Sequence[int], npos: int) -> float | None:
    """All-point interpolated AP (area under the monotone precision envelope)."""
    if npos == 0:
        return None
    f = np.asarray([x for x in flags if x >= 0], dtype=np.float64)
    if f.size == 0:
        return 0.0
    tp = np.cumsum(f)
    fp = np.cumsum(1.0 - f)
    recall = tp / npos
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def average_precision(
    dets: Sequence[tuple[str, Sequence[float], float]],
    gts: Mapping[str, Sequence[Sequence[float]]],
    iou_threshold: float = 0.5,
    area_range: tuple[float, float] | None = None,
) -> float | None:
    """AP for one category. ``dets`` are ``(image_id, xyxy, score)``; ``gts`` maps image id to boxes.

    Returns ``None`` when no ground truth falls in ``area_range``.
    """
    flags, npos = match_detections(dets, gts, iou_threshold, area_range)
    return ap_from_flags(flags, npos)


# --- oracle ---------------------------------------------------------------------------------


class OracleSizeError(ValueError):
    pass


def oracle_average_precision(
    dets: Sequence[tuple[str, Sequence[float], float]],
    gts: Mapping[str, Sequence[Sequence[float]]],
    iou_threshold: float = 0.5,
    area_range: tuple[float, float] | None = None,
    max_dets: int = 8,
    max_gts: int = 4,
) -> float | None:
    """Brute-force AP for tiny instances.

    Enumerates every injective detection-to-GT assignment with IoU at or above
    the threshold, keeps the one that is lexicographically best when read in
    score order (in-range match over out-of-range match over none, then higher
    IoU, then lower GT index) -- the assignment a greedy matcher must produce --
    and integrates the PR curve by summing, over each recall step, the best
    precision reachable at that recall or beyond.
    """
    gt_list = [(img, tuple(map(float, b))) for img, boxes in gts.items() for b in boxes]
    if len(dets) > max_dets or len(gt_list) > max_gts:
        raise OracleSizeError(f"oracle limited to {max_dets} detections and {max_gts} GTs")
    gt_ignored = [not _in_range(_area(b), area_range) for _, b in gt_list]
    npos = gt_ignored.count(False)
    if npos == 0:
        return None
    order = _det_order(dets)
    ranked = [dets[i] for i in order]

    def pair_iou(det, g) -> float:
        if det[0] != gt_list[g][0]:
            return 0.0
        a, b = det[1], gt_list[g][1]
        iw = min(a[2], b[2]) - max(a[0], b[0])
        ih = min(a[3], b[3]) - max(a[1], b[1])
        inter = max(iw, 0.0) * max(ih, 0.0)
        union = _area(a) + _area(b) - inter
        return inter / union if union > 0 else 0.0

    choices = [[None] + [g for g in range(len(gt_list)) if pair_iou(d, g) >= iou_threshold] for d in ranked]
    best_key, best = None, None
    for assignment in itertools.product(*choices):
        taken = [g for g in assignment if g is not None]
        if len(taken) != len(set(taken)):
            continue
        key = tuple(
            (0, 0.0, 0) if g is None else (1 if gt_ignored[g] else 2, pair_iou(d, g), -g)
            for d, g in zip(ranked, assignment)
        )
        if best_key is None or key > best_key:
            best_key, best = key, assignment

    tps, fps, points = 0, 0, []
    for det, g in zip(ranked, best):
        if g is None:
            if not _in_range(_area(det[1]), area_range):
                continue
            fps += 1
        elif gt_ignored[g]:
            continue
        else:
            tps += 1
        points.append((tps / npos, tps / (tps + fps)))
    total = 0.0
    for step in range(1, npos + 1):
        reachable = [p for r, p in points if r >= step / npos - 1e-12]
        total += max(reachable, default=0.0)
    return total / npos


# --- dataset-level report ---------------------------------------------------------------------


@dataclass
class EvalReport:
    per_category_ap: list[float | None]
    map: float
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    num_gt: int
    num_detections: int
    per_category_ap_by_area: dict[str, list[float | None]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def evaluate(
    detections: Sequence[Detection],
    ground_truth: Mapping[str, tuple[np.ndarray, np.ndarray]],
    num_classes: int,
    iou_threshold: float = 0.5,
    area_ranges: Mapping[str, tuple[float, float]] = AREA_RANGES,
) -> EvalReport:
    """Score detections against ``ground_truth[image_id] = (boxes, categories)``."""
    per_cat: dict[str | None, list[float | None]] = {None: []}
    per_cat.update({name: [] for name in area_ranges})
    for c in range(num_classes):
        dets = [(d.image_id, tuple(d.box), d.score) for d in detections if d.category == c]
        gts = {img: boxes[cats == c] for img, (boxes, cats) in ground_truth.items()}
        per_cat[None].append(average_precision(dets, gts, iou_threshold))
        for name, rng in area_ranges.items():
            per_cat[name].append(average_precision(dets, gts, iou_threshold, rng))
    return EvalReport(
        per_category_ap=per_cat[None],
        map=_mean_defined(per_cat[None]) or 0.0,
        ap_small=_mean_defined(per_cat.get("small", [])),
        ap_medium=_mean_defined(per_cat.get("medium", [])),
        ap_large=_mean_defined(per_cat.get("large", [])),
        num_gt=int(sum(len(c) for _, c in ground_truth.values())),
        num_detections=len(detections),
        per_category_ap_by_area={k: v for k, v in per_cat.items() if k is not None},
    )


def pr_curve(
    dets: Sequence[tuple[str, Sequence[float], float]],
    gts: Mapping[str, Sequence[Sequence[float]]],
    iou_threshold: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    flags, npos = match_detections(dets, gts, iou_threshold)
    f = np.asarray([x for x in flags if x >= 0], dtype=np.float64)
    if npos == 0 or f.size == 0:
        return np.zeros(0), np.zeros(0)
    tp, fp = np.cumsum(f), np.cumsum(1 - f)
    return tp / npos, tp / (tp + fp)
