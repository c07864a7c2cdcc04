"""Synthetic two-domain shapes benchmark and the on-disk annotation format.

Annotation documents are JSON::

    {"categories": ["disk", "square", "triangle"],
     "records": [{"image": "images/x.png", "domain": "source",
                  "objects": [{"bbox": [x1, y1, x2, y2], "category": 0}]}]}

Image paths are relative to the dataset root; images are 8-bit RGB PNGs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .config import SynthConfig

CATEGORIES = ("disk", "square", "triangle")
DOMAINS = ("source", "target")
_SPLIT_CODES = {"train": 0, "eval": 1}


class DatasetError(ValueError):
    pass


@dataclass
class AnnotatedImage:
    image_id: str
    pixels: np.ndarray  # (H, W, 3) float32 in [0, 1]
    domain: str
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), np.float32))
    categories: np.ndarray = field(default_factory=lambda: np.zeros((0,), np.int64))

    @property
    def size(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


# --- rendering -------------------------------------------------------------------------


def _quantize(img: np.ndarray) -> np.ndarray:
    return (np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0).astype(np.float32)


def _shape_mask(category: int, box: tuple[int, int, int, int], size: int) -> np.ndarray:
    x1, y1, x2, y2 = box
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    w, h = x2 - x1, y2 - y1
    if category == 0:  # ellipse inscribed in the box
        cx, cy = x1 + w / 2, y1 + h / 2
        return ((xs - cx) / (w / 2)) ** 2 + ((ys - cy) / (h / 2)) ** 2 <= 1.0
    inside = (xs >= x1) & (xs < x2) & (ys >= y1) & (ys < y2)
    if category == 1:
        return inside
    # isosceles triangle, apex at top-center, base along the bottom edge
    cx = x1 + w / 2
    half = (ys - y1) / h * (w / 2)
    return inside & (np.abs(xs - cx) <= half)


def render_scene(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw a clean scene; returns ``(pixels, boxes, categories)``."""
    size = cfg.image_size
    lo, hi = cfg.size_range
    ys, xs = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.05, 0.3, size=3)
    tilt = rng.uniform(-0.08, 0.08, size=(2, 3))
    img = base + xs[..., None] * tilt[0] + ys[..., None] * tilt[1]
    img = img + 0.03 * rng.standard_normal((size, size, 3))

    count = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    boxes: list[tuple[int, int, int, int]] = []
    cats: list[int] = []
    for _ in range(count):
        for _attempt in range(25):
            long_side = int(round(rng.uniform(lo, hi)))
            short_side = int(round(long_side * rng.uniform(0.6, 1.0)))
            short_side = int(np.clip(short_side, min(lo, long_side), long_side))
            w, h = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
            x1 = int(rng.integers(0, size - w + 1))
            y1 = int(rng.integers(0, size - h + 1))
            box = (x1, y1, x1 + w, y1 + h)
            if all(box[2] <= b[0] or b[2] <= box[0] or box[3] <= b[1] or b[3] <= box[1] for b in boxes):
                break
        else:
            continue
        cat = int(rng.integers(0, cfg.num_classes))
        color = rng.uniform(0.55, 1.0, size=3)
        mask = _shape_mask(cat % len(CATEGORIES), box, size)
        img[mask] = color
        boxes.append(box)
        cats.append(cat)
    return (
        _quantize(img),
        np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
        np.asarray(cats, dtype=np.int64),
    )


def corrupt(img: np.ndarray, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Target-domain appearance shift: Gaussian blur, brightness shift, additive Gaussian noise."""
    out = img.astype(np.float64)
    if cfg.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(cfg.blur_sigma, cfg.blur_sigma, 0), mode="nearest")
    out = out + cfg.brightness_shift
    if cfg.noise_amplitude > 0:
        out = out + cfg.noise_amplitude * rng.standard_normal(out.shape)
    return _quantize(out)


def image_rngs(seed: int, domain: str, split: str, index: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent (scene, corruption) generators derived from the master seed and image index."""
    ss = np.random.SeedSequence([seed, DOMAINS.index(domain), _SPLIT_CODES[split], index])
    scene, noise = ss.spawn(2)
    return np.random.default_rng(scene), np.random.default_rng(noise)


def synthesize(cfg: SynthConfig, n_images: int, domain: str, split: str = "train") -> list[AnnotatedImage]:
    if n_images <= 0:
        raise ValueError(f"n_images must be positive, got {n_images}")
    if domain not in DOMAINS:
        raise ValueError(f"domain must be one of {DOMAINS}")
    if split not in _SPLIT_CODES:
        raise ValueError(f"split must be one of {tuple(_SPLIT_CODES)}")
    cfg.validate()
    out = []
    for i in range(n_images):
        scene_rng, noise_rng = image_rngs(cfg.seed, domain, split, i)
        pixels, boxes, cats = render_scene(cfg, scene_rng)
        if domain == "target":
            pixels = corrupt(pixels, cfg, noise_rng)
        out.append(AnnotatedImage(f"{domain}_{split}_{i:05d}", pixels, domain, boxes, cats))
    return out


# --- on-disk format ---------------------------------------------------------------------


def save_dataset(images: Sequence[AnnotatedImage], root: str | Path,
                 annotation_name: str = "annotations.json",
                 categories: Sequence[str] = CATEGORIES) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for item in images:
        rel = f"images/{item.image_id}.png"
        Image.fromarray(np.round(item.pixels * 255).astype(np.uint8)).save(root / rel)
        records.append(
            {
                "image": rel,
                "domain": item.domain,
                "objects": [
                    {"bbox": [float(v) for v in box], "category": int(cat)}
                    for box, cat in zip(item.boxes, item.categories)
                ],
            }
        )
    path = root / annotation_name
    doc = {"categories": list(categories), "records": records}
    path.write_text(json.dumps(doc, indent=1, sort_keys=True), encoding="utf-8")
    return path


def load_dataset(root: str | Path, annotation_file: str | Path = "annotations.json",
                 num_classes: int | None = None) -> list[AnnotatedImage]:
    """Parse and validate an annotation document; records come back sorted by image id."""
    root = Path(root)
    ann_path = Path(annotation_file)
    if not ann_path.is_absolute():
        ann_path = root / ann_path
    try:
        doc = json.loads(ann_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read annotation file {ann_path}: {exc}") from exc
    if isinstance(doc, list):
        doc = {"records": doc}
    records = doc.get("records")
    if not isinstance(records, list):
        raise DatasetError(f"{ann_path}: missing 'records' list")
    if num_classes is None:
        num_classes = len(doc.get("categories", CATEGORIES))

    items = []
    for idx, rec in enumerate(records):
        where = f"{ann_path} record {idx}"
        try:
            rel, domain, objects = rec["image"], rec["domain"], rec["objects"]
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"{where}: missing field {exc}") from exc
        if domain not in DOMAINS:
            raise DatasetError(f"{where}: unknown domain {domain!r}")
        img_path = root / rel
        if not img_path.is_file():
            raise DatasetError(f"{where}: image file {img_path} not found")
        with Image.open(img_path) as im:
            pixels = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
        height, width = pixels.shape[:2]
        boxes, cats = [], []
        for j, obj in enumerate(objects):
            try:
                x1, y1, x2, y2 = (float(v) for v in obj["bbox"])
                cat = int(obj["category"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{where}, object {j}: malformed object ({exc})") from exc
            if not np.all(np.isfinite([x1, y1, x2, y2])) or x2 < x1 or y2 < y1:
                raise DatasetError(f"{where}, object {j}: invalid box {[x1, y1, x2, y2]}")
            if x1 < 0 or y1 < 0 or x2 > width or y2 > height:
                raise DatasetError(f"{where}, object {j}: box {[x1, y1, x2, y2]} outside {width}x{height} image")
            if not 0 <= cat < num_classes:
                raise DatasetError(f"{where}, object {j}: unknown category {cat}")
            boxes.append((x1, y1, x2, y2))
            cats.append(cat)
        items.append(
            AnnotatedImage(
                Path(rel).stem,
                pixels,
                domain,
                np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
                np.asarray(cats, dtype=np.int64),
            )
        )
    items.sort(key=lambda it: it.image_id)
    return items
