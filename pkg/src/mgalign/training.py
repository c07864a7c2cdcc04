"""Two-stage adversarial training.

Stage 1 trains detection plus pixel- and instance-level alignment at the
native resolution. Stage 2 continues from the stage-1 parameters, adding the
category-level discriminator and multi-scale resizing.
"""

from __future__ import annotations

import json
import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainConfig, from_dict, to_dict
from .data import AnnotatedImage
from .discriminators import (
    SOURCE,
    TARGET,
    build_pseudo_labels,
    category_consistency_loss,
    category_discriminability_loss,
    category_loss,
    instance_domain_loss,
    pixel_domain_loss,
    select_important,
)
from .fusion import guidance_loss
from .head import DetectionOutputs, assign_targets, detection_loss, stack_targets
from .model import MultiGranularityDetector

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
LOSS_KEYS = ("gui", "det", "cls", "ctr", "reg", "pix", "ins", "dis", "sim", "cat", "total")


class InvalidBatchError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, component: str, iteration: int):
        super().__init__(f"non-finite loss component {component!r} at iteration {iteration}")
        self.component = component
        self.iteration = iteration


class CheckpointError(ValueError):
    pass


@dataclass
class DomainBatch:
    source: list[AnnotatedImage]
    target: list[AnnotatedImage] = field(default_factory=list)

    def validate(self) -> None:
        if not self.source:
            raise InvalidBatchError("batch has no source image")
        sizes = {im.size for im in self.source + self.target}
        if len(sizes) != 1:
            raise InvalidBatchError(f"images in a batch must share one size, got {sorted(sizes)}")


def images_to_tensor(images: Sequence[AnnotatedImage]) -> torch.Tensor:
    arr = np.stack([im.pixels for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).to(torch.get_default_dtype())


def resize(image: AnnotatedImage, side: int) -> AnnotatedImage:
    """Bilinear resize to ``side x side`` with boxes scaled accordingly."""
    h, w = image.size
    if (h, w) == (side, side):
        return image
    t = images_to_tensor([image])
    t = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    pixels = t[0].permute(1, 2, 0).numpy().astype(np.float32)
    scale = np.array([side / w, side / h, side / w, side / h], dtype=np.float32)
    return AnnotatedImage(image.image_id, pixels, image.domain, image.boxes * scale, image.categories)


def _slice_outputs(out: DetectionOutputs, n: int) -> DetectionOutputs:
    return DetectionOutputs(
        [c[:n] for c in out.cls_logits], [c[:n] for c in out.centerness], [b[:n] for b in out.boxes], out.strides
    )


def _cells(maps: list[torch.Tensor]) -> torch.Tensor:
    """Per-level (N, K, H, W) -> (cells, K) in level-major, then (n, y, x) order."""
    return torch.cat([m.movedim(1, -1).reshape(-1, m.shape[1]) for m in maps])


def total_loss(
    model: MultiGranularityDetector,
    batch: DomainBatch,
    stage: int,
    cfg: TrainConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Overall objective ``(gui + det) + alpha * (pix + ins + cat)`` and its breakdown.

    Detection terms use the source images only. With ``alpha == 0`` the
    discriminators are not evaluated and their components are reported as 0.
    The category term is always 0 in stage 1.
    """
    batch.validate()
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    images = batch.source + batch.target
    x = images_to_tensor(images)
    ns = len(batch.source)
    domains = torch.tensor([SOURCE] * ns + [TARGET] * len(batch.target))
    res = model(x)
    strides = res.pyramid.strides
    height, width = x.shape[-2:]

    targets = stack_targets(
        [assign_targets(im.boxes, im.categories, (height, width), strides, model.cfg.level_ranges)
         for im in batch.source]
    )
    src_out = _slice_outputs(res.detections, ns)
    l_gui = guidance_loss([g[:ns] for g in res.guidance], targets.boxes, targets.fg, normalize=True)
    det = detection_loss(src_out, targets)

    zero = x.new_zeros(())
    l_pix = l_ins = l_dis = l_sim = l_cat = zero
    n_selected = 0
    if cfg.alpha > 0:
        l_pix = pixel_domain_loss(model.pixel_disc(res.pyramid.maps), domains)
        l_ins = instance_domain_loss(model.instance_disc(res.merged), domains)
        if stage == 2 and cfg.use_category_discriminator:
            with torch.no_grad():
                probs = [torch.sigmoid(c) for c in res.detections.cls_logits]
                peak = [p.max(dim=1) for p in probs]
                selected = select_important([pk.values for pk in peak], cfg.theta_cat)
                cats = [pk.indices for pk in peak]
                if cfg.source_pseudo_labels == "gt":
                    for lvl, (lab, fg) in enumerate(zip(targets.labels, targets.fg)):
                        cats[lvl][:ns] = torch.where(fg, lab, cats[lvl][:ns])
                        selected[lvl][:ns] = fg
                cell_domains = [domains.view(-1, 1, 1).expand_as(c) for c in cats]
                sel = torch.cat([s.reshape(-1) for s in selected])
                pseudo = build_pseudo_labels(
                    torch.cat([c.reshape(-1) for c in cats]),
                    torch.cat([d.reshape(-1) for d in cell_domains]),
                    sel,
                    model.cfg.num_classes,
                )
                n_selected = int(sel.sum())
            direct, reversed_ = model.category_disc(res.merged)
            l_dis = category_discriminability_loss(_cells(direct), pseudo.dis, sel)
            l_sim = category_consistency_loss(_cells(reversed_), pseudo.sim, sel)
            l_cat = category_loss(l_dis, l_sim, cfg.lambda_dis, cfg.lambda_sim)

    total = (l_gui + det["det"]) + cfg.alpha * (l_pix + l_ins + l_cat)
    parts = {
        "gui": l_gui, "det": det["det"], "cls": det["cls"], "ctr": det["ctr"], "reg": det["reg"],
        "pix": l_pix, "ins": l_ins, "dis": l_dis, "sim": l_sim, "cat": l_cat, "total": total,
    }
    breakdown = {k: float(v.detach()) for k, v in parts.items()}
    breakdown["num_selected"] = n_selected
    return total, breakdown


# --- state and checkpoints -----------------------------------------------------------------


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


@dataclass
class TrainState:
    model: MultiGranularityDetector
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    train_cfg: TrainConfig
    iteration: int = 0
    running: dict[str, float] = field(default_factory=dict)

    @property
    def stage(self) -> int:
        return 1 if self.iteration < self.train_cfg.stage1_iters else 2

    @property
    def total_iters(self) -> int:
        return self.train_cfg.stage1_iters + self.train_cfg.stage2_iters

    @property
    def done(self) -> bool:
        return self.iteration >= self.total_iters


def init_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    train_cfg.validate()
    torch.manual_seed(train_cfg.seed)
    model = MultiGranularityDetector(model_cfg)
    return TrainState(
        model=model,
        optimizer=make_optimizer(model, train_cfg),
        rng=np.random.default_rng(train_cfg.seed),
        train_cfg=train_cfg,
    )


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": "mgalign-checkpoint",
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": to_dict(state.model.cfg),
        "train_config": to_dict(state.train_cfg),
        "iteration": state.iteration,
        "stage": state.stage,
        "model_state": state.model.state_dict(),
        "optimizer_state": state.optimizer.state_dict(),
        "rng_state": state.rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state(),
        "running": dict(state.running),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path, expect_model: ModelConfig | None = None) -> TrainState:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != "mgalign-checkpoint":
        raise CheckpointError(f"{path} is not an mgalign checkpoint")
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version}")
    model_cfg = from_dict(ModelConfig, payload["model_config"])
    if expect_model is not None and to_dict(expect_model) != to_dict(model_cfg):
        diff = {
            k: (v, to_dict(model_cfg)[k])
            for k, v in to_dict(expect_model).items()
            if to_dict(model_cfg)[k] != v
        }
        raise CheckpointError(f"{path}: model config mismatch (requested, checkpoint): {diff}")
    train_cfg = from_dict(TrainConfig, payload["train_config"])
    model = MultiGranularityDetector(model_cfg)
    try:
        model.load_state_dict(payload["model_state"])
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: parameters do not match the architecture: {exc}") from exc
    optimizer = make_optimizer(model, train_cfg)
    optimizer.load_state_dict(payload["optimizer_state"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    torch.set_rng_state(payload["torch_rng_state"])
    return TrainState(model, optimizer, rng, train_cfg, payload["iteration"], payload.get("running", {}))


# --- loop -----------------------------------------------------------------------------------


def sample_batch(state: TrainState, source: Sequence[AnnotatedImage],
                 target: Sequence[AnnotatedImage]) -> tuple[DomainBatch, int | None]:
    cfg = state.train_cfg
    src = source[int(state.rng.integers(len(source)))]
    tgt = target[int(state.rng.integers(len(target)))] if target else None
    side = None
    if state.stage == 2 and cfg.multiscale_sides:
        side = int(state.rng.choice(np.asarray(cfg.multiscale_sides)))
        src = resize(src, side)
        tgt = resize(tgt, side) if tgt is not None else None
    return DomainBatch([src], [tgt] if tgt is not None else []), side


def train_step(state: TrainState, batch: DomainBatch) -> dict[str, float]:
    model, opt, cfg = state.model, state.optimizer, state.train_cfg
    model.train()
    total, parts = total_loss(model, batch, state.stage, cfg)
    for key in LOSS_KEYS:
        if not math.isfinite(parts[key]):
            raise TrainingDivergedError(key, state.iteration)
    opt.zero_grad(set_to_none=True)
    total.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    opt.step()
    return parts


def train(
    state: TrainState,
    source: Sequence[AnnotatedImage],
    target: Sequence[AnnotatedImage],
    *,
    until: int | None = None,
    metrics_path: str | Path | None = None,
    checkpoint_dir: str | Path | None = None,
    on_iteration: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Run the two-stage schedule from ``state.iteration`` up to ``until`` (default: the end).

    Returns the per-iteration metric records; each is also appended to
    ``metrics_path`` as a JSON line when given.
    """
    if not source:
        raise InvalidBatchError("source dataset is empty")
    if state.train_cfg.alpha > 0 and not target:
        raise InvalidBatchError("target dataset is empty")
    stop = state.total_iters if until is None else min(until, state.total_iters)
    records = []
    fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        while state.iteration < stop:
            batch, side = sample_batch(state, source, target)
            stage = state.stage
            parts = train_step(state, batch)
            rec = {"iteration": state.iteration, "stage": stage, "side": side or batch.source[0].size[0], **parts}
            for key in LOSS_KEYS:
                prev = state.running.get(key, parts[key])
                state.running[key] = 0.9 * prev + 0.1 * parts[key]
            state.iteration += 1
            records.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_iteration:
                on_iteration(rec)
            every = state.train_cfg.checkpoint_every
            if checkpoint_dir and every and state.iteration % every == 0:
                save_checkpoint(state, Path(checkpoint_dir) / f"iter_{state.iteration:06d}.pt")
            if state.iteration % 50 == 0:
                log.info("iter %d stage %d total %.4f det %.4f cat %.4f",
                         state.iteration, stage, parts["total"], parts["det"], parts["cat"])
    finally:
        if fh:
            fh.close()
    if checkpoint_dir:
        name = "final.pt" if state.done else f"iter_{state.iteration:06d}.pt"
        save_checkpoint(state, Path(checkpoint_dir) / name)
    return records
