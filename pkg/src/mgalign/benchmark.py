"""Variant sweeps on the synthetic benchmark.

A variant is a named set of dotted config overrides applied on top of a base
:class:`RunConfig`. :func:`run_benchmark` trains and scores every variant for
every seed; variants whose stage 1 is identical share it.
"""

from __future__ import annotations

import copy
import json
import logging
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .config import RunConfig, apply_override, from_dict, to_dict
from .data import AnnotatedImage, synthesize
from .inference import evaluate_model
from .training import TrainState, init_state, train

log = logging.getLogger(__name__)

VARIANTS: dict[str, dict[str, object]] = {
    "source_only": {"train.alpha": 0.0},
    "without_all": {"model.fusion_mode": "none", "train.use_category_discriminator": False},
    "without_category": {"train.use_category_discriminator": False},
    "without_gated_fusion": {"model.fusion_mode": "none"},
    "full": {},
    "average_fusion": {"model.fusion_mode": "average"},
    "conv_fusion": {"model.fusion_mode": "conv1x1"},
}
DIRECTIONALITY_VARIANTS = ("full", "source_only", "without_category", "average_fusion")
TABLE_ROWS = (
    ("source_only", "source only (alpha=0)"),
    ("without_all", "ours (w/o all)"),
    ("without_category", "ours (w/o category-level dis.)"),
    ("without_gated_fusion", "ours (w/o gated fusion)"),
    ("full", "ours (w/ all)"),
    ("average_fusion", "ours (w/ average fusion)"),
    ("conv_fusion", "ours (w/ conv fusion)"),
    ("full", "ours (w/ gated fusion)"),
)
METRICS = ("map", "ap_small", "ap_medium", "ap_large")


def benchmark_config(seed: int = 0) -> RunConfig:
    """The desk-scale preset used for the directionality experiment."""
    cfg = RunConfig()
    cfg.train.stage1_iters = 600
    cfg.train.stage2_iters = 600
    cfg.train.seed = seed
    cfg.synth.seed = seed
    return cfg


def variant_config(base: RunConfig, overrides: Mapping[str, object]) -> RunConfig:
    data = to_dict(base)
    for key, value in overrides.items():
        apply_override(data, key, value)
    cfg = from_dict(RunConfig, data)
    cfg.validate()
    return cfg


@dataclass
class Datasets:
    source_train: list[AnnotatedImage]
    target_train: list[AnnotatedImage]
    target_eval: list[AnnotatedImage]
    source_eval: list[AnnotatedImage] = field(default_factory=list)


def make_datasets(cfg: RunConfig) -> Datasets:
    s, sp = cfg.synth, cfg.splits
    return Datasets(
        synthesize(s, sp.source_train, "source"),
        synthesize(s, sp.target_train, "target"),
        synthesize(s, sp.target_eval, "target", "eval"),
        synthesize(s, sp.source_eval, "source", "eval") if sp.source_eval > 0 else [],
    )


def _score(state: TrainState, data: Datasets, cfg: RunConfig) -> dict:
    report, _ = evaluate_model(state.model, data.target_eval, cfg.score_threshold, cfg.nms_iou)
    out = {"target": report.to_dict()}
    if data.source_eval:
        src, _ = evaluate_model(state.model, data.source_eval, cfg.score_threshold, cfg.nms_iou)
        out["source"] = src.to_dict()
    return out


def _stage1_key(cfg: RunConfig) -> str:
    """Everything that can influence stage 1; the category switch only acts in stage 2."""
    d = to_dict(cfg)
    d["train"].pop("use_category_discriminator")
    d["train"].pop("lambda_dis")
    d["train"].pop("lambda_sim")
    d["train"].pop("theta_cat")
    d["train"].pop("source_pseudo_labels")
    return json.dumps(d, sort_keys=True)


def run_seed(base: RunConfig, variants: Sequence[str], data: Datasets | None = None) -> dict[str, dict]:
    """Train and score each variant once with ``base``'s seed."""
    data = data or make_datasets(base)
    stage1_cache: dict[str, TrainState] = {}
    results = {}
    for name in variants:
        cfg = variant_config(base, VARIANTS[name])
        t0 = time.perf_counter()
        key = _stage1_key(cfg)
        if key in stage1_cache:
            state = copy.deepcopy(stage1_cache[key])
            state.train_cfg = cfg.train
            log.info("%s: reusing stage 1", name)
        else:
            state = init_state(cfg.model, cfg.train)
            train(state, data.source_train, data.target_train, until=cfg.train.stage1_iters)
            stage1_cache[key] = copy.deepcopy(state)
        train(state, data.source_train, data.target_train)
        results[name] = _score(state, data, cfg)
        results[name]["seconds"] = time.perf_counter() - t0
        log.info("%s seed %d: target mAP %.4f", name, cfg.train.seed, results[name]["target"]["map"])
    return results


def _median(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return statistics.median(vals) if vals else None


def summarize(per_seed: Mapping[int, Mapping[str, dict]]) -> dict[str, dict[str, float | None]]:
    """Median over seeds of each target-domain metric, per variant."""
    names = {n for res in per_seed.values() for n in res}
    return {
        name: {m: _median([res[name]["target"][m] for res in per_seed.values() if name in res]) for m in METRICS}
        for name in sorted(names)
    }


def directionality(medians: Mapping[str, Mapping[str, float | None]], margin: float = 0.05) -> dict[str, bool]:
    """The three directional claims checked on median target metrics."""
    full = medians["full"]
    out = {
        "full_beats_source_only": full["map"] - medians["source_only"]["map"] >= margin,
        "full_not_below_without_category": full["map"] >= medians["without_category"]["map"],
    }
    gated_l, avg_l = full["ap_large"], medians["average_fusion"]["ap_large"]
    out["gated_not_below_average_on_large"] = gated_l is not None and avg_l is not None and gated_l >= avg_l
    return out


def run_benchmark(
    base: RunConfig,
    seeds: Sequence[int],
    variants: Sequence[str] = DIRECTIONALITY_VARIANTS,
    out_path: str | Path | None = None,
) -> dict:
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ValueError(f"unknown variants {unknown}; choose from {sorted(VARIANTS)}")
    per_seed = {}
    for seed in seeds:
        cfg = copy.deepcopy(base)
        cfg.train.seed = seed
        cfg.synth.seed = seed
        per_seed[seed] = run_seed(cfg, variants)
        if out_path:
            _write(out_path, base, per_seed)
    result = _write(out_path, base, per_seed) if out_path else _assemble(base, per_seed)
    return result


def _assemble(base: RunConfig, per_seed: Mapping[int, Mapping[str, dict]]) -> dict:
    medians = summarize(per_seed)
    result = {"config": to_dict(base), "per_seed": {str(k): v for k, v in per_seed.items()}, "median": medians}
    if all(v in medians for v in DIRECTIONALITY_VARIANTS):
        result["directionality"] = directionality(medians)
    return result


def _write(path: str | Path, base: RunConfig, per_seed: Mapping[int, Mapping[str, dict]]) -> dict:
    result = _assemble(base, per_seed)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(result, indent=2), encoding="utf-8")
    return result


def format_table(medians: Mapping[str, Mapping[str, float | None]]) -> str:
    """Ablation-table text: one row per variant, columns mAP / AP^S / AP^M / AP^L (percent)."""

    def cell(v):
        return "   -" if v is None else f"{100 * v:5.1f}"

    lines = [f"{'method':34s} {'mAP':>5s} {'AP^S':>5s} {'AP^M':>5s} {'AP^L':>5s}"]
    lines.append("-" * len(lines[0]))
    for name, label in TABLE_ROWS:
        if name in medians:
            lines.append(f"{label:34s} " + " ".join(cell(medians[name][m]) for m in METRICS))
    return "\n".join(lines)
