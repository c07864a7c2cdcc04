"""Command-line entry points: ``mgalign synth | train | eval | inspect | ablate``.

Every verb takes ``--config FILE`` (YAML) plus ``--set key.path=value``
overrides and writes the merged effective config next to its outputs.
Relative output directories are placed under ``$MGALIGN_OUTPUT_ROOT`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .config import FUSION_MODES, ConfigError, RunConfig, dump_run_config, load_run_config, to_dict
from .data import CATEGORIES, DatasetError, AnnotatedImage, load_dataset, save_dataset, synthesize
from .training import CheckpointError, InvalidBatchError, TrainingDivergedError

log = logging.getLogger("mgalign")

OUTPUT_ROOT_ENV = "MGALIGN_OUTPUT_ROOT"
SPLITS = ("source_train", "target_train", "target_eval", "source_eval")
_SPLIT_SPEC = {
    "source_train": ("source", "train"),
    "target_train": ("target", "train"),
    "target_eval": ("target", "eval"),
    "source_eval": ("source", "eval"),
}


class CommandError(RuntimeError):
    pass


# --- config plumbing ------------------------------------------------------------------------


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(raw)
    return out


def _user_model_keys(args) -> bool:
    """Whether the user pinned any model setting (file, --set or flags)."""
    if args.config:
        data = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if data.get("model"):
            return True
    if any(k.startswith("model.") for k in _parse_set(args.set)):
        return True
    return bool(getattr(args, "fusion_mode", None) or getattr(args, "no_gated_fusion", False))


def effective_config(args, base: dict | None = None) -> RunConfig:
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["train.seed"] = args.seed
        overrides["synth.seed"] = args.seed
    if getattr(args, "fusion_mode", None):
        overrides["model.fusion_mode"] = args.fusion_mode
    if getattr(args, "no_gated_fusion", False):
        overrides["model.fusion_mode"] = "none"
    if getattr(args, "no_category_discriminator", False):
        overrides["train.use_category_discriminator"] = False
    if args.output_dir:
        overrides["output_dir"] = args.output_dir
    if getattr(args, "data_root", None):
        overrides["data_root"] = args.data_root
    return load_run_config(args.config, overrides, base)


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def data_root(cfg: RunConfig) -> Path:
    return Path(cfg.data_root) if cfg.data_root else output_dir(cfg) / "data"


def _prepare(path: Path, cfg: RunConfig) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
        dump_run_config(cfg, path / "config.yaml")
    except OSError as exc:
        raise CommandError(f"cannot write to {path}: {exc}") from exc
    return path


def _load_split(cfg: RunConfig, split: str) -> list[AnnotatedImage]:
    root = data_root(cfg) / split
    if not (root / "annotations.json").is_file():
        raise CommandError(f"dataset split {root} not found; run `mgalign synth` first or set data_root")
    return load_dataset(root, num_classes=cfg.model.num_classes)


# --- plotting ---------------------------------------------------------------------------------


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_loss_curves(records: Sequence[dict], path: Path, window: int = 20) -> None:
    plt = _pyplot()
    keys = ("gui", "det", "pix", "ins", "dis", "sim", "cat", "total")
    its = np.array([r["iteration"] for r in records])
    fig, axes = plt.subplots(2, 4, figsize=(14, 6), sharex=True)
    for ax, key in zip(axes.ravel(), keys):
        y = np.array([r[key] for r in records], dtype=float)
        ax.plot(its, y, lw=0.5, alpha=0.4)
        if len(y) >= window:
            smooth = np.convolve(y, np.ones(window) / window, mode="valid")
            ax.plot(its[window - 1:], smooth, lw=1.5)
        boundary = next((r["iteration"] for r in records if r["stage"] == 2), None)
        if boundary is not None:
            ax.axvline(boundary, color="k", ls="--", lw=0.8)
        ax.set_title(key)
    for ax in axes[-1]:
        ax.set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_pr_curves(curves: dict[str, tuple[np.ndarray, np.ndarray]], aps: Sequence, path_dir: Path) -> list[Path]:
    plt = _pyplot()
    paths = []
    for (name, (rec, prec)), ap in zip(curves.items(), aps):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.plot(rec, prec, drawstyle="steps-post")
        ax.set(xlim=(0, 1), ylim=(0, 1.02), xlabel="recall", ylabel="precision")
        ax.set_title(f"{name}  AP={'n/a' if ap is None else f'{ap:.3f}'}")
        fig.tight_layout()
        p = path_dir / f"pr_{name}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths


def save_unit_png(values: np.ndarray, path: Path) -> None:
    """Store a [0, 1] map as a 16-bit grayscale PNG (quantization step 1/65535)."""
    from PIL import Image

    q = np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def read_unit_png(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0


# --- verbs ------------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = effective_config(args)
    root = data_root(cfg)
    counts = {s: getattr(cfg.splits, s) for s in SPLITS}
    bad = {s: n for s, n in counts.items() if n <= 0}
    if bad:
        raise CommandError(f"split sizes must be positive, got {bad}")
    _prepare(root, cfg)
    for split, n in counts.items():
        domain, part = _SPLIT_SPEC[split]
        try:
            save_dataset(synthesize(cfg.synth, n, domain, part), root / split, categories=CATEGORIES[: cfg.synth.num_classes])
        except OSError as exc:
            raise CommandError(f"cannot write dataset to {root / split}: {exc}") from exc
        print(f"{split}: {n} images -> {root / split}")
    return 0


def _export_gates(model, images: Sequence[AnnotatedImage], path: Path) -> None:
    import torch

    from .training import images_to_tensor

    model.eval()
    with torch.no_grad():
        res = model(images_to_tensor(images))
    arrays = {f"level{lvl}": g.numpy() for lvl, g in zip(model.cfg.levels, res.gates) if g is not None}
    np.savez_compressed(path, fusion_mode=model.cfg.fusion_mode, **arrays)


def cmd_train(args) -> int:
    from .training import init_state, load_checkpoint, train

    cfg = effective_config(args)
    state = None
    if args.resume:
        # the checkpoint's own settings are the base; the file, --set and flags still win
        state = load_checkpoint(args.resume, expect_model=cfg.model if _user_model_keys(args) else None)
        cfg = effective_config(args, base={"model": to_dict(state.model.cfg), "train": to_dict(state.train_cfg)})
        state.train_cfg = cfg.train
    out = _prepare(output_dir(cfg), cfg)
    source, target = _load_split(cfg, "source_train"), _load_split(cfg, "target_train")
    if state is None:
        state = init_state(cfg.model, cfg.train)
    metrics = out / "metrics.jsonl"
    if not args.resume and metrics.exists():
        metrics.unlink()
    train(state, source, target, metrics_path=metrics, checkpoint_dir=out / "checkpoints")
    records = [json.loads(line) for line in metrics.read_text(encoding="utf-8").splitlines()]
    plot_loss_curves(records, out / "loss_curves.png")
    probe = (target or source)[: min(4, len(target or source))]
    _export_gates(state.model, probe, out / "gates.npz")
    print(f"trained {state.iteration} iterations; checkpoint {out / 'checkpoints' / 'final.pt'}")
    return 0


def _oracle_check(dets, gt, num_classes: int, rng: np.random.Generator, limit: int = 100) -> int:
    """Compare fast and oracle AP on micro-instances cut from real detections."""
    from .evaluation import average_precision, oracle_average_precision

    cells = [(img, c) for img in sorted(gt) for c in range(num_classes)]
    rng.shuffle(cells)
    checked = 0
    for img, c in cells:
        boxes, cats = gt[img]
        g = boxes[cats == c][:4]
        d = sorted((x for x in dets if x.image_id == img and x.category == c), key=lambda x: -x.score)[:8]
        if len(g) == 0:
            continue
        triples = [(img, tuple(x.box), x.score) for x in d]
        fast = average_precision(triples, {img: g})
        slow = oracle_average_precision(triples, {img: g})
        if abs(fast - slow) > 1e-9:
            raise CommandError(f"oracle mismatch on {img}/category {c}: fast {fast} vs oracle {slow}")
        checked += 1
        if checked >= limit:
            break
    return checked


def cmd_eval(args) -> int:
    from .evaluation import evaluate, pr_curve
    from .head import write_detections
    from .inference import detect, ground_truth
    from .training import load_checkpoint

    cfg = effective_config(args)
    out = _prepare(output_dir(cfg) / "eval" / args.split, cfg)
    expect = cfg.model if _user_model_keys(args) else None
    state = load_checkpoint(args.checkpoint, expect_model=expect)
    images = _load_split(cfg, args.split)
    dets = detect(state.model, images, cfg.score_threshold, cfg.nms_iou)
    gt = ground_truth(images)
    num_classes = state.model.cfg.num_classes
    report = evaluate(dets, gt, num_classes)
    report.save(out / "report.json")
    write_detections(out / "detections.jsonl", dets)
    names = list(CATEGORIES[:num_classes]) + [f"class{c}" for c in range(len(CATEGORIES), num_classes)]
    curves = {}
    for c, name in enumerate(names):
        triples = [(d.image_id, tuple(d.box), d.score) for d in dets if d.category == c]
        curves[name] = pr_curve(triples, {k: b[cats == c] for k, (b, cats) in gt.items()})
    plot_pr_curves(curves, report.per_category_ap, out)
    if args.oracle_check:
        n = _oracle_check(dets, gt, num_classes, np.random.default_rng(cfg.train.seed))
        print(f"oracle check: {n} micro-instances agree")
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"mAP {fmt(report.map)}  AP^S {fmt(report.ap_small)}  AP^M {fmt(report.ap_medium)}  AP^L {fmt(report.ap_large)}")
    return 0


def _load_image(path: Path) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise CommandError(f"cannot read image {path}: {exc}") from exc


def annotation_guidance(model, image: AnnotatedImage, predicted):
    """Replace predicted coarse boxes by the assigned GT LTRB on foreground cells."""
    import torch

    from .head import assign_targets

    t = assign_targets(image.boxes, image.categories, image.size, model.strides, model.cfg.level_ranges)
    out = []
    for pred, box, fg in zip(predicted, t.boxes, t.fg):
        out.append(torch.where(fg[None, None], box[None].to(pred.dtype), pred))
    return out


def cmd_inspect(args) -> int:
    import torch

    from .discriminators import select_important
    from .training import images_to_tensor, load_checkpoint

    cfg = effective_config(args)
    out = _prepare(output_dir(cfg) / "inspect" / Path(args.image or f"{args.split}_{args.index}").stem, cfg)
    state = load_checkpoint(args.checkpoint)
    model = state.model.eval()
    if args.image:
        pixels = _load_image(Path(args.image))
        image = AnnotatedImage(Path(args.image).stem, pixels, "target")
    else:
        images = _load_split(cfg, args.split)
        if not 0 <= args.index < len(images):
            raise CommandError(f"--index {args.index} outside split of {len(images)} images")
        image = images[args.index]
    if args.guidance == "annotations" and len(image.boxes) == 0:
        raise CommandError("--guidance annotations needs an annotated image (use --split/--index)")
    x = images_to_tensor([image])
    with torch.no_grad():
        model.pyramid.check_input(*x.shape[-2:])
        guidance = None
        if args.guidance == "annotations":
            pyr = model.pyramid(x)
            guidance = annotation_guidance(model, image, model.guidance(pyr.maps, pyr.strides))
        res = model(x, guidance=guidance)
    branches = model.fusion.branches
    arrays = {}
    written = 0
    for lvl, gate in zip(model.cfg.levels, res.gates):
        if gate is None:
            continue
        g = gate[0].numpy()
        arrays[f"level{lvl}"] = g
        for b, branch in enumerate(branches):
            save_unit_png(g[b], out / f"gate_level{lvl}_{branch.name}.png")
            written += 1
        _plot_gate_overview(g, branches, out / f"gates_level{lvl}.png", lvl)
    if not written:
        print(f"fusion mode {model.cfg.fusion_mode!r} has no gate; no heatmaps written")

    probs = [torch.sigmoid(c)[0].max(dim=0).values for c in res.detections.cls_logits]
    selected = select_important([p[None] for p in probs], state.train_cfg.theta_cat)
    for lvl, mask in zip(model.cfg.levels, selected):
        arrays[f"selected_level{lvl}"] = mask[0].numpy()
        arrays[f"prob_level{lvl}"] = probs[model.cfg.levels.index(lvl)].numpy()
    np.savez_compressed(out / "inspect.npz", **arrays)
    _plot_selection(image, model.cfg.levels, selected, model.strides, out / "selection_overlay.png")
    print(f"wrote {written} gate heatmaps and selection overlay to {out}")
    return 0


def _plot_gate_overview(g: np.ndarray, branches, path: Path, level: int) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(branches), figsize=(2.2 * len(branches), 2.4))
    for ax, b, branch in zip(axes, range(len(branches)), branches):
        ax.imshow(g[b], vmin=0, vmax=1, cmap="viridis")
        ax.set_title(branch.name, fontsize=8)
        ax.axis("off")
    fig.suptitle(f"gate weights, level {level}")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _plot_selection(image: AnnotatedImage, levels, selected, strides, path: Path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(levels), figsize=(3 * len(levels), 3.2))
    axes = np.atleast_1d(axes)
    h, w = image.size
    for ax, lvl, mask, stride in zip(axes, levels, selected, strides):
        ax.imshow(image.pixels)
        up = np.kron(mask[0].numpy().astype(float), np.ones((stride, stride)))[:h, :w]
        ax.imshow(np.ma.masked_where(up == 0, up), cmap="autumn", alpha=0.5, vmin=0, vmax=1)
        for x1, y1, x2, y2 in image.boxes:
            ax.add_patch(plt.Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, ec="cyan", lw=1))
        ax.set_title(f"S, level {lvl}")
        ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_ablate(args) -> int:
    from .benchmark import DIRECTIONALITY_VARIANTS, VARIANTS, format_table, run_benchmark

    cfg = effective_config(args)
    out = _prepare(output_dir(cfg) / "ablation", cfg)
    variants = args.variants or (list(DIRECTIONALITY_VARIANTS) if args.directionality else list(VARIANTS))
    result = run_benchmark(cfg, args.seeds, variants, out / "ablation.json")
    table = format_table(result["median"])
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    if "directionality" in result:
        for name, ok in result["directionality"].items():
            print(f"{'PASS' if ok else 'FAIL'} {name}")
    return 0


# --- parser -----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set train.alpha=0.2 (repeatable)")
    common.add_argument("--output-dir", help="output directory (relative paths go under $%s)" % OUTPUT_ROOT_ENV)
    common.add_argument("--data-root", help="dataset root holding the split directories")
    common.add_argument("--seed", type=int, help="seed for both training and synthesis")

    switches = argparse.ArgumentParser(add_help=False)
    group = switches.add_mutually_exclusive_group()
    group.add_argument("--fusion-mode", choices=FUSION_MODES)
    group.add_argument("--no-gated-fusion", action="store_true", help="same as --fusion-mode none")
    switches.add_argument("--no-category-discriminator", action="store_true")

    parser = argparse.ArgumentParser(prog="mgalign", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic two-domain dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, switches], help="run the two-stage schedule")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common, switches], help="score a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="target_eval", choices=SPLITS)
    p.add_argument("--oracle-check", action="store_true", help="cross-check AP against the brute-force oracle")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", parents=[common], help="gate heatmaps and category-selection overlay")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--image", help="PNG image to inspect")
    src.add_argument("--split", default="target_eval", choices=SPLITS)
    p.add_argument("--index", type=int, default=0, help="image index within --split")
    p.add_argument("--guidance", choices=("predicted", "annotations"), default="predicted",
                   help="route gates by predicted coarse boxes or by the annotated boxes")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("ablate", parents=[common], help="train+eval the variant matrix, median over seeds")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--variants", nargs="+", help="subset of variants to run")
    p.add_argument("--directionality", action="store_true", help="only the four variants of the directional checks")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (CommandError, ConfigError, DatasetError, CheckpointError, InvalidBatchError,
            TrainingDivergedError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
