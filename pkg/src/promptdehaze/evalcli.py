"""Evaluation harness and the ``promptdehaze`` command-line interface.

Built-in metrics are cheap no-reference statistics (a dark-channel haze
density proxy and a global contrast statistic); external quality models
plug in through ``register_metric`` as callables mapping an image or an
image path to a scalar.  Reports are deterministic for a fixed corpus,
checkpoint, and config: per-image line-delimited records plus corpus
means in a stable column order.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import regions, training
from .backbone import Checkpoint, load_checkpoint, save_checkpoint
from .encoders import get_encoder
from .imaging import (
    Image,
    dark_channel,
    load_image,
    save_image,
    save_mask,
    toy_hazy_pairs,
)
from .losses import LossWeights
from .prompts import build_default_prompt_sets, load_prompt_config
from .training import TrainConfig, finetune, pretrain

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


def haze_density_proxy(image) -> float:
    """Mean of the patch-15 dark channel; 0 = haze-free black, 1 = white-out."""
    return float(dark_channel(image, patch=15).mean())


def contrast_statistic(image) -> float:
    """Standard deviation of per-pixel channel-mean luminance."""
    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    return float(px.mean(axis=2).std())


_METRICS: dict = {}


def register_metric(name: str, fn, kind: str = "image") -> None:
    """Register a metric: kind "image" takes an Image, "path" a file path."""
    if kind not in ("image", "path"):
        raise ValueError(f"metric kind must be 'image' or 'path', got {kind!r}")
    if name in _METRICS:
        raise ValueError(f"metric {name!r} is already registered")
    _METRICS[name] = (fn, kind)


register_metric("haze_density_proxy", haze_density_proxy)
register_metric("contrast", contrast_statistic)


@dataclass(frozen=True)
class MetricReport:
    """Per-image scores, corpus means, and provenance for one evaluation."""

    method: str
    config_hash: str
    metrics: tuple
    rows: tuple
    means: dict
    skipped: tuple

    def __post_init__(self):
        for name in self.metrics:
            scores = [row[name] for row in self.rows]
            want = float(np.mean(scores)) if scores else float("nan")
            have = self.means[name]
            if scores and abs(want - have) > 1e-9:
                raise ValueError(f"mean of {name!r} inconsistent with rows")


def _config_hash(metrics, checkpoint, method) -> str:
    payload = {
        "metrics": list(metrics),
        "method": method,
        "checkpoint": None
        if checkpoint is None
        else {"stage": checkpoint.stage, "backbone": checkpoint.model.metadata()},
    }
    digest = hashlib.blake2b(
        json.dumps(payload, sort_keys=True).encode(), digest_size=8
    )
    return digest.hexdigest()


def evaluate(corpus_dir, metrics=("haze_density_proxy",), checkpoint: Checkpoint | None = None,
             method: str | None = None) -> MetricReport:
    """Score every decodable image in a directory, in filename order.

    With a checkpoint, images are dehazed before scoring.  Unreadable
    files are recorded as skips with a reason, never silently dropped.
    """
    corpus_dir = Path(corpus_dir)
    if not corpus_dir.is_dir():
        raise NotADirectoryError(f"no such corpus directory: {corpus_dir}")
    metrics = tuple(metrics)
    for name in metrics:
        if name not in _METRICS:
            raise LookupError(f"unknown metric {name!r}; registered: {sorted(_METRICS)}")
    files = sorted(
        p for p in corpus_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )
    if not files:
        raise ValueError(f"no images found in {corpus_dir}")
    method = method or ("dehazed" if checkpoint is not None else "raw")
    rows = []
    skipped = []
    needs_path = any(_METRICS[m][1] == "path" for m in metrics)
    tmpdir = tempfile.TemporaryDirectory() if (checkpoint and needs_path) else None
    try:
        for path in files:
            try:
                img = load_image(path)
            except Exception as exc:
                skipped.append((path.name, str(exc)))
                continue
            score_path = path
            if checkpoint is not None:
                img = checkpoint.model.dehaze_image(img)
                if tmpdir is not None:
                    score_path = Path(tmpdir.name) / path.name
                    save_image(img, score_path)
            row = {"image": path.name}
            for name in metrics:
                fn, kind = _METRICS[name]
                row[name] = float(fn(img) if kind == "image" else fn(score_path))
            rows.append(row)
    finally:
        if tmpdir is not None:
            tmpdir.cleanup()
    means = {
        name: (float(np.mean([r[name] for r in rows])) if rows else float("nan"))
        for name in metrics
    }
    return MetricReport(
        method=method,
        config_hash=_config_hash(metrics, checkpoint, method),
        metrics=metrics,
        rows=tuple(rows),
        means=means,
        skipped=tuple(skipped),
    )


def write_report(report: MetricReport, path) -> None:
    """Line-delimited per-image records followed by a summary record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in report.rows:
            fh.write(json.dumps({"kind": "image", **row}) + "\n")
        for name, reason in report.skipped:
            fh.write(json.dumps({"kind": "skip", "image": name, "reason": reason}) + "\n")
        fh.write(
            json.dumps(
                {
                    "kind": "summary",
                    "method": report.method,
                    "config_hash": report.config_hash,
                    "count": len(report.rows),
                    **report.means,
                }
            )
            + "\n"
        )


def format_table(report: MetricReport) -> str:
    cols = ["image"] + list(report.metrics)
    lines = ["\t".join(cols)]
    for row in report.rows:
        lines.append("\t".join(
            row["image"] if c == "image" else f"{row[c]:.6f}" for c in cols
        ))
    mean_cells = ["MEAN"] + [f"{report.means[m]:.6f}" for m in report.metrics]
    lines.append("\t".join(mean_cells))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _load_config_overrides(path) -> dict:
    data = json.loads(Path(path).read_text())
    if "weights" in data and isinstance(data["weights"], dict):
        data["weights"] = LossWeights(**data["weights"])
    if "fill" in data:
        data["fill"] = tuple(data["fill"])
    return data


def _stage_config(args, stage: str) -> TrainConfig:
    overrides: dict = {}
    if args.config:
        overrides.update(_load_config_overrides(args.config))
    overrides.pop("stage", None)  # the subcommand decides the stage
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.lr is not None:
        overrides["lr0"] = args.lr
    if args.batch is not None:
        overrides["batch"] = args.batch
    overrides["seed"] = args.seed
    if stage == "finetune":
        overrides["region_split"] = not args.no_region_split
        overrides["enhance_set"] = not args.no_enhance_set
        overrides["region_mode"] = args.region_mode
        maker = training.toy_finetune_config if args.toy_preset else training.finetune_config
    else:
        maker = training.toy_pretrain_config if args.toy_preset else training.pretrain_config
    if args.toy_preset:
        overrides.pop("seed", None)
        return maker(seed=args.seed, **overrides)
    return maker(**overrides)


def _load_dir_images(directory) -> list:
    directory = Path(directory)
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {directory}")
    return [load_image(p) for p in files]


def _prompt_sets(args) -> dict:
    if getattr(args, "prompts_config", None):
        return load_prompt_config(args.prompts_config)
    return build_default_prompt_sets()


def cmd_pretrain(args) -> int:
    config = _stage_config(args, "pretrain")
    if args.toy_pairs:
        pairs = toy_hazy_pairs(args.toy_pairs, seed=args.seed, size=args.size)
    else:
        if not args.data:
            raise ValueError("provide --data DIR (hazy/ and clean/ subdirs) or --toy-pairs N")
        root = Path(args.data)
        hazy = _load_dir_images(root / "hazy")
        clean = _load_dir_images(root / "clean")
        if len(hazy) != len(clean):
            raise ValueError(f"{len(hazy)} hazy vs {len(clean)} clean images")
        pairs = list(zip(hazy, clean))
    checkpoint, record = pretrain(config, pairs)
    save_checkpoint(checkpoint, args.out)
    if args.log:
        record.to_jsonl(args.log)
    print(f"pretrained: {len(pairs)} pairs, {config.epochs} epochs, "
          f"final epoch L1 {record.epochs[-1]['l1']:.6f}, saved {args.out}")
    return 0


def cmd_finetune(args) -> int:
    config = _stage_config(args, "finetune")
    encoder = get_encoder(args.backend, cache_dir=args.cache_dir)
    if args.toy_images:
        images = [
            h for h, _ in toy_hazy_pairs(
                args.toy_images, seed=args.seed + 1, size=args.size,
                beta_range=(1.8, 3.2), airlight_range=(0.85, 0.95),
            )
        ]
    else:
        if not args.images:
            raise ValueError("provide --images DIR or --toy-images N")
        images = _load_dir_images(args.images)
    checkpoint = load_checkpoint(args.checkpoint)
    out, record = finetune(
        config, images, checkpoint, encoder, prompt_sets=_prompt_sets(args)
    )
    save_checkpoint(out, args.out)
    if args.log:
        record.to_jsonl(args.log)
    print(f"finetuned: {len(images)} images, {config.epochs} epochs, "
          f"final epoch total {record.epochs[-1]['total']:.6f}, saved {args.out}")
    return 0


def cmd_dehaze(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    in_dir, out_dir = Path(args.input), Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = sorted(p for p in in_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise ValueError(f"no images found in {in_dir}")
    for path in files:
        result = checkpoint.model.dehaze_image(load_image(path))
        save_image(result, out_dir / path.name, bit_depth=args.bit_depth)
    print(f"dehazed {len(files)} images -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint) if args.checkpoint else None
    metrics = tuple(m for m in args.metrics.split(",") if m) if args.metrics else ()
    report = evaluate(args.input, metrics=metrics, checkpoint=checkpoint)
    if args.report:
        write_report(report, args.report)
    print(format_table(report))
    return 0


def cmd_simmap(args) -> int:
    encoder = get_encoder(args.backend, cache_dir=args.cache_dir)
    image = load_image(args.image)
    if args.text:
        text_emb = encoder.encode_text(args.text)
    else:
        text_emb = regions.sky_locator_embedding(encoder)
    smap = regions.similarity_map(image, text_emb, encoder, backend=args.map_backend)
    heat = ((smap.grid + 1.0) / 2.0).astype(np.float32)
    heat_img = np.repeat(heat[:, :, None], 3, axis=2)
    scale = max(image.height // heat.shape[0], 1)
    heat_big = np.kron(heat_img, np.ones((scale, scale, 1), dtype=np.float32))
    save_image(Image(np.clip(heat_big, 0.0, 1.0)), args.out)
    if args.mask_out:
        points = regions.select_sky_points(smap, k=args.k, percentile=args.percentile)
        mask = regions.segment_sky(image, points)
        save_mask(mask, args.mask_out)
    print(f"similarity map ({args.map_backend}) -> {args.out}")
    return 0


def cmd_mask(args) -> int:
    encoder = get_encoder(args.backend, cache_dir=args.cache_dir)
    image = load_image(args.image)
    mask = regions.compute_sky_mask(
        image, encoder, backend=args.map_backend, k=args.k, percentile=args.percentile
    )
    save_mask(mask, args.out)
    print(f"sky mask coverage {mask.coverage:.3f} -> {args.out}")
    return 0


def cmd_prompts(args) -> int:
    sets = _prompt_sets(args)
    roles = [args.role] if args.role else list(sets)
    for role in roles:
        ps = sets[role]
        print(f"[{role}] K={ps.K}")
        for s in ps.positives:
            print(f"  + {s}")
        for s in ps.negatives:
            print(f"  - {s}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptdehaze",
        description="Language-guided adaptation of dehazing networks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--backend", default="toy", help="encoder backend name")
        p.add_argument("--cache-dir", default=None, help="pretrained weight cache")
        p.add_argument("--config", default=None, help="JSON training config overrides")

    p = sub.add_parser("pretrain", help="supervised pretraining on paired data")
    common(p)
    p.add_argument("--data", default=None, help="dir with hazy/ and clean/ subdirs")
    p.add_argument("--toy-pairs", type=int, default=0, help="generate N toy pairs")
    p.add_argument("--size", type=int, default=64, help="toy image side")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--toy-preset", action="store_true", help="use desk-scale defaults")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None, help="JSONL training log path")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="prompt-guided adaptation on unlabeled images")
    common(p)
    p.add_argument("--checkpoint", required=True, help="pretrained checkpoint path")
    p.add_argument("--images", default=None, help="dir of unlabeled hazy images")
    p.add_argument("--toy-images", type=int, default=0, help="generate N toy hazy images")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--toy-preset", action="store_true")
    p.add_argument("--no-region-split", action="store_true",
                   help="ablation: one prompt set on the whole image")
    p.add_argument("--no-enhance-set", action="store_true",
                   help="ablation: drop the enhance term")
    p.add_argument("--region-mode", choices=["mask-output", "mask-input"],
                   default="mask-output")
    p.add_argument("--prompts-config", default=None, help="JSON prompt sets")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("dehaze", help="run a checkpoint over a directory")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--bit-depth", type=int, choices=[8, 16], default=8)
    p.set_defaults(fn=cmd_dehaze)

    p = sub.add_parser("eval", help="score a corpus with registered metrics")
    common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--metrics", default="haze_density_proxy,contrast")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--report", default=None, help="JSONL report path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("simmap", help="language-image similarity map for one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--text", default=None, help="custom text (default: sky locator)")
    p.add_argument("--map-backend", choices=["raw", "surgery"], default="surgery")
    p.add_argument("--k", type=int, default=regions.DEFAULT_POINTS)
    p.add_argument("--percentile", type=float, default=regions.DEFAULT_PERCENTILE)
    p.add_argument("--out", required=True, help="heatmap PNG path")
    p.add_argument("--mask-out", default=None, help="also write the sky mask PNG")
    p.set_defaults(fn=cmd_simmap)

    p = sub.add_parser("mask", help="sky mask for one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--map-backend", choices=["raw", "surgery"], default="surgery")
    p.add_argument("--k", type=int, default=regions.DEFAULT_POINTS)
    p.add_argument("--percentile", type=float, default=regions.DEFAULT_PERCENTILE)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_mask)

    p = sub.add_parser("prompts", help="show expanded prompt sets")
    common(p)
    p.add_argument("--role", choices=["sky", "non_sky", "enhance"], default=None)
    p.add_argument("--prompts-config", default=None)
    p.set_defaults(fn=cmd_prompts)

    return parser


def cli_dispatch(argv) -> int:
    """Parse and run; 0 on success, argparse's 2 on usage errors, 1 on failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
