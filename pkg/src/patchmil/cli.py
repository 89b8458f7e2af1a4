"""Command-line entry point: ``patchmil {extract,train,crossval,infer,rollout}``.

Exit codes: 0 on success (including extraction runs where some images were
skipped with a warning), 1 when a command fails at runtime or every input
fails, 2 on usage or configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import __version__
from .config import CONFIG_ENV_VAR, DECISION_RULES, ConfigError, RunConfig
from .data import (
    DatasetManifest,
    ImageDecodeError,
    ManifestEntry,
    ManifestError,
    load_manifest,
    load_sample,
    read_rgb,
    save_manifest,
    write_mask,
)
from .encoder import CheckpointError
from .extraction import (
    DEFAULT_BAND_WIDTH,
    ExtractionError,
    StubDetector,
    StubSegmenter,
    extract_crop,
    load_adapter,
)
from .inference import detect, render_overlay, rollout_for, write_detection_json
from .model import load_model
from .pipeline import TrainingError, build_model, crossvalidate, load_samples, stratified_split, train

log = logging.getLogger("patchmil")

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


class CommandError(RuntimeError):
    """Runtime failure reported to the user with exit code 1."""


def scaled_band_width(size: int, k: int = DEFAULT_BAND_WIDTH, reference: int = 224) -> int:
    """Band width for an input of ``size`` pixels, keeping ``k`` px at ``reference``."""
    return max(1, math.ceil(k * size / reference))


def list_images(folder: Path) -> list[Path]:
    """Images in ``folder`` (sorted), skipping ``*.mask.png`` sidecars."""
    return sorted(
        p
        for p in folder.iterdir()
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES and not p.name.endswith(".mask.png")
    )


def _load_config(path: str | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    config = RunConfig.load(path)
    if seed is not None:
        config = replace(config, seed=seed)
    if out is not None:
        config = replace(config, paths=replace(config.paths, output_dir=out))
    return config


def _read_labels(path: Path) -> dict[str, int]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"id", "label"} <= set(reader.fieldnames):
            raise ConfigError(f"--labels: {path} needs an 'id,label' header")
        return {row["id"]: int(row["label"]) for row in reader}


# --- extract ------------------------------------------------------------------


def cmd_extract(args: argparse.Namespace) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise ConfigError(f"--input: not a directory: {src}")
    images = list_images(src)
    if not images:
        raise CommandError(f"no input images in {src}")

    if args.adapters == "stub":
        detector, segmenter = StubDetector(), StubSegmenter()
    else:
        if not (args.detector and args.segmenter):
            raise ConfigError("--adapters external needs --detector and --segmenter")
        detector, segmenter = load_adapter(args.detector), load_adapter(args.segmenter)

    labels: dict[str, int] = {}
    if args.labels:
        labels = _read_labels(Path(args.labels))
    else:
        log.warning("no --labels given; every extracted image is labeled 0")

    out = Path(args.out)
    (out / "crops").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for path in images:
        try:
            image = read_rgb(path)
            crop, crop_mask, detection, box = extract_crop(
                image,
                detector,
                segmenter,
                margin=args.margin,
                confidence_floor=args.confidence_floor,
                source=path,
            )
        except (ExtractionError, ImageDecodeError, FileNotFoundError, ValueError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            continue
        crop_path = out / "crops" / f"{path.stem}.png"
        mask_path = out / "masks" / f"{path.stem}.mask.png"
        Image.fromarray(crop.astype(np.uint8), mode="RGB").save(crop_path)
        write_mask(crop_mask, mask_path)
        meta = {
            "source": str(path),
            "crop_box": list(box.as_tuple()),
            "detection_box": list(detection.box.as_tuple()),
            "confidence": float(detection.confidence),
        }
        (out / "crops" / f"{path.stem}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        entries.append(ManifestEntry(crop_path, labels.get(path.stem, 0), mask_path))
    if not entries:
        raise CommandError(f"extraction failed for all {len(images)} images")
    manifest_path = save_manifest(DatasetManifest(tuple(entries)), out / "manifest.csv")
    print(f"extracted {len(entries)}/{len(images)} images -> {manifest_path}")
    return EXIT_OK


# --- train / crossval ---------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args.config, args.seed, args.out)
    config.require("manifest")
    manifest = load_manifest(config.paths.manifest)
    data = load_samples(
        manifest,
        config.encoder,
        config.data.normalization,
        config.extraction.band_width,
        config.extraction.overlap_threshold,
        config.train.num_workers,
    )
    train_idx, val_idx = stratified_split(
        list(range(len(manifest))), manifest.labels, config.train.val_fraction, config.seed
    )
    out = Path(config.paths.output_dir)
    model = build_model(config, seed=config.seed)
    result = train(
        model,
        data.subset(train_idx),
        config.train,
        config.loss,
        val_set=data.subset(val_idx) if val_idx else None,
        out_dir=out,
        resume_from=args.resume,
        seed=config.seed,
    )
    config.save(out / "config.json")
    print(f"trained {len(result.loss_curve)} epochs; best epoch {result.best_epoch + 1}; checkpoint {result.checkpoint}")
    return EXIT_OK


def cmd_crossval(args: argparse.Namespace) -> int:
    config = _load_config(args.config, args.seed, args.out)
    config.require("manifest")
    manifest = load_manifest(config.paths.manifest)
    out = Path(config.paths.output_dir)
    result = crossvalidate(manifest, config, out)
    print(result.reports[config.train.decision_rule].to_text())
    print(f"metrics written to {out / 'metrics.csv'}")
    return EXIT_OK


# --- infer / rollout ----------------------------------------------------------


def _inference_entries(src: Path, need_masks: bool) -> list[ManifestEntry]:
    """Entries from a manifest file or from a folder of crops."""
    if src.is_file():
        return list(load_manifest(src).entries)
    if not src.is_dir():
        raise ConfigError(f"--input: not found: {src}")
    entries = []
    for path in list_images(src):
        mask = None
        for candidate in (path.with_name(f"{path.stem}.mask.png"), src.parent / "masks" / f"{path.stem}.mask.png"):
            if candidate.is_file():
                mask = candidate
                break
        if mask is None and need_masks:
            raise CommandError(f"{path.name}: missing mask (pass --no-edge-mask to run without one)")
        entries.append(ManifestEntry(path, 0, mask))
    if not entries:
        raise CommandError(f"no input images in {src}")
    return entries


def _load_checkpoint(path: str, allow_untrained: bool = False):
    if not Path(path).is_file():
        raise CommandError(f"checkpoint not found: {path}")
    model, _, meta = load_model(path)
    if "epoch" not in meta and "train_state" not in meta and not allow_untrained:
        raise CommandError(f"{path}: checkpoint was never trained")
    return model


def _inference_settings(args: argparse.Namespace, input_size: int) -> dict:
    config = RunConfig.load(args.config) if (args.config or _env_config()) else None
    if config is not None:
        settings = {
            "band_width": config.extraction.band_width,
            "overlap_threshold": config.extraction.overlap_threshold,
            "tau": config.inference.tau,
            "rule": config.inference.decision_rule,
            "merge": config.inference.merge,
            "normalization": config.data.normalization,
        }
    else:
        settings = {
            "band_width": scaled_band_width(input_size),
            "overlap_threshold": 0.25,
            "tau": 0.5,
            "rule": "micm_masked",
            "merge": False,
            "normalization": None,
        }
    for key in ("band_width", "overlap_threshold", "tau", "rule"):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if getattr(args, "merge", False):
        settings["merge"] = True
    return settings


def _env_config() -> str | None:
    return os.environ.get(CONFIG_ENV_VAR) or None


def cmd_infer(args: argparse.Namespace) -> int:
    model = _load_checkpoint(args.checkpoint, args.allow_untrained)
    size = model.config.input_size
    settings = _inference_settings(args, size[0])
    use_mask = not args.no_edge_mask
    entries = _inference_entries(Path(args.input), need_masks=use_mask)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    positives = 0
    for entry in entries:
        sample = load_sample(entry, size, settings["normalization"], mask_background=use_mask)
        if use_mask and sample.mask is None:
            raise CommandError(f"{entry.id}: missing mask (pass --no-edge-mask to run without one)")
        result = detect(
            sample,
            model,
            tau=settings["tau"],
            rule=settings["rule"],
            use_edge_mask=use_mask,
            band_width=settings["band_width"],
            overlap_threshold=settings["overlap_threshold"],
            merge=settings["merge"],
        )
        crop = read_rgb(entry.path)
        write_detection_json(result, out / f"{entry.id}.det.json", entry.id)
        render_overlay(crop, result, out / f"{entry.id}.boxes.png")
        render_overlay(crop, rollout_for(sample, model), out / f"{entry.id}.rollout.png")
        positives += result.bag_label
    print(f"processed {len(entries)} images, {positives} predicted positive -> {out}")
    return EXIT_OK


def cmd_rollout(args: argparse.Namespace) -> int:
    model = _load_checkpoint(args.checkpoint, args.allow_untrained)
    size = model.config.input_size
    settings = _inference_settings(args, size[0])
    entries = _inference_entries(Path(args.input), need_masks=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for entry in entries:
        sample = load_sample(entry, size, settings["normalization"])
        render_overlay(read_rgb(entry.path), rollout_for(sample, model), out / f"{entry.id}.rollout.png")
    print(f"wrote {len(entries)} rollout maps -> {out}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="patchmil", description="Tooth-mark detection with transformer patches as multiple-instance proposals.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract", help="crop and mask tongue images")
    p.add_argument("--input", required=True, help="folder of raw images")
    p.add_argument("--out", required=True, help="output folder for crops, masks and manifest.csv")
    p.add_argument("--adapters", choices=("stub", "external"), default="stub")
    p.add_argument("--detector", help="module:factory for an external detector")
    p.add_argument("--segmenter", help="module:factory for an external segmenter")
    p.add_argument("--labels", help="CSV with 'id,label' columns (id = image file stem)")
    p.add_argument("--margin", type=int, default=8)
    p.add_argument("--confidence-floor", type=float, default=0.5)
    p.set_defaults(func=cmd_extract)

    for name, func, text in (
        ("train", cmd_train, "train one model with a validation split"),
        ("crossval", cmd_crossval, "stratified k-fold cross-validation"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON run config (default: $PATCHMIL_CONFIG)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="override paths.output_dir")
        if name == "train":
            p.add_argument("--resume", help="last.npz to continue from")
        p.set_defaults(func=func)

    for name, func, text in (
        ("infer", cmd_infer, "bag prediction, boxes and overlays"),
        ("rollout", cmd_rollout, "attention rollout heatmaps"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--input", required=True, help="manifest CSV or folder of crops")
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="JSON run config for inference settings")
        p.add_argument("--band-width", dest="band_width", type=int)
        p.add_argument("--overlap-threshold", dest="overlap_threshold", type=float)
        p.add_argument("--allow-untrained", action="store_true", help=argparse.SUPPRESS)
        if name == "infer":
            p.add_argument("--tau", type=float)
            p.add_argument("--rule", choices=DECISION_RULES)
            p.add_argument("--no-edge-mask", action="store_true", help="allow boxes anywhere on the grid")
            p.add_argument("--merge", action="store_true", help="merge edge-adjacent boxes")
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CommandError, CheckpointError, TrainingError, ExtractionError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
