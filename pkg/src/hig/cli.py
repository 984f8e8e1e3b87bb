"""Command-line entry point: ``hig generate | validate | train | evaluate | inspect``.

Exit codes: 0 success, 1 usage or validation failure, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

from . import __version__
from .annotations import extract_ground_truth_triplets, parse_annotations, validate
from .classifier import CATEGORIES
from .config import RunConfig, load_config
from .data import MANIFEST, VIDEOS_DIR, load_dataset, read_manifest, sha256
from .errors import AnnotationParseError, AnnotationValidationError, ConfigError, DivergenceError, HIGError
from .evaluation import (
    evaluate_predictions,
    evaluate_run,
    predictions_path,
    write_metrics,
    write_predictions,
)
from .graph import build_base_level
from .model import HIGModel
from .synthgen import generate_dataset
from .training import CHECKPOINT_FORMAT, Trainer, load_checkpoint, save_checkpoint

log = logging.getLogger("hig")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _probability(text: str) -> float:
    value = float(text)
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration JSON")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--threads", type=_positive, default=1,
                        help="worker cap; the engine runs single-threaded, so any value >= 1 is honoured")
    common.add_argument("-v", "--verbose", action="store_true")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--sampling-rate", type=_positive, help="keep every N-th frame")
    model_flags.add_argument("--k", type=_positive, help="top-k neighbours per node")
    model_flags.add_argument("--confidence-threshold", type=_probability,
                             help="cross-level selection threshold")

    parser = _Parser(prog="hig", description="Hierarchical interlacement graph toolkit")
    parser.add_argument("--version", action="version", version=f"hig {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--videos", type=int, help="override scenario.videos")

    p = sub.add_parser("validate", parents=[common], help="check every annotation file of a dataset")
    p.add_argument("dataset", type=Path)

    p = sub.add_parser("train", parents=[common, model_flags], help="train a model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=_positive, help="stop after this many epochs")

    p = sub.add_parser("evaluate", parents=[common, model_flags], help="score a checkpoint or prediction files")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path, help="directory of <video_id>.predictions.json files")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=["train", "val"])
    p.add_argument("--repeats", type=_positive, default=3, help="timing repeats; the fastest is reported")

    p = sub.add_parser("inspect", parents=[common], help="summarize a checkpoint, dataset or annotation file")
    p.add_argument("path", type=Path)
    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    if args.seed is not None:
        cfg.scenario.seed = cfg.train.seed = cfg.hierarchy.seed = args.seed
    if getattr(args, "sampling_rate", None) is not None:
        cfg.sampling_rate = args.sampling_rate
    if getattr(args, "k", None) is not None:
        cfg.hierarchy.k = args.k
    if getattr(args, "confidence_threshold", None) is not None:
        cfg.hierarchy.confidence_threshold = args.confidence_threshold
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args, cfg: RunConfig) -> int:
    if args.videos is not None:
        if args.videos < 1:
            raise UsageError("--videos must be at least 1")
        cfg.scenario.videos = args.videos
    manifest = generate_dataset(cfg.scenario, args.out)
    digest = sha256((args.out / MANIFEST).read_bytes())
    print(f"wrote {len(manifest['videos'])} videos to {args.out}")
    print(f"manifest sha256 {digest}")
    return EXIT_OK


def _annotation_files(root: Path) -> list[Path]:
    if (root / MANIFEST).is_file():
        return [root / v["annotations"] for v in read_manifest(root)["videos"]]
    folder = root / VIDEOS_DIR if (root / VIDEOS_DIR).is_dir() else root
    return sorted(folder.glob("*.annotations.json"))


def cmd_validate(args, cfg: RunConfig) -> int:
    root = args.dataset
    if not root.is_dir():
        raise UsageError(f"not a directory: {root}")
    files = _annotation_files(root)
    if not files:
        print("no annotations found")
        return EXIT_USAGE
    expected = {}
    if (root / MANIFEST).is_file():
        expected = {root / v["annotations"]: v.get("sha256", {}).get("annotations")
                    for v in read_manifest(root)["videos"]}
    bad = 0
    for path in files:
        problems = []
        if not path.is_file():
            problems.append("file is missing")
        else:
            raw = path.read_bytes()
            try:
                problems += [str(v) for v in validate(parse_annotations(raw, validate_file=False))]
            except (AnnotationParseError, AnnotationValidationError) as exc:
                problems.append(str(exc))
            if expected.get(path) and expected[path] != sha256(raw):
                problems.append("sha256 differs from the manifest")
        if problems:
            bad += 1
            for msg in problems:
                print(f"{path}: {msg}")
    print(f"{len(files) - bad}/{len(files)} files valid")
    return EXIT_OK if bad == 0 else EXIT_USAGE


def _build_model(cfg: RunConfig, input_dim: int, vocab) -> HIGModel:
    hc = cfg.hierarchy.build(input_dim)
    try:
        return HIGModel(hc, vocab, cfg.hierarchy.hidden_width(hc), cfg.scenario.applicability(),
                        seed=cfg.hierarchy.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _dataset_vocab(cfg: RunConfig, root: Path) -> dict:
    """Vocabulary sizes declared by the dataset manifest, falling back to the config."""
    declared = read_manifest(root).get("vocabulary", {})
    sizes = cfg.scenario.category_sizes()
    for c in CATEGORIES:
        if c.descriptor in declared:
            sizes[c] = int(declared[c.descriptor]["size"])
    return sizes


def cmd_train(args, cfg: RunConfig) -> int:
    samples = load_dataset(args.data, cfg.split, cfg.sampling_rate)
    samples = [s for s in samples if s.frames]
    if not samples:
        raise UsageError(f"no videos to train on in {args.data}")
    input_dim = next(len(n.feature) for s in samples for f in s.frames for n in f)
    model = _build_model(cfg, input_dim, _dataset_vocab(cfg, args.data))
    trainer = Trainer(model, cfg.train)
    for s in samples:
        cells = trainer.base_cells(s)
        log.info("video %s: %d frames at sampling rate %d -> %d level-1 cells",
                 s.video_id, s.num_frames, cfg.sampling_rate, len(cells))
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    trainer.fit(samples, args.epochs, rows.append)
    _write_loss_log(args.out / "loss.csv", rows, model.config.levels)
    meta = {"config": cfg.to_json(), "dataset": str(args.data), "sampling_rate": cfg.sampling_rate,
            "videos": [s.video_id for s in samples]}
    save_checkpoint(trainer, args.out / "checkpoint.json", meta)
    final = rows[-1].loss if rows else float("nan")
    print(f"trained {len(rows)} epochs on {len(samples)} videos; final loss {final:.6f}")
    print(f"checkpoint {args.out / 'checkpoint.json'}")
    return EXIT_OK


def _write_loss_log(path: Path, rows, levels: int) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "stage", "trainable", "loss"] + [f"level_{l}" for l in range(1, levels + 1)])
        for m in rows:
            per_level = [repr(m.level_losses[l]) if l in m.level_losses else "" for l in range(1, levels + 1)]
            writer.writerow([m.epoch, m.stage, " ".join(map(str, m.trainable)), repr(m.loss)] + per_level)


def cmd_evaluate(args, cfg: RunConfig) -> int:
    criteria = cfg.match.criteria()
    split = args.split or cfg.split
    if args.predictions is not None:
        rows = evaluate_run(args.predictions, args.data, cfg.match.ks, criteria, split, cfg.sampling_rate)
        write_metrics(rows, args.out, {"source": "predictions"})
        _print_rows(rows)
        return EXIT_OK
    if not args.checkpoint.is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    trainer, _ = load_checkpoint(args.checkpoint)
    model = trainer.model
    threshold = model.config.confidence_threshold if args.confidence_threshold is None else args.confidence_threshold
    k = model.config.k if args.k is None else args.k
    samples = [s for s in load_dataset(args.data, split, cfg.sampling_rate) if s.frames]
    if not samples:
        raise UsageError(f"no videos to evaluate in {args.data}")
    pred_dir = args.out / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    best, predictions = float("inf"), {}
    for _ in range(args.repeats):
        start = time.perf_counter()
        predictions = {s.video_id: model.predict(build_base_level(s.frames, k, model.config.dims[0]), threshold)
                       for s in samples}
        best = min(best, time.perf_counter() - start)
    for vid, preds in predictions.items():
        write_predictions(predictions_path(pred_dir, vid), preds)
    frames = sum(s.num_frames for s in samples)
    level1 = {s.video_id: s.num_frames for s in samples}
    timing = {"frames": frames, "seconds": best, "frames_per_second": frames / best if best > 0 else None,
              "seconds_per_frame": best / frames, "repeats": args.repeats, "sampling_rate": cfg.sampling_rate,
              "level1_cells": level1}
    rows = evaluate_predictions(predictions, {s.video_id: s.triplets for s in samples}, cfg.match.ks, criteria)
    write_metrics(rows, args.out, {"timing": timing, "confidence_threshold": threshold, "k": k})
    _print_rows(rows)
    print(f"inference: {frames} frames in {best:.4f} s "
          f"({timing['frames_per_second']:.1f} frames/s, {timing['seconds_per_frame'] * 1e3:.3f} ms/frame)")
    return EXIT_OK


def _print_rows(rows) -> None:
    print(f"{'category':<12} {'K':>4} {'R':>8} {'mR':>8}")
    for r in rows:
        print(f"{r.category:<12} {r.k:>4} {r.recall:>8.4f} {r.mean_recall:>8.4f}")


def cmd_inspect(args, cfg: RunConfig) -> int:
    path = args.path
    if not path.exists():
        raise UsageError(f"no such path: {path}")
    if path.is_dir():
        return _inspect_dataset(path)
    raw = path.read_bytes()
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        doc = None
    if isinstance(doc, dict) and doc.get("format") == CHECKPOINT_FORMAT:
        return _inspect_checkpoint(path)
    ann = parse_annotations(raw, validate_file=False)
    print(f"video {ann.video_id}: {ann.num_frames} frames")
    _print_annotation_stats([ann])
    return EXIT_OK


def _inspect_checkpoint(path: Path) -> int:
    trainer, doc = load_checkpoint(path)
    model = trainer.model
    cfg = model.config
    print(f"checkpoint {path}")
    print(f"levels L = {cfg.levels}; dims D_0..D_L = {list(cfg.dims)}")
    print(f"k = {cfg.k}; weight sharing = {cfg.weight_sharing.value}; nonlinearity = {cfg.nonlinearity.value}; "
          f"confidence threshold = {cfg.confidence_threshold}")
    print(f"vocab = { {c.value: n for c, n in model.vocab.items()} }; head hidden width = {model.hidden}")
    for p in model.parameters():
        print(f"  {p.name:<28} {str(p.value.shape):>10} {p.value.size:>8}")
    print(f"parameters: {model.parameter_count()}; epochs trained: {trainer.epoch}")
    return EXIT_OK


def _inspect_dataset(root: Path) -> int:
    files = _annotation_files(root)
    if not files:
        raise UsageError(f"no annotations found in {root}")
    anns = [parse_annotations(p.read_bytes(), validate_file=False) for p in files]
    print(f"dataset {root}: {len(anns)} videos, {sum(a.num_frames for a in anns)} frames")
    _print_annotation_stats(anns)
    return EXIT_OK


def _print_annotation_stats(anns) -> None:
    n = len(anns)
    subjects = [len({s.track_id for rec in a.data for s in rec.segments_info}) for a in anns]
    print(f"subjects per video: {sum(subjects) / n:.2f}")
    for c in CATEGORIES:
        counts = [sum(1 for t in extract_ground_truth_triplets(a) if t.category is c) for a in anns]
        print(f"{c.value:<12} triplets {sum(counts):>6}  per video {sum(counts) / n:.2f}")


COMMANDS = {
    "generate": cmd_generate,
    "validate": cmd_validate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "inspect": cmd_inspect,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, AnnotationParseError, AnnotationValidationError) as exc:
        print(f"hig {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"hig {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"hig {args.command}: training diverged: {exc} (video {exc.video_id}, level {exc.level})",
              file=sys.stderr)
        return EXIT_RUNTIME
    except (HIGError, OSError, ValueError) as exc:
        print(f"hig {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
