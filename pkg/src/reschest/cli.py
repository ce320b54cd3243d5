"""Command-line entry point: ``reschest {train,evaluate,predict}``.

Exit codes: 0 success, 2 configuration error, 3 dataset or checkpoint
error, 4 training failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .data import ClassIndex, DatasetError, SplitSpec, make_batches, preprocess, scan_dataset, split_dataset
from .metrics import ConfusionMatrix, render_confusion_matrix, render_report
from .model import ModelConfig, forward
from .optim import sigmoid, softmax
from .train import TrainConfig, TrainingDivergedError, evaluate, fit

log = logging.getLogger("reschest")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAIN = 4

CHECKPOINT_NAME = "checkpoint.rcnc"
LOG_NAME = "train_log.jsonl"
RUN_LOG_NAME = "run.log"
REPORT_TXT = "report.txt"
REPORT_JSON = "report.json"

# flag dest -> config key; nested keys use "section.key"
_TRAIN_FLAGS = {
    "seed": "seed",
    "max_epochs": "max_epochs",
    "batch_size": "batch_size",
    "lr": "lr",
    "momentum": "momentum",
    "patience": "patience",
    "image_size": "image_size",
    "data_root": "data_root",
    "out": "out_dir",
    "stage_widths": "model.stage_widths",
    "blocks_per_stage": "model.blocks_per_stage",
    "head_hidden": "model.head_hidden",
    "train_frac": "split.train_frac",
    "val_frac": "split.val_frac",
    "test_frac": "split.test_frac",
    "split_seed": "split.seed",
}


class ConfigError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reschest", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="scan, split, train and report")
    tr.add_argument("--config", type=Path, help="JSON run configuration")
    tr.add_argument("--seed", type=int)
    tr.add_argument("--max-epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--momentum", type=float)
    tr.add_argument("--patience", type=int)
    tr.add_argument("--image-size", type=int)
    tr.add_argument("--data-root", type=Path)
    tr.add_argument("--out", type=Path)
    tr.add_argument("--stage-widths", type=_int_list)
    tr.add_argument("--blocks-per-stage", type=_int_list)
    tr.add_argument("--head-hidden", type=int)
    tr.add_argument("--train-frac", type=float)
    tr.add_argument("--val-frac", type=float)
    tr.add_argument("--test-frac", type=float)
    tr.add_argument("--split-seed", type=int)

    ev = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--data-root", type=Path, required=True)
    ev.add_argument("--json-out", type=Path)
    ev.add_argument(
        "--split",
        choices=("all", "train", "val", "test"),
        default="all",
        help="score one partition of the split recorded in the checkpoint",
    )
    ev.add_argument("--batch-size", type=int, default=32)

    pr = sub.add_parser("predict", help="classify individual images")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("images", nargs="+", type=Path)
    pr.add_argument("--json", action="store_true", help="machine-readable output")
    pr.add_argument("--sigmoid", action="store_true", help="show per-class sigmoid scores instead of softmax")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Config file values overridden by any flag that was given."""
    cfg: dict = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
    for dest, key in _TRAIN_FLAGS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if isinstance(value, Path):
            value = str(value)
        if "." in key:
            section, sub = key.split(".")
            cfg.setdefault(section, {})[sub] = value
        else:
            cfg[key] = value
    return cfg


def train_config_from(cfg: dict, out_dir: Path) -> TrainConfig:
    known = set(TrainConfig.__dataclass_fields__)
    extra = set(cfg) - known - {"data_root", "out_dir"}
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    kwargs = {k: v for k, v in cfg.items() if k in known}
    kwargs["checkpoint_path"] = str(out_dir / CHECKPOINT_NAME)
    kwargs["log_path"] = str(out_dir / LOG_NAME)
    try:
        model = kwargs.get("model", {})
        kwargs["model"] = ModelConfig(**model) if isinstance(model, dict) else model
        split = kwargs.get("split", {})
        kwargs["split"] = SplitSpec(**split) if isinstance(split, dict) else split
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def _attach_run_log(out_dir: Path) -> logging.Handler:
    handler = logging.FileHandler(out_dir / RUN_LOG_NAME, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("reschest").addHandler(handler)
    return handler


def cmd_train(args: argparse.Namespace) -> int:
    raw = resolve_config(args)
    if "data_root" not in raw:
        raise ConfigError("no dataset root: pass --data-root or set data_root in the config")
    out_dir = Path(raw.get("out_dir", "runs/latest"))
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = train_config_from(raw, out_dir)
    handler = _attach_run_log(out_dir)
    try:
        effective = cfg.to_dict() | {"data_root": str(raw["data_root"]), "out_dir": str(out_dir)}
        log.info("effective config: %s", json.dumps(effective, sort_keys=True))
        root = Path(raw["data_root"])
        scan = scan_dataset(root)
        log.info("scanned %s: counts %s, skipped %d", root, dict(zip(scan.index.names, scan.counts)), len(scan.skipped))
        datasets = split_dataset(scan.samples, cfg.split, strict=False)
        log.info("split sizes train/val/test: %s", [len(d) for d in datasets])
        for name, part in zip(("train", "validation", "test"), datasets):
            if not part:
                raise DatasetError(f"{name} partition is empty; {len(scan.samples)} images under {root}")
        result = fit(cfg, datasets, scan.index)
        text = render_report(result.report)
        (out_dir / REPORT_TXT).write_text(text)
        (out_dir / REPORT_JSON).write_text(render_report(result.report, "json"))
        log.info("best epoch %d of %d; test accuracy %.4f", result.best_epoch, len(result.history), result.report.accuracy)
        print(text, end="")
    finally:
        logging.getLogger("reschest").removeHandler(handler)
        handler.close()
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.to_params()
    scan = scan_dataset(args.data_root, ckpt.class_index)
    samples = scan.samples
    if args.split != "all":
        if not ckpt.run or "split" not in ckpt.run:
            raise ConfigError(f"--split {args.split}: checkpoint records no split specification")
        spec = SplitSpec(**ckpt.run["split"])
        samples = split_dataset(samples, spec, strict=False)[("train", "val", "test").index(args.split)]
    if not samples:
        raise DatasetError(f"no images found under {args.data_root}")
    report = evaluate(params, make_batches(samples, args.batch_size, None, ckpt.image_size), ckpt.class_index)
    print(render_report(report), end="")
    print()
    print(render_confusion_matrix(ConfusionMatrix(np.array(report.confusion_matrix), list(ckpt.class_index.names))), end="")
    if args.json_out:
        Path(args.json_out).write_text(render_report(report, "json"))
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    params = ckpt.to_params()
    names = list(ckpt.class_index.names)
    results = []
    for path in args.images:
        x = preprocess(path, ckpt.image_size)[None]
        logits = forward(params, x, training=False).data[0].astype(np.float64)
        probs = softmax(logits)
        scores = sigmoid(logits) if args.sigmoid else probs
        results.append(
            {
                "path": str(path),
                "prediction": names[int(np.argmax(probs))],
                "scores": dict(zip(names, map(float, scores))),
                "score_type": "sigmoid" if args.sigmoid else "softmax",
            }
        )
    if args.json:
        print(json.dumps(results, indent=2))
    else:
        for r in results:
            scores = "  ".join(f"{k}={v:.4f}" for k, v in r["scores"].items())
            print(f"{r['path']}: {r['prediction']}  [{scores}]")
    return EXIT_OK


_COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "predict": cmd_predict}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    console = logging.StreamHandler(sys.stderr)
    console.setLevel(logging.INFO if args.verbose else logging.WARNING)
    console.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    pkg_log = logging.getLogger("reschest")
    pkg_log.setLevel(logging.INFO)
    pkg_log.addHandler(console)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergedError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    finally:
        pkg_log.removeHandler(console)


if __name__ == "__main__":
    sys.exit(main())
