"""``icnt`` command line: synth, train, eval, features, gradcheck.

Exit codes: 0 success, 1 runtime or verification failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import parallel
from .config import ConfigError, RunConfig, config_from_text, read_config_file, resolve
from .data import DataError, DatasetIndex, LoadedSplit, load_split, scan_image_folder, split_dataset
from .head import Model
from .metrics import confusion_matrix, emit_reports, pca3, precision_recall_f1, roc_auc, softmax
from .synth import make_synthetic_tree
from .train import (
    CheckpointError,
    EpochLog,
    argmax_predictions,
    fit,
    load_checkpoint,
    predict,
    save_checkpoint,
    verify_shapes,
)
from .verify import SCOPES, build_checks, run_checks

log = logging.getLogger("icnt")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# flag dest -> config key
FLAG_KEYS = {
    "seed": "train.seed",
    "lr": "train.learning_rate",
    "epochs": "train.epochs",
    "lambda_fs": "loss.lambda_fs",
    "batch": "train.batch_size",
    "img_size": "model.img_size",
    "data": "paths.data",
    "out": "paths.out",
}


class UsageError(Exception):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--data", metavar="PATH", help="ImageFolder root")
    p.add_argument("--out", metavar="PATH", help="output directory")
    p.add_argument("--seed", type=int, metavar="U64")
    p.add_argument("--threads", type=int, metavar="N", help="worker threads (falls back to $ICNT_THREADS)")
    p.add_argument("--preset", choices=["icnt", "cnt", "basecnn"])
    p.add_argument("--protocol", choices=["results", "methods"], help="learning-rate/epoch protocol")
    p.add_argument("--lr", type=float, metavar="F")
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--lambda-fs", type=float, metavar="F")
    p.add_argument("--batch", type=int, metavar="N")
    p.add_argument("--img-size", type=int, metavar="N")
    p.add_argument("--full-size", action="store_true", help="224px input with the tiny-size backbone")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icnt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic ImageFolder tree")
    _common(p)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=64)

    p = sub.add_parser("train", help="train and keep the best-val checkpoint")
    _common(p)

    for name, text in (("eval", "evaluate a checkpoint and write metric CSVs"),
                       ("features", "dump eval-mode prelogits to CSV")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", metavar="PATH", required=True)
        p.add_argument("--split", choices=["train", "val", "test"], default="test")
        if name == "features":
            p.add_argument("--output", metavar="PATH", help="CSV path (default OUT/features.csv)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--scope", choices=SCOPES, default="full")
    p.add_argument("--eps", type=float, default=1e-5)
    return parser


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def resolve_config(args: argparse.Namespace) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else None
    flags = {key: getattr(args, dest) for dest, key in FLAG_KEYS.items()}
    if args.threads is not None:
        flags["train.threads"] = args.threads
    elif os.environ.get("ICNT_THREADS"):
        flags["train.threads"] = parallel.threads_from_env()
    return resolve(file_values, flags, args.preset, args.protocol, args.full_size)


def resolve_threads(args: argparse.Namespace) -> int:
    """--threads, then $ICNT_THREADS, then train.threads from --config, then 8."""
    if args.threads is not None:
        return args.threads
    default = 8
    if args.config and os.path.isfile(args.config):
        raw = read_config_file(args.config).get("train.threads")
        if raw is not None:
            try:
                default = int(raw)
            except ValueError:
                raise ConfigError(f"bad value {raw!r} for train.threads") from None
    return parallel.threads_from_env(default=default)


def _data_root(path: str) -> Path:
    if not path:
        raise UsageError("no data root given (use --data or paths.data)")
    root = Path(path)
    if not root.is_dir():
        raise UsageError(f"data root not found: {root}")
    return root


def _out_dir(path: str, fallback: str) -> Path:
    out = Path(path or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _pick(index: DatasetIndex, cfg: RunConfig, which: str) -> DatasetIndex:
    train, val, test = split_dataset(index, cfg.split)
    return {"train": train, "val": val, "test": test}[which]


def _load(index: DatasetIndex, cfg: RunConfig) -> LoadedSplit:
    return load_split(index, cfg.model.img_size, cfg.backbone.in_channels)


def _checkpoint_model(path: str, args: argparse.Namespace) -> tuple[Model, RunConfig, dict[str, str]]:
    arrays, meta = load_checkpoint(path)
    cfg = config_from_text(meta)
    extras = {k[5:].strip(): v.strip() for k, _, v in (ln.partition("=") for ln in meta.splitlines())
              if k.startswith("meta.")}
    if args.data:
        cfg.paths.data = args.data
    if args.img_size is not None and args.img_size != cfg.model.img_size:
        raise UsageError(f"--img-size {args.img_size} does not match checkpoint ({cfg.model.img_size})")
    model = Model.init(cfg.model_config(), np.random.default_rng(0))
    verify_shapes(arrays, {k: v.shape for k, v in model.params.items()}, path)
    model.load_arrays(arrays)
    return model, cfg, extras


def _check_classes(index: DatasetIndex, extras: dict[str, str]) -> None:
    saved = extras.get("class_names")
    if saved is not None and saved.split(",") != index.class_names:
        raise CheckpointError(f"checkpoint classes [{saved}] do not match data classes {index.class_names}")


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args: argparse.Namespace) -> int:
    out = args.out or args.data
    if not out:
        raise UsageError("synth needs --out")
    root = make_synthetic_tree(out, args.classes, args.per_class, args.size, args.seed or 0)
    print(f"wrote {args.classes * args.per_class} images to {root}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    root = _data_root(cfg.paths.data)
    out = _out_dir(cfg.paths.out, "runs/train")
    index = scan_image_folder(root)
    cfg.head.n_class = len(index.class_names)
    cfg.validate()
    (out / "run_config.txt").write_text(cfg.to_text(), encoding="utf-8")

    train_idx, val_idx, _ = split_dataset(index, cfg.split)
    train, val = _load(train_idx, cfg), _load(val_idx, cfg)
    tcfg = cfg.train_config()
    model = Model.init(cfg.model_config(), np.random.default_rng(np.random.SeedSequence([tcfg.seed, 0])))
    print(f"{len(train)} train / {len(val)} val images, {model.num_parameters()} parameters")
    print(EpochLog.HEADER)
    result = fit(model, train, val, tcfg, out / "epochs.csv", on_epoch=lambda e: print(e.csv_row(), flush=True))

    # the output directory is not model state; keep it out so reruns elsewhere give identical bytes
    meta = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, out="")).to_text() + (
        f"meta.best_epoch = {result.best_epoch}\n"
        f"meta.best_val_acc = {result.best_val_acc!r}\n"
        f"meta.class_names = {','.join(index.class_names)}\n"
    )
    save_checkpoint(result.best_params, meta, out / "best.ckpt")
    save_checkpoint(result.final_params, meta, out / "last.ckpt")
    print(f"best epoch {result.best_epoch} val_acc {result.best_val_acc:.6f} -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    model, cfg, extras = _checkpoint_model(args.checkpoint, args)
    root = _data_root(cfg.paths.data)
    out = _out_dir(args.out, "runs/eval")
    index = scan_image_folder(root)
    _check_classes(index, extras)
    split = _load(_pick(index, cfg, args.split), cfg)
    logits, feats = predict(model, split)
    labels = split.labels
    k = len(index.class_names)
    cm = confusion_matrix(argmax_predictions(logits), labels, k, index.class_names)
    metrics = precision_recall_f1(cm)
    rocs = roc_auc(softmax(logits), labels, index.class_names)
    pca = pca3(feats)
    emit_reports(cm, metrics, rocs, pca, labels, out, split.paths)
    print(f"split {args.split}: n={len(split)} accuracy={metrics.accuracy:.6f} "
          f"macro_f1={metrics.macro['f1']:.6f} weighted_f1={metrics.weighted['f1']:.6f}")
    return EXIT_OK


def cmd_features(args: argparse.Namespace) -> int:
    model, cfg, extras = _checkpoint_model(args.checkpoint, args)
    root = _data_root(cfg.paths.data)
    index = scan_image_folder(root)
    _check_classes(index, extras)
    split = _load(_pick(index, cfg, args.split), cfg)
    _, feats = predict(model, split)
    path = Path(args.output) if args.output else _out_dir(args.out, "runs/features") / "features.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_features(path, feats, split.labels, split.paths)
    print(f"wrote {len(split)} rows x {feats.shape[1]} features to {path}")
    return EXIT_OK


def write_features(path, feats: np.ndarray, labels, paths) -> None:
    header = [f"f{i}" for i in range(feats.shape[1])] + ["label", "path"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row, lab, p in zip(feats, labels, paths):
            fh.write(",".join(f"{v:.9g}" for v in row) + f",{int(lab)},{p}\n")


def read_features(path) -> tuple[np.ndarray, np.ndarray, list[str]]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        d = sum(h.startswith("f") and h[1:].isdigit() for h in header)
        feats, labels, paths = [], [], []
        for line in fh:
            parts = line.rstrip("\n").split(",", d + 1)
            feats.append([float(v) for v in parts[:d]])
            labels.append(int(parts[d]))
            paths.append(parts[d + 1])
    return np.array(feats), np.array(labels), paths


def cmd_gradcheck(args: argparse.Namespace) -> int:
    outcomes = run_checks(build_checks(args.scope, args.seed or 0), args.eps)
    for o in outcomes:
        print(o.line())
    failed = sum(not o.passed for o in outcomes)
    print(f"{len(outcomes) - failed}/{len(outcomes)} checks passed")
    return EXIT_OK if not failed else EXIT_FAIL


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "features": cmd_features,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        threads = resolve_threads(args)
        parallel.set_worker_threads(threads)
    except (ValueError, ConfigError) as exc:
        print(f"icnt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"icnt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FloatingPointError, OSError, ValueError, RuntimeError) as exc:
        print(f"icnt {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        parallel.shutdown_workers()


if __name__ == "__main__":
    sys.exit(main())
