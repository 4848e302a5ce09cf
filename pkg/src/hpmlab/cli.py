"""Command-line entry point: gen-corpus, pretrain, probe, heatmap.

Exit codes: 0 success, 1 runtime failure (non-finite loss, I/O), 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, VersionError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig
from .data import (
    FormatError,
    SyntheticCorpusSpec,
    generate_synthetic_corpus,
    load_corpus,
    load_labels,
    patchify,
    save_corpus,
    save_labels,
)
from .model import teacher_forward
from .probe import K_VALUES, export_heatmap, measured_patch_losses, probe_report
from .trainer import NonFiniteLossError, Trainer, model_from_checkpoint

log = logging.getLogger("hpmlab")

CORPUS_NAME = "corpus.hpmc"
LABELS_NAME = "labels.csv"
HELDOUT_NAME = "heldout.hpmc"
HELDOUT_LABELS_NAME = "heldout_labels.csv"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _labels_for(corpus: Path, explicit: str | None, default_name: str) -> Path | None:
    if explicit:
        return Path(explicit)
    guess = corpus.with_name(default_name)
    return guess if guess.exists() else None


def _load_labeled(corpus: Path, labels: Path | None):
    images = load_corpus(corpus)
    if labels is None:
        return images, None, None
    y, textured = load_labels(labels)
    if len(y) != len(images):
        raise UsageError(f"{labels} has {len(y)} rows but {corpus} holds {len(images)} images")
    return images, y, textured


def _check_k(ks, train_size: int) -> None:
    bad = [k for k in ks if k < 1 or k > train_size]
    if bad:
        raise UsageError(f"k={bad[0]} must lie in [1, {train_size}] (k-NN train size)")


def _config_from_args(args) -> TrainConfig:
    text = Path(args.config).read_text() if args.config else ""
    overrides = {
        "gamma": args.gamma, "alpha_0": args.alpha0, "alpha_T": args.alphaT, "mask_mode": args.mode,
        "direction": args.direction, "learn_to_mask": args.learn_to_mask, "pred_loss": args.pred_loss,
        "target": args.target, "epochs": args.epochs, "batch_size": args.batch_size, "base_lr": args.base_lr,
        "warmup_epochs": args.warmup_epochs, "weight_decay": args.weight_decay, "momentum": args.momentum,
        "seed": args.seed, "checkpoint_every": args.checkpoint_every,
    }
    return TrainConfig.from_text(text, **overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_corpus(args) -> int:
    height = args.height or args.size
    width = args.width or args.size
    spec = SyntheticCorpusSpec(count=args.n + args.holdout, height=height, width=width, patch=args.patch,
                               layout=args.layout, block=args.block, tiles=args.tiles, grade=args.grade,
                               contrast=tuple(args.contrast), seed=args.seed)
    try:
        corpus = generate_synthetic_corpus(spec)
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = corpus.subset(np.arange(args.n))
    save_corpus(out / CORPUS_NAME, train.images)
    save_labels(out / LABELS_NAME, train)
    written = [CORPUS_NAME, LABELS_NAME]
    if args.holdout:
        held = corpus.subset(np.arange(args.n, args.n + args.holdout))
        save_corpus(out / HELDOUT_NAME, held.images)
        save_labels(out / HELDOUT_LABELS_NAME, held)
        written += [HELDOUT_NAME, HELDOUT_LABELS_NAME]
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def cmd_pretrain(args) -> int:
    out = Path(args.out)
    corpus = Path(args.corpus)
    images, labels, _ = _load_labeled(corpus, _labels_for(corpus, args.labels, LABELS_NAME))
    if args.resume:
        trainer = Trainer.resume(args.resume, images, out_dir=out)
        config = trainer.config
    else:
        config = _config_from_args(args)
        try:
            trainer = Trainer(config, images, patch=args.patch, out_dir=out)
        except ValueError as e:
            raise UsageError(str(e)) from None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(config.to_text())
    log.info("training %d images, %d steps/epoch, lr %.3g", len(images), trainer.steps_per_epoch, config.lr)
    try:
        trainer.fit(until_epoch=args.until)
    except NonFiniteLossError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    save_checkpoint(out / "checkpoint_last.hpmk", trainer.checkpoint())

    eval_path = Path(args.eval_corpus) if args.eval_corpus else corpus.with_name(HELDOUT_NAME)
    if labels is None or not eval_path.exists():
        log.info("no labeled held-out corpus; skipping the probe report")
        return 0
    ev_images, ev_labels, ev_textured = _load_labeled(
        eval_path, _labels_for(eval_path, args.eval_labels, HELDOUT_LABELS_NAME))
    if ev_labels is None:
        log.info("held-out corpus has no labels; skipping the probe report")
        return 0
    report = probe_report(trainer.student, trainer.ema.teacher, trainer.patches, labels,
                          patchify(ev_images, trainer.geometry.patch).values.astype(np.float32), ev_labels,
                          ev_textured, k_values=[k for k in K_VALUES if k <= len(labels)],
                          gamma=config.gamma, target=config.target)
    (out / "probe.csv").write_text(report.to_csv())
    print(report.pretty())
    return 0


def _checkpoint_model(path: str, which: str):
    try:
        ckpt = load_checkpoint(path)
    except VersionError as e:
        raise UsageError(f"{path}: {e}") from None
    model, config = model_from_checkpoint(ckpt, which)
    return ckpt, model, config


def cmd_probe(args) -> int:
    ckpt, student, config = _checkpoint_model(args.checkpoint, "student")
    teacher, _ = model_from_checkpoint(ckpt, "teacher")
    patch = int(ckpt.meta.get("patch", 4))
    corpus = Path(args.corpus)
    images, labels, _ = _load_labeled(corpus, _labels_for(corpus, args.labels, LABELS_NAME))
    if labels is None:
        raise UsageError(f"no labels for {corpus}; pass --labels")
    _check_k(args.k, len(images))
    eval_path = Path(args.eval_corpus) if args.eval_corpus else corpus.with_name(HELDOUT_NAME)
    if not eval_path.exists():
        raise UsageError(f"held-out corpus {eval_path} not found; pass --eval-corpus")
    ev_images, ev_labels, ev_textured = _load_labeled(
        eval_path, _labels_for(eval_path, args.eval_labels, HELDOUT_LABELS_NAME))
    if ev_labels is None:
        raise UsageError(f"no labels for {eval_path}; pass --eval-labels")
    to_patches = lambda x: patchify(x, patch).values.astype(np.float32)  # noqa: E731
    report = probe_report(student, teacher, to_patches(images), labels, to_patches(ev_images), ev_labels,
                          ev_textured, k_values=args.k, n_masks=args.n_masks, gamma=config.gamma,
                          seed=args.seed, target=config.target)
    if args.out:
        Path(args.out).write_text(report.to_csv())
    print(report.pretty())
    return 0


def cmd_heatmap(args) -> int:
    ckpt, student, config = _checkpoint_model(args.checkpoint, "student")
    teacher, _ = model_from_checkpoint(ckpt, "teacher")
    patch = int(ckpt.meta.get("patch", 4))
    images = load_corpus(args.corpus)
    bad = [i for i in args.images if not 0 <= i < len(images)]
    if bad:
        raise UsageError(f"image index {bad[0]} out of range for {len(images)} images")
    batch = patchify(images[args.images], patch)
    patches = batch.values.astype(np.float32)
    if args.source == "measured":
        rng = np.random.Generator(np.random.PCG64(args.seed))
        values, _ = measured_patch_losses(student, patches, args.n_masks, config.gamma, rng, config.target, teacher)
        values = np.nan_to_num(values, nan=0.0)
    else:
        values = teacher_forward(teacher, patches).pred_loss.data
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for row, idx in enumerate(args.images):
        paths = export_heatmap(values[row], batch.geometry, out / f"heatmap_{idx:04d}.pgm", image=images[idx])
        print(" ".join(str(p) for p in paths))
    return 0


# ---------------------------------------------------------------------------
# parser


def _on_off(text: str) -> bool:
    low = text.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hpmlab", description="Hard-patches-mining masked image modeling lab")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus with known textured patches")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--holdout", type=int, default=0, help="extra images written as a held-out split")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--layout", choices=("half", "quadrant"), default=SyntheticCorpusSpec.layout,
                   help="texture fills one half of the image, or a block inside one quadrant")
    p.add_argument("--block", type=int, default=SyntheticCorpusSpec.block,
                   help="quadrant layout: texture block side, in patches")
    p.add_argument("--tiles", type=int, default=SyntheticCorpusSpec.tiles,
                   help="size of the shared texture bank (0 = a fresh tile per image)")
    p.add_argument("--grade", type=float, default=SyntheticCorpusSpec.grade)
    p.add_argument("--contrast", type=float, nargs=2, metavar=("LO", "HI"),
                   default=list(SyntheticCorpusSpec.contrast))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="run HPM pre-training")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels")
    p.add_argument("--eval-corpus")
    p.add_argument("--eval-labels")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="`key = value` file; flags override it")
    p.add_argument("--resume", help="continue from a checkpoint")
    p.add_argument("--until", type=int, help="stop after this many completed epochs")
    p.add_argument("--patch", type=int, default=4)
    p.add_argument("--gamma", type=float)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--alphaT", type=float)
    p.add_argument("--mode", choices=["argmax", "argmin"])
    p.add_argument("--direction", choices=["easy-to-hard", "hard-to-easy"])
    p.add_argument("--learn-to-mask", type=_on_off, metavar="on|off")
    p.add_argument("--pred-loss", "--loss-pred", dest="pred_loss", choices=["relative", "absolute", "none"])
    p.add_argument("--target", choices=["pixel", "ema"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--base-lr", type=float)
    p.add_argument("--warmup-epochs", type=int)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="k-NN and loss-ranking report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="k-NN reference set")
    p.add_argument("--labels")
    p.add_argument("--eval-corpus")
    p.add_argument("--eval-labels")
    p.add_argument("--k", type=int, nargs="+", default=list(K_VALUES))
    p.add_argument("--n-masks", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write the report as CSV")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("heatmap", help="per-patch loss heatmaps as PGM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--images", type=int, nargs="+", default=[0])
    p.add_argument("--source", choices=["predicted", "measured"], default="predicted")
    p.add_argument("--n-masks", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)
    return parser


def _thread_limit():
    raw = os.environ.get("HPM_THREADS")
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"HPM_THREADS must be a positive integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _thread_limit():
            return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FormatError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
