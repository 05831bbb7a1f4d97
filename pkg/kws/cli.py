"""Command-line surface: ``python -m kws.cli <command> ...`` or ``python main.py <command> ...``.

Commands:

  mfcc     --in clip.wav --out feat.bin
  train    (--data DIR | --toy) --variant tenet12 [--mtconv 3,5,7,9] --iters N --seed S --out model.tnet
  fuse     --in model.tnet --out fused.tnet
  infer    --model fused.tnet --in clip.wav
  count    (--variant tenet12 [--frames 98] | --all)
  eval     --model m.tnet (--data DIR | --toy) [--split test] [--scores scores.csv]
  roc      --scores scores.csv [--out roc.csv]
  toy-gen  --out DIR [--seed S] [--items-per-class N]

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Results go to stdout; logs and errors go to stderr.
"""

import argparse
import logging
import sys
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .config import corpus_config, load_config, mfcc_config, train_config
from .container import load_features, load_model, save_features, save_model
from .dataset import CLASS_NAMES, make_toy_corpus, scan_corpus, write_corpus
from .error_handler import ROOT, handle_failure
from .errors import UsageError
from .frontend import compute_mfcc, load_wav
from .fusion import fuse_model
from .model import DEFAULT_FRAMES, PUBLISHED_FOOTPRINT, DepthwiseKind, build_model, count_report, forward, make_spec
from .trainer import (
    FeaturePipeline,
    equal_error_point,
    evaluate,
    read_scores_csv,
    roc_points,
    train,
    write_metrics_csv,
    write_roc_csv,
    write_scores_csv,
)

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"
LOG_FILE = "kws.log"


def setup_logging(cfg: Optional[Dict[str, Any]] = None, verbose: bool = False) -> None:
    """stderr handler, plus a midnight-rotating file log when logging.dir is set.

    Handlers installed by an earlier call are replaced, others are left alone.
    """
    section = (cfg or {}).get("logging") or {}
    level_name = "DEBUG" if verbose else str(section.get("level", "INFO")).upper()
    level = getattr(logging, level_name, logging.INFO)
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_kws_handler", False):
            root.removeHandler(h)
            h.close()

    formatter = logging.Formatter(LOG_FORMAT)
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stderr)]
    log_dir = section.get("dir")
    if log_dir:
        try:
            p = Path(log_dir)
            if not p.is_absolute():
                p = ROOT / p
            p.mkdir(parents=True, exist_ok=True)
            # rotate at midnight every day and keep 30 days of logs
            handlers.append(
                TimedRotatingFileHandler(str(p / LOG_FILE), when="midnight", interval=1, backupCount=30, encoding="utf-8")
            )
        except Exception:
            # console-only if the file handler cannot be created
            pass
    for h in handlers:
        h.setFormatter(formatter)
        h._kws_handler = True
        root.addHandler(h)
    root.setLevel(level)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, usage=self.format_usage())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kws", description="TENet keyword spotting: features, training, fusion, inference")
    parser.add_argument("--config", help="Path to config JSON (defaults to config.json in project root)")
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("mfcc", help="Compute MFCC features of a WAV clip")
    p.add_argument("--in", dest="input", required=True, help="16-bit PCM mono WAV file")
    p.add_argument("--out", required=True, help="Feature container to write")

    p = sub.add_parser("train", help="Train a TENet variant")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", help="Corpus root (keyword directories + _background_noise_)")
    src.add_argument("--toy", action="store_true", help="Train on the synthetic toy corpus")
    p.add_argument("--variant", default="tenet12", help="tenet6, tenet12, tenet6-narrow or tenet12-narrow")
    p.add_argument("--mtconv", help="MTConv branch sizes (e.g. 3,5,7,9) or preset k9, k3-9, k3-5-9, k3-5-7-9")
    p.add_argument("--iters", type=int, help="Training iterations")
    p.add_argument("--seed", type=int, default=0, help="Seed for initialisation, sampling and augmentation")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--workers", type=int, help="Threads for batch assembly")
    p.add_argument("--no-augment", action="store_true", help="Disable noise and time-shift augmentation")
    p.add_argument("--toy-items", type=int, default=40, help="Items per class of the toy corpus")
    p.add_argument("--out", required=True, help="Model container to write")
    p.add_argument("--metrics", help="Metrics CSV (defaults to <out>.metrics.csv)")

    p = sub.add_parser("fuse", help="Fuse MTConv branches into single depthwise kernels")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("infer", help="Classify one WAV clip")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="input", required=True, help="WAV clip, or a feature container with --features")
    p.add_argument("--features", action="store_true", help="Input is a feature container from the mfcc command")

    p = sub.add_parser("count", help="Parameter and multiply counts of a variant")
    p.add_argument("--variant", default="tenet12")
    p.add_argument("--mtconv", help="Count an MTConv variant (reported in fused form)")
    p.add_argument("--frames", type=int, default=DEFAULT_FRAMES, help="Input frames T")
    p.add_argument("--all", action="store_true", help="Totals of all four variants against the reference footprints")

    p = sub.add_parser("eval", help="Accuracy and per-item scores on a split")
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data")
    src.add_argument("--toy", action="store_true")
    p.add_argument("--toy-items", type=int, default=40)
    p.add_argument("--toy-seed", type=int, default=0)
    p.add_argument("--split", default="test", choices=["train", "validation", "test"])
    p.add_argument("--scores", default="scores.csv", help="Scores CSV to write")

    p = sub.add_parser("roc", help="False-alarm / false-reject curve from a scores CSV")
    p.add_argument("--scores", required=True)
    p.add_argument("--out", default="roc.csv")

    p = sub.add_parser("toy-gen", help="Write the synthetic toy corpus to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--items-per-class", type=int, default=40)
    return parser


def _depthwise(text: Optional[str]) -> DepthwiseKind:
    if not text:
        return DepthwiseKind.standard()
    kind = DepthwiseKind.parse(text)
    if not kind.is_mtconv:
        raise UsageError(f"--mtconv expects branch sizes or a preset, got '{text}'")
    return kind


def _corpus(args, cfg):
    if args.toy:
        seed = getattr(args, "toy_seed", None)
        return make_toy_corpus(args.seed if seed is None else seed, args.toy_items)
    return scan_corpus(args.data, corpus_config(cfg), mfcc_config(cfg).sample_rate_hz)


def cmd_mfcc(args, cfg) -> int:
    mcfg = mfcc_config(cfg)
    clip = load_wav(args.input, mcfg.sample_rate_hz, mcfg.clip_seconds)
    feats = compute_mfcc(clip, mcfg)
    save_features(feats, args.out)
    logging.info("wrote %s features to %s", "x".join(str(s) for s in feats.shape), args.out)
    return 0


def cmd_train(args, cfg) -> int:
    kind = _depthwise(args.mtconv)
    tcfg = train_config(
        cfg,
        total_iterations=args.iters,
        seed=args.seed,
        batch_size=args.batch_size,
        eval_every=args.eval_every,
        workers=args.workers,
        augment=False if args.no_augment else None,
    )
    model = build_model(args.variant, kind, args.seed)
    result = train(model, _corpus(args, cfg), tcfg, mfcc_config(cfg))
    save_model(result.model, args.out)
    write_metrics_csv(result.metrics, args.metrics or f"{args.out}.metrics.csv")
    print(f"best validation accuracy {result.best_accuracy:.4f} at iteration {result.best_iteration}")
    return 0


def cmd_fuse(args, cfg) -> int:
    model = load_model(args.input)
    save_model(fuse_model(model), args.out)
    return 0


def cmd_infer(args, cfg) -> int:
    model = load_model(args.model)
    if args.features:
        feats = load_features(args.input)
    else:
        mcfg = mfcc_config(cfg)
        feats = compute_mfcc(load_wav(args.input, mcfg.sample_rate_hz, mcfg.clip_seconds), mcfg)
    _, probs = forward(model, feats, "infer")
    for i in np.argsort(-probs, kind="stable"):
        print(f"{CLASS_NAMES[i]}:{probs[i]:.6f}")
    return 0


def cmd_count(args, cfg) -> int:
    if args.frames < 1:
        raise UsageError(f"--frames must be positive, got {args.frames}")
    if args.all:
        print("variant,params,published_params,mults,published_mults")
        for name, (pub_params, pub_mults) in PUBLISHED_FOOTPRINT.items():
            report = count_report(make_spec(name), args.frames)
            print(f"{name},{report.parameters},{pub_params},{report.multiplies},{pub_mults}")
        return 0
    report = count_report(make_spec(args.variant, _depthwise(args.mtconv)), args.frames)
    sys.stdout.write(report.to_csv())
    return 0


def cmd_eval(args, cfg) -> int:
    model = load_model(args.model)
    corpus = _corpus(args, cfg)
    result = evaluate(model, corpus, args.split, FeaturePipeline(corpus, mfcc_config(cfg)))
    write_scores_csv(result.scores, args.scores)
    print(f"accuracy {result.accuracy:.4f} ({int(np.trace(result.confusion))}/{result.total}) on {args.split}")
    return 0


def cmd_roc(args, cfg) -> int:
    points = roc_points(read_scores_csv(args.scores))
    write_roc_csv(points, args.out)
    eer = equal_error_point(points)
    logging.info("operating point nearest equal error: threshold=%.4f far=%.4f frr=%.4f", eer.threshold, eer.far, eer.frr)
    print(f"eer_threshold {eer.threshold:.6f} far {eer.far:.6f} frr {eer.frr:.6f}")
    return 0


def cmd_toy_gen(args, cfg) -> int:
    corpus = make_toy_corpus(args.seed, args.items_per_class)
    n = write_corpus(corpus, args.out)
    logging.info("wrote %d files of the toy corpus to %s", n, args.out)
    return 0


COMMANDS = {
    "mfcc": cmd_mfcc,
    "train": cmd_train,
    "fuse": cmd_fuse,
    "infer": cmd_infer,
    "count": cmd_count,
    "eval": cmd_eval,
    "roc": cmd_roc,
    "toy-gen": cmd_toy_gen,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    cfg: Dict[str, Any] = {}
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:
        setup_logging(cfg)
        return handle_failure(cfg, e)

    cfg = load_config(Path(args.config) if args.config else None)
    setup_logging(cfg, args.verbose)
    try:
        return COMMANDS[args.command](args, cfg)
    except Exception as e:
        return handle_failure(cfg, e)


if __name__ == "__main__":
    raise SystemExit(main())
