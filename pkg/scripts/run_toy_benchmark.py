"""Train TENet6-narrow on the synthetic toy corpus and check it learns.

Trains the standard model and an MTConv model (branches 3,5,7,9), fuses the
latter and checks the fused copy predicts the same class for every
validation item. Exits non-zero when train accuracy stays below
--min-accuracy or the fused predictions differ.

    python scripts/run_toy_benchmark.py [--iters 2000] [--seed 0]
"""

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT.resolve()))

from kws.cli import setup_logging
from kws.config import load_config, mfcc_config
from kws.dataset import make_toy_corpus
from kws.fusion import fuse_model
from kws.model import DepthwiseKind, build_model, count_report
from kws.trainer import FeaturePipeline, TrainConfig, evaluate, train


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--iters", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--items-per-class", type=int, default=40)
    parser.add_argument("--min-accuracy", type=float, default=0.95)
    args = parser.parse_args()

    cfg = load_config()
    setup_logging(cfg)
    mcfg = mfcc_config(cfg)
    corpus = make_toy_corpus(args.seed, args.items_per_class)
    pipeline = FeaturePipeline(corpus, mcfg)
    tcfg = TrainConfig(total_iterations=args.iters, seed=args.seed)

    failed = False
    for kind in (DepthwiseKind.standard(), DepthwiseKind.mtconv((3, 5, 7, 9))):
        model = build_model("TENet6-narrow", kind, args.seed)
        result = train(model, corpus, tcfg, mcfg)
        train_acc = evaluate(result.model, corpus, "train", pipeline).accuracy
        test = evaluate(result.model, corpus, "test", pipeline)
        print(f"{kind}: train {train_acc:.4f} validation {result.best_accuracy:.4f} test {test.accuracy:.4f}")
        if train_acc < args.min_accuracy:
            logging.error("%s reached only %.4f train accuracy", kind, train_acc)
            failed = True
        if kind.is_mtconv:
            fused = fuse_model(result.model)
            val = evaluate(result.model, corpus, "validation", pipeline)
            after = evaluate(fused, corpus, "validation", pipeline)
            before = np.argmax([r.scores for r in val.scores], axis=1)
            same = np.array_equal(before, np.argmax([r.scores for r in after.scores], axis=1))
            report = count_report(fused)
            print(f"fused: validation {after.accuracy:.4f} params {report.parameters} mults {report.multiplies} same argmax {same}")
            if not same:
                failed = True
    return 1 if failed else 0


if __name__ == "__main__":
    raise SystemExit(main())
