"""Train every TENet variant with and without MTConv on a speech-commands corpus.

For each of the four variants this trains a standard model and an MTConv
model with the same seed, fuses the MTConv model, and reports test accuracy,
the accuracy gained by MTConv and the deployed parameter and multiply counts.
Models and metrics go under --out; a summary CSV is written to
--out/summary.csv.

    python scripts/run_full_protocol.py --data /path/to/speech_commands [--iters 30000]
"""

import argparse
import logging
import sys
from pathlib import Path

ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(ROOT.resolve()))

from kws.cli import setup_logging
from kws.config import corpus_config, load_config, mfcc_config, train_config
from kws.container import save_model, write_atomic
from kws.dataset import scan_corpus
from kws.errors import KwsError, UsageError
from kws.error_handler import handle_failure
from kws.fusion import fuse_model
from kws.model import PUBLISHED_FOOTPRINT, DepthwiseKind, build_model, count_report
from kws.trainer import FeaturePipeline, evaluate, train, write_metrics_csv


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", required=True)
    parser.add_argument("--out", default="protocol_runs")
    parser.add_argument("--iters", type=int)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--mtconv", default="3,5,7,9")
    args = parser.parse_args()

    cfg = load_config()
    setup_logging(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        mcfg = mfcc_config(cfg)
        tcfg = train_config(cfg, total_iterations=args.iters, seed=args.seed, workers=args.workers)
        mt_kind = DepthwiseKind.parse(args.mtconv)
        if not mt_kind.is_mtconv:
            raise UsageError(f"--mtconv expects branch sizes, got {args.mtconv}")
        corpus = scan_corpus(args.data, corpus_config(cfg), mcfg.sample_rate_hz)
        pipeline = FeaturePipeline(corpus, mcfg, tcfg.workers)

        rows = ["variant,standard_acc,mtconv_acc,fused_acc,delta,params,mults"]
        for name in PUBLISHED_FOOTPRINT:
            acc = {}
            for kind in (DepthwiseKind.standard(), mt_kind):
                tag = "mtconv" if kind.is_mtconv else "standard"
                result = train(build_model(name, kind, args.seed), corpus, tcfg, mcfg)
                save_model(result.model, out / f"{name}-{tag}.tnet")
                write_metrics_csv(result.metrics, out / f"{name}-{tag}.metrics.csv")
                acc[tag] = evaluate(result.model, corpus, "test", pipeline).accuracy
                if kind.is_mtconv:
                    fused = fuse_model(result.model)
                    save_model(fused, out / f"{name}-fused.tnet")
                    acc["fused"] = evaluate(fused, corpus, "test", pipeline).accuracy
                    report = count_report(fused)
            delta = acc["mtconv"] - acc["standard"]
            logging.info("%s: standard %.4f mtconv %.4f (%+.4f)", name, acc["standard"], acc["mtconv"], delta)
            rows.append(
                f"{name},{acc['standard']:.4f},{acc['mtconv']:.4f},{acc['fused']:.4f},{delta:+.4f},"
                f"{report.parameters},{report.multiplies}"
            )
            print(rows[-1])
        write_atomic(out / "summary.csv", ("\n".join(rows) + "\n").encode("utf-8"))
    except KwsError as e:
        return handle_failure(cfg, e)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
