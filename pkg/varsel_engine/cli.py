"""
命令行入口

    varsel run --config exp.toml [--out DIR] [--seed S] [--threads T]
    varsel importance --weights w.json --data d.csv --noise-sd S [--normalized] [--threads T]
    varsel select --draws psi.csv --alpha A
    varsel nullband --m M --reps R --seed S

成功退出码 0；失败时在 stderr 输出错误 JSON，退出码 1。
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from typing import List, Optional

from .diagnostics import cvm_null_band
from .errors import VarselError
from .importance import ImportanceDraws, psi_centered_parallel
from .net_core import Dataset, NetworkWeights, build_feature_bundle
from .runner import ExperimentConfig, run_experiment, summarize
from .selection import select_variables, simultaneous_band

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def setup_logging(level: str = "INFO"):
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format=LOG_FORMAT, stream=sys.stderr)


def _emit(payload: dict, out: Optional[str] = None):
    text = json.dumps(payload, ensure_ascii=False, indent=2)
    if out:
        with open(out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    else:
        print(text)


def cmd_run(args) -> int:
    config = ExperimentConfig.from_file(args.config)
    overrides = {}
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if overrides:
        config = replace(config, **overrides)
    report = run_experiment(config)
    summary = summarize(report)
    _emit({
        "output_dir": config.output_dir,
        "n_records": len(report),
        "n_failed": len(report.failed),
        "summary": json.loads(summary.to_json(orient="records")),
    })
    return 0


def cmd_importance(args) -> int:
    weights = NetworkWeights.load(args.weights)
    data = Dataset.from_csv(args.data, noise_sd=args.noise_sd)
    bundle = build_feature_bundle(weights, data.X)
    if bundle.rank_deficient:
        logger.warning("rank-deficient Gram (rank %d < K=%d)", bundle.gram_rank, bundle.K)
    values = psi_centered_parallel(bundle, weights.beta, data.noise_sd,
                                   shards=args.threads, normalized=args.normalized)
    draws = ImportanceDraws(values=values[None, :], normalized=args.normalized,
                            noise_sd=data.noise_sd, n=data.n)
    if args.out:
        draws.to_csv(args.out)
    else:
        draws.to_frame().to_csv(sys.stdout, index=False, float_format="%.17g")
    return 0


def cmd_select(args) -> int:
    draws = ImportanceDraws.from_csv(args.draws)
    result = select_variables(simultaneous_band(draws, args.alpha))
    if args.out:
        result.save(args.out)
    else:
        _emit(result.to_dict())
    return 0


def cmd_nullband(args) -> int:
    band = cvm_null_band(args.m, args.reps, seed=args.seed, workers=args.threads)
    _emit(band.to_dict(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varsel",
        description="Bayesian ReLU network variable selection",
    )
    parser.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment grid")
    run.add_argument("--config", required=True, help=".json, .toml or .yaml experiment config")
    run.add_argument("--out", help="output directory (overrides config)")
    run.add_argument("--seed", type=int, help="base seed (overrides config)")
    run.add_argument("--threads", type=int, help="parallel cells (overrides config)")
    run.set_defaults(func=cmd_run)

    imp = sub.add_parser("importance", help="centered importances of one network")
    imp.add_argument("--weights", required=True, help="network weights JSON")
    imp.add_argument("--data", required=True, help="CSV with x1..xP and y")
    imp.add_argument("--noise-sd", type=float, required=True)
    imp.add_argument("--normalized", action="store_true")
    imp.add_argument("--threads", type=int, default=1)
    imp.add_argument("--out", help="CSV path; a .meta.json sidecar is written next to it")
    imp.set_defaults(func=cmd_importance)

    sel = sub.add_parser("select", help="simultaneous band and selected variables")
    sel.add_argument("--draws", required=True, help="importance draws CSV")
    sel.add_argument("--alpha", type=float, default=0.05)
    sel.add_argument("--out", help="JSON path")
    sel.set_defaults(func=cmd_select)

    null = sub.add_parser("nullband", help="Monte Carlo null band of the CvM statistic")
    null.add_argument("--m", type=int, required=True, help="draws per replication")
    null.add_argument("--reps", type=int, default=1000)
    null.add_argument("--seed", type=int, default=0)
    null.add_argument("--threads", type=int, default=1)
    null.add_argument("--out", help="JSON path")
    null.set_defaults(func=cmd_nullband)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except VarselError as exc:
        print(json.dumps(exc.to_dict(), ensure_ascii=False), file=sys.stderr)
        return 1
    except OSError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(payload, ensure_ascii=False), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
