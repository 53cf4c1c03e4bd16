"""Command-line entry point.

    bacsa run --config exp.cfg --policy bacsa --rounds 50 --out results/
    bacsa compare --config exp.cfg --set run.policies=random,bacsa --set run.seeds=3
    bacsa montecarlo --set partition.scheme=dirichlet --set partition.alpha=0.1
    bacsa partition-stats --set partition.scheme=ccdd

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import experiments as exp
from .config import ConfigError, dump_config, parse_config
from .engine import POLICIES, THREADS_ENV

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("bacsa")


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="base seed (run.seed)")
    common.add_argument("--out", help="output directory (run.out)")
    common.add_argument("--policy", choices=POLICIES, help="selection policy (fl.policy)")
    common.add_argument("--rounds", type=int, help="communication rounds (fl.rounds)")
    common.add_argument("--seeds", type=int, help="number of consecutive seeds (run.seeds)")
    common.add_argument("--set", action="append", type=_key_value, default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(
        prog="bacsa",
        description="Bias-aware client selection for federated learning: simulation and studies.",
        epilog=f"Threads for client training: ${THREADS_ENV} (default 1).",
    )
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="single policy, one or more seeds")
    cmp_ = sub.add_parser("compare", parents=[common], help="several policies over seeds")
    cmp_.add_argument("--policies", help="comma-separated list (run.policies)")
    mc = sub.add_parser("montecarlo", parents=[common], help="initialisation study (mc.csv)")
    mc.add_argument("--runs", type=int, help="Monte Carlo repetitions (run.montecarlo_h)")
    sub.add_parser("partition-stats", parents=[common], help="per-client class counts")
    sub.add_parser("show-config", parents=[common], help="print the fully resolved config")
    return p


def overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    ov = dict(args.set)
    flag_keys = {
        "seed": "run.seed", "out": "run.out", "policy": "fl.policy", "rounds": "fl.rounds",
        "seeds": "run.seeds", "policies": "run.policies", "runs": "run.montecarlo_h",
    }
    for attr, key in flag_keys.items():
        val = getattr(args, attr, None)
        if val is not None:
            ov[key] = str(val)
    if args.no_figures:
        ov["run.figures"] = "false"
    return ov


def _report_run(summary: dict) -> None:
    f = summary["final_accuracy"]
    b = summary["best_accuracy"]
    print(f"{summary['policy']}: final {f['mean']:.4f} +/- {f['std']:.4f}, "
          f"best {b['mean']:.4f} +/- {b['std']:.4f} over {len(summary['seeds'])} seed(s)")


def dispatch(args: argparse.Namespace) -> None:
    cfg = parse_config(args.config, overrides_from_args(args))
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
    elif args.command == "run":
        _report_run(exp.run_experiment(cfg))
    elif args.command == "compare":
        cmp_ = exp.compare_policies(cfg)
        for p in cfg.policies:
            fin = cmp_.final(p)
            print(f"{p:>15}: final {fin.mean():.4f} +/- {fin.std():.4f}")
    elif args.command == "montecarlo":
        res = exp.run_montecarlo_init(cfg)
        for init, k in res.kappa.items():
            print(f"{init:>8}: mean kappa {np.mean(k):.2f}%")
        print(f"sign test: {res.wins}/{res.trials} wins, p = {res.sign_test_p:.3g}")
    elif args.command == "partition-stats":
        counts = exp.partition_stats(cfg)
        sizes = counts.sum(axis=0)
        held = (counts > 0).sum(axis=0)
        print(f"{counts.shape[1]} clients, sizes {sizes.min()}..{sizes.max()}, "
              f"classes per client {held.min()}..{held.max()}")
    log.info("outputs in %s", cfg.out)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
