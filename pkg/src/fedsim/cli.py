"""Command-line entry points.

Subcommands: `run` (experiment sweep), `diag` (property suites),
`summarize` (rebuild the benchmark summary from round logs), and
`nemenyi` (rank statistics over a sweep root).

Exit codes: 0 ok, 2 config error, 3 diverged, 4 diagnostic failure.
The FEDSIM_OUT_ROOT environment variable relocates all outputs.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import diag as dg
from . import eval as ev
from . import runner
from .data import DataError
from .protocol import ProtocolError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_DIAG_FAIL = 4

_OVERRIDE_KEYS = [
    "dataset_kind", "num_classes", "input_dim", "n_per_class", "separation",
    "noise_std", "data_seed", "images_path", "labels_path", "csv_path",
    "test_fraction", "num_clients", "sample_rate", "rounds", "local_epochs",
    "batch_size", "partition_kind", "alpha", "classes_per_client",
    "scenario_seeds", "training_seeds", "algo", "eta_g", "eta_l", "momentum",
    "lambda1", "lambda2", "lambda3", "lambda_g", "surrogate_ce", "nsg_sign",
    "prox_mu", "fedavgm_beta", "prototype_agg", "surrogate_n_per_class",
    "surrogate_mean_scale", "surrogate_std", "surrogate_seed", "hidden",
    "eval_cadence", "divergence_cadence", "out_dir", "workers",
]


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    for key in _OVERRIDE_KEYS:
        parser.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None)


def _cmd_run(args) -> int:
    try:
        overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS}
        config = runner.load_config(args.config, overrides)
    except runner.ConfigError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    try:
        results = runner.run(config)
    except (DataError, ProtocolError) as err:
        print(f"run failed: {err}", file=sys.stderr)
        return EXIT_CONFIG
    for r in results:
        flag = " DIVERGED" if r.diverged else ""
        print(f"{r.algo} scenario={r.scenario_seed} train={r.training_seed} "
              f"best_acc={r.best_acc:.4f} final_acc={r.final_acc:.4f}{flag} -> {r.run_dir}")
    if any(r.diverged for r in results):
        print("at least one run diverged (non-finite loss)", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def _cmd_diag(args) -> int:
    suites = {
        "grad-check": lambda: dg.grad_check_report(),
        "quadratic-oracle": lambda: dg.quadratic_oracle_report(lambda_g=args.lambda_g),
        "triangle": lambda: dg.triangle_report(),
        "comm-audit": lambda: dg.comm_audit_report(
            cases=[(args.M, args.C, args.embed_dim)] if args.M else None),
    }
    report = suites[args.suite]()
    print(dg.format_report(args.suite, report))
    return EXIT_OK if report["passed"] else EXIT_DIAG_FAIL


def _cmd_summarize(args) -> int:
    by_algo = runner.scan_results(args.root)
    if not by_algo:
        print(f"no run directories under {args.root}", file=sys.stderr)
        return EXIT_CONFIG
    scenarios = runner.results_to_scenarios(by_algo)
    out = Path(args.out or Path(args.root) / "summary.csv")
    ev.write_summary_csv(out, scenarios)
    for row in ev.summarize(scenarios):
        print(f"{row['algorithm']:<10} mean_acc={row['mean_acc']:.4f} "
              f"std={row['std_acc']:.4f} over {row['num_scenarios']} scenarios")
    print(f"wrote {out}")
    return EXIT_OK


def _cmd_nemenyi(args) -> int:
    by_algo = runner.scan_results(args.root)
    scenarios = runner.results_to_scenarios(by_algo)
    if len(by_algo) < 2 or len(scenarios) < 2:
        print("need at least 2 algorithms and 2 scenarios", file=sys.stderr)
        return EXIT_CONFIG
    algos = sorted(by_algo)
    acc = np.array([[s.acc[a] for a in algos] for s in scenarios])
    ranks = ev.RankMatrix(acc, algos)
    chi2, significant = ev.friedman_statistic(ranks, args.alpha)
    _, avg, cd = ev.nemenyi_pairwise(ranks, args.alpha)
    print(f"friedman chi2={chi2:.6f} significant={significant} "
          f"(alpha={args.alpha}, N={ranks.num_scenarios}, k={ranks.num_algorithms})")
    print(f"critical distance={cd:.6f}")
    for name, rank in zip(algos, avg):
        print(f"  {name:<10} avg rank {rank:.3f}")
    out = Path(args.out or Path(args.root) / "nemenyi.csv")
    ev.write_nemenyi_csv(out, ranks, args.alpha)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment sweep")
    p_run.add_argument("--config", default=None, help="INI config file")
    _add_override_flags(p_run)
    p_run.set_defaults(fn=_cmd_run)

    p_diag = sub.add_parser("diag", help="run a diagnostic property suite")
    p_diag.add_argument("suite", choices=["grad-check", "quadratic-oracle",
                                          "triangle", "comm-audit"])
    p_diag.add_argument("--lambda-g", dest="lambda_g", type=float, default=0.5)
    p_diag.add_argument("--M", type=int, default=None, help="model size for comm-audit")
    p_diag.add_argument("--C", type=int, default=10)
    p_diag.add_argument("--embed-dim", dest="embed_dim", type=int, default=512)
    p_diag.set_defaults(fn=_cmd_diag)

    p_sum = sub.add_parser("summarize", help="aggregate round logs into a summary CSV")
    p_sum.add_argument("root", help="directory holding run subdirectories")
    p_sum.add_argument("--out", default=None)
    p_sum.set_defaults(fn=_cmd_summarize)

    p_nem = sub.add_parser("nemenyi", help="rank statistics over a sweep root")
    p_nem.add_argument("root", help="directory holding run subdirectories")
    p_nem.add_argument("--alpha", type=float, default=0.05)
    p_nem.add_argument("--out", default=None)
    p_nem.set_defaults(fn=_cmd_nemenyi)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
