"""Command-line entry point: ``pinnsir {fit-sir,fit-rt,simulate,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .data import DataError
from .experiment import ConfigError, ExperimentConfig, run_experiment
from .net import ConfigurationError
from .report import StatisticsError

EXIT_OK, EXIT_CONFIG, EXIT_TRAINING = 0, 1, 2

log = logging.getLogger("pinnsir")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pinnsir", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with ExperimentConfig fields")
    common.add_argument("-o", "--output-dir", help="directory for tables, JSON and SVG output")
    common.add_argument("-n", "--repetitions", type=int, help="runs per region (seeds base..base+n-1)")
    common.add_argument("--seed", type=int, help="base seed")
    common.add_argument("-j", "--workers", type=int, help="parallel worker processes")
    common.add_argument("--region", action="append", dest="regions", help="region to include (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--dataset", action="append", dest="datasets", help="dataset JSON (repeatable)")
    inputs.add_argument("--cases", dest="cases_csv", help="case CSV: date,region,new_cases,new_deaths")
    inputs.add_argument("--regions-csv", help="region CSV: region,population,vaccination_pct")
    inputs.add_argument("--deaths-region", help="take deaths from this region's rows for every region")
    inputs.add_argument("--start", help="first day (ISO date)")
    inputs.add_argument("--end", help="last day (ISO date)")
    inputs.add_argument("--recovery-days", type=int)
    inputs.add_argument("--iterations", type=int, help="training iterations (stage 2 for fit-rt)")

    s = sub.add_parser("fit-sir", parents=[common, inputs], help="fit constant alpha and beta")
    s.add_argument("--fixed-alpha", type=float, help="hold the recovery rate fixed")
    s.add_argument("--data-weight", type=float, help="data loss weight")

    r = sub.add_parser("fit-rt", parents=[common, inputs], help="estimate a time-varying Rt")
    r.add_argument("--alpha", type=float, help="fixed recovery rate (default 1/14)")
    r.add_argument("--alpha-exp", action="store_true", help="also fit with each region's alpha_exp")
    r.add_argument("--params-csv", help="params.csv from fit-sir, source of alpha_exp")
    r.add_argument("--stage1-iterations", type=int)

    m = sub.add_parser("simulate", parents=[common], help="generate synthetic SIR datasets")
    for name in ("alpha", "beta", "N", "i0", "noise-std"):
        m.add_argument(f"--{name}", type=float)
    m.add_argument("--days", type=int)

    rep = sub.add_parser("report", parents=[common], help="tables and correlations from a summary table")
    rep.add_argument("--tables", help="summary CSV (default: bundled published estimates)")
    return p


def _config_from_args(args) -> ExperimentConfig:
    mode = args.command.replace("-", "_")
    base: dict = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = json.load(fh)
        if base.get("mode", mode) != mode:
            raise ConfigError(f"config mode {base['mode']!r} does not match command {args.command!r}")
    base["mode"] = mode
    simple = {"output_dir": "output_dir", "repetitions": "repetitions", "seed": "base_seed",
              "workers": "workers", "regions": "regions", "datasets": "datasets",
              "cases_csv": "cases_csv", "regions_csv": "regions_csv", "deaths_region": "deaths_region",
              "start": "start", "end": "end", "recovery_days": "recovery_days",
              "fixed_alpha": "fixed_alpha", "params_csv": "params_csv", "tables": "tables"}
    for attr, key in simple.items():
        value = getattr(args, attr, None)
        if value is not None:
            base[key] = value
    if mode == "fit_sir":
        train = dict(base.get("train", {}))
        if args.iterations is not None:
            train["iterations"] = args.iterations
        if args.data_weight is not None:
            train["data_loss_weight"] = args.data_weight
        base["train"] = train
    elif mode == "fit_rt":
        rt = dict(base.get("rt", {}))
        if args.iterations is not None:
            rt["stage2_iters"] = args.iterations
        if args.stage1_iterations is not None:
            rt["stage1_iters"] = args.stage1_iterations
        if args.alpha is not None:
            rt["alpha"] = args.alpha
        base["rt"] = rt
        if args.alpha_exp:
            base["rt_alphas"] = ["fixed", "exp"]
    elif mode == "simulate":
        syn = dict(base.get("synthetic", {}))
        for name in ("alpha", "beta", "N", "i0", "noise_std", "days"):
            value = getattr(args, name, None)
            if value is not None:
                syn[name] = value
        base["synthetic"] = syn
        base.setdefault("regions", ["synthetic"])
    return ExperimentConfig.from_dict(base)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config_from_args(args)
        result = run_experiment(config)
    except (ConfigError, ConfigurationError, DataError, StatisticsError, OSError,
            json.JSONDecodeError, TypeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for c in result.correlations:
        print(f"{c.pair}: r={c.r:.5f} p={c.p:.4f} (n={c.n})")
    print(f"{len(result.rows)} region(s) written to {config.output_dir}")
    if result.errors:
        for e in result.errors:
            print(f"training failure: {e}", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
