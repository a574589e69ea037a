"""Command-line entry point: ``probpit {synth,train,eval,sweep,costgap}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import experiment as ex
from .errors import NumericError, ProbPitError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _parse_set(item: str) -> tuple[str, object]:
    key, sep, value = item.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {item!r}")
    return key, yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--out", help="output directory (config: output_dir)")
    common.add_argument("--seed", type=int, help="run seed for train/costgap, base seed for sweep (config: base_seed)")
    common.add_argument("--jobs", type=int, help="parallel training jobs for sweep (config: jobs)")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], type=_parse_set, metavar="KEY=VALUE",
        help="override any config key, dotted (e.g. train.epochs=5)",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="probpit", description="Probabilistic permutation invariant training experiments")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="synthesise the WAV corpus and manifests")
    p = sub.add_parser("train", parents=[common], help="train one separator")
    p.add_argument("--gamma", type=float, help="smoothing factor; 0 trains plain PIT (config: gamma)")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    p.add_argument("--gamma", type=float, help="locate the run trained with this gamma (config: gamma)")
    p.add_argument("--checkpoint", type=Path, help="checkpoint path (default: the run for --gamma/--seed)")
    p.add_argument("--manifest", type=Path, help="manifest to evaluate (default: test split)")
    p.add_argument("--estimator", choices=ex.ESTIMATORS, default="model", help="model output or an oracle baseline")
    p.add_argument("--report", type=Path, help="output CSV (default: eval.csv next to the checkpoint)")
    p = sub.add_parser("sweep", parents=[common], help="gamma sweep with paired trials")
    p.add_argument("--gamma", type=float, action="append", help="gamma value (repeatable; config: gamma_list)")
    sub.add_parser("costgap", parents=[common], help="epoch-wise permutation cost gap study (PIT run)")
    return parser


def _config(args) -> ex.ExperimentConfig:
    overrides = dict(args.overrides)
    if args.out is not None:
        overrides["output_dir"] = args.out
    if args.jobs is not None:
        overrides["jobs"] = args.jobs
    if args.seed is not None:
        overrides["base_seed"] = args.seed
    gamma = getattr(args, "gamma", None)
    if isinstance(gamma, list):
        overrides["gamma_list"] = gamma
    elif gamma is not None:
        overrides["gamma"] = gamma
    return ex.load_config(args.config, overrides)


def run(args) -> int:
    cfg = _config(args)
    seed = cfg.base_seed
    if args.command == "synth":
        for split, path in ex.cmd_synth(cfg).items():
            print(f"{split}: {path}")
    elif args.command == "train":
        run_dir = ex.cmd_train(cfg, cfg.gamma, seed)
        print(run_dir)
    elif args.command == "eval":
        checkpoint = args.checkpoint
        if checkpoint is None and args.estimator == "model":
            checkpoint = cfg.root / "runs" / ex.run_name(float(cfg.gamma), seed) / "checkpoint.json"
        manifest = args.manifest or ex.manifest_path(cfg.root, "test")
        report = args.report
        if report is None:
            report = checkpoint.parent / "eval.csv" if checkpoint else cfg.root / f"eval_{args.estimator}.csv"
        rows = ex.cmd_eval(cfg, checkpoint, manifest, report, args.estimator)
        mean = ex.summary_row(rows)
        print(f"{report}: {len(rows)} rows, mean SDR {mean[2]:.3f} dB, mean SIR {mean[3]:.3f} dB")
    elif args.command == "sweep":
        rep = ex.cmd_sweep(cfg)
        for g in [0.0] + [g for g in rep.gammas if g > 0]:
            print(f"gamma={g:<12.6g} mean SDR {rep.mean_metric(g):8.3f} dB  mean SIR {rep.mean_metric(g, 'sir_mean'):8.3f} dB")
        for row in rep.ttests:
            if row[1] == "sdr_mean":
                print(f"t-test gamma={row[0]:.6g} vs PIT: mean diff {row[3]:+.3f} dB, p={row[6]}")
    elif args.command == "costgap":
        for s in ex.cmd_costgap(cfg, seed):
            print(f"epoch {s['epoch']}: median relative gap {s['median_relative_gap']:.4f} (n={s['n']})")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProbPitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
