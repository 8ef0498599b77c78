"""Command line entry point (``granudp`` / ``python -m granudp``)."""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
from pathlib import Path

from . import runner as R
from .accountant import (
    DEFAULT_DELTA,
    AccountingError,
    PrivacyParams,
    calibrate_noise,
    epsilon_for,
    group_privacy,
)
from .corpus import CorpusError

log = logging.getLogger("granudp")


def _add_common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment TOML file")
    p.add_argument("--out", help="output directory (overrides output_dir in the config)")


def _add_run_selector(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tag", required=True, help="sen | doc | augdoc | augdoc-zero-shot")
    p.add_argument("--epsilon", required=True, help="'inf' or a positive number")
    p.add_argument("--seed", type=int, required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="granudp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build unit files, split manifests, PII ledger and vocabulary")
    _add_common(p)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="train one (tag, epsilon, seed) configuration")
    _add_common(p)
    _add_run_selector(p)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("attack", help="loss-threshold MIA against a trained run")
    _add_common(p)
    _add_run_selector(p)

    p = sub.add_parser("pii-eval", help="PII leakage over the MIA true positives of a run")
    _add_common(p)
    _add_run_selector(p)

    p = sub.add_parser("account", help="epsilon for a noise level, or noise for a target epsilon")
    p.add_argument("--config", help="experiment TOML; with --tag, take q and steps from the prepared data")
    p.add_argument("--out")
    p.add_argument("--tag")
    p.add_argument("--sigma", type=float)
    p.add_argument("--epsilon", help="target epsilon to calibrate sigma for")
    p.add_argument("--q", type=float, help="sampling rate L/N")
    p.add_argument("--steps", type=int)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--group-size", type=int, help="also print the k-unit group guarantee")

    p = sub.add_parser("report", help="aggregate per-run CSVs into results/aggregate.csv")
    _add_common(p, config_required=False)

    p = sub.add_parser("run", help="prepare, train every planned run, attack, pii-eval and report")
    _add_common(p)
    p.add_argument("--overwrite", action="store_true")
    return parser


def _out_dir(args, cfg: R.ExperimentConfig | None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output_dir:
        return Path(cfg.output_dir)
    raise R.ConfigError("no output directory: pass --out or set output_dir in the config")


def _account(args) -> int:
    delta = args.delta
    q, steps = args.q, args.steps
    if args.tag:
        if not args.config:
            raise R.ConfigError("account --tag needs --config")
        cfg = R.load_config(args.config)
        delta = delta if delta is not None else cfg.delta
        tag = R.normalize_tag(args.tag)
        prep = R.load_prepared(cfg, _out_dir(args, cfg))
        settings = cfg.settings(tag, True)
        n = len(R._training_units(prep, tag))
        lot = min(settings.lot_size, n)
        q, steps = lot / n, R.steps_for_epochs(settings.epochs, n, lot)
    delta = DEFAULT_DELTA if delta is None else delta
    if q is None or steps is None:
        raise R.ConfigError("account needs --q and --steps (or --config with --tag)")
    if (args.sigma is None) == (args.epsilon is None):
        raise R.ConfigError("account needs exactly one of --sigma or --epsilon")

    if args.sigma is not None:
        sigma = args.sigma
        eps = epsilon_for(sigma, q, steps, delta)
    else:
        target = R.parse_epsilon(args.epsilon)
        if math.isinf(target):
            raise R.ConfigError("--epsilon inf needs no noise; nothing to calibrate")
        sigma = calibrate_noise(PrivacyParams(target, delta), q, steps)
        eps = epsilon_for(sigma, q, steps, delta)

    fields = ["sigma", "q", "steps", "delta", "epsilon"]
    row = {"sigma": sigma, "q": q, "steps": steps, "delta": delta, "epsilon": eps}
    if args.group_size:
        g = group_privacy(PrivacyParams(eps, delta), args.group_size)
        fields += ["group_size", "group_epsilon", "group_delta", "group_vacuous"]
        row.update(group_size=args.group_size, group_epsilon=g.epsilon, group_delta=g.delta, group_vacuous=g.vacuous)
    writer = csv.DictWriter(sys.stdout, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerow({k: R._cell(v) for k, v in row.items()})
    return R.EXIT_OK


def dispatch(args) -> int:
    if args.command == "account":
        return _account(args)
    if args.command == "report":
        cfg = R.load_config(args.config) if args.config else None
        print(R.cmd_report(_out_dir(args, cfg)))
        return R.EXIT_OK

    cfg = R.load_config(args.config)
    out = _out_dir(args, cfg)
    if args.command == "prepare":
        print(R.cmd_prepare(cfg, out, overwrite=args.overwrite))
    elif args.command == "run":
        print(R.run_experiment(cfg, out, overwrite=args.overwrite))
    else:
        tag, eps, seed = R.normalize_tag(args.tag), R.parse_epsilon(args.epsilon), args.seed
        if args.command == "train":
            rec = R.cmd_train(cfg, out, tag, eps, seed, overwrite=args.overwrite)
            print(R.run_dir(out, rec.run_id))
        elif args.command == "attack":
            rep = R.cmd_attack(cfg, out, tag, eps, seed)
            print(f"tpr={rep.tpr!r} fpr={rep.fpr!r} advantage={rep.advantage!r}")
        elif args.command == "pii-eval":
            rep = R.cmd_pii_eval(cfg, out, tag, eps, seed)
            frac = rep.leakage_fraction
            print(f"detected={rep.detected_pii_count} total={rep.total_pii_count} leakage={frac!r}")
    return R.EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return dispatch(args)
    except (R.ConfigError, AccountingError, CorpusError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return R.EXIT_CONFIG
    except R.PrerequisiteError as exc:
        print(f"prerequisite error: {exc}", file=sys.stderr)
        return R.EXIT_PREREQUISITE
