"""``ceapg`` command line: train, rollout, landscape, gradcheck."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .config import ConfigError, load, parse_set
from .dynamics import IntegrationError
from .harness import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, EXIT_THRESHOLD, CsvWriter

log = logging.getLogger("ceapg")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--env", choices=["cartpole", "acrobot", "double_cartpole"])
    p.add_argument("--seed", help="seed index or comma-separated list")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ceapg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run CE-APG / PAPG / CEM for every seed")
    _common(p)
    p.add_argument("--mode", choices=["ce-apg", "papg", "cem"])
    p.add_argument("--workers", type=int)

    p = sub.add_parser("rollout", help="evaluate a saved policy")
    _common(p)
    p.add_argument("--policy", required=True)
    p.add_argument("--count", type=int)

    p = sub.add_parser("landscape", help="returns along a random parameter direction")
    _common(p)
    p.add_argument("--policy", help="policy file (default: random policy)")
    p.add_argument("--direction-seed", type=int)
    p.add_argument("--half-range", type=float)
    p.add_argument("--samples", type=int)

    p = sub.add_parser("gradcheck", help="BPTT gradient vs central differences")
    _common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--coords", type=int)
    return parser


def _overrides(args) -> dict:
    pairs = {}
    if args.env:
        pairs["env"] = args.env
    if args.seed is not None:
        pairs["seeds"] = args.seed
    if args.out:
        pairs["out"] = args.out
    for attr, key in (("mode", "mode"), ("workers", "workers"), ("count", "eval.rollouts"),
                      ("direction_seed", "landscape.direction_seed"),
                      ("half_range", "landscape.half_range"), ("samples", "landscape.samples"),
                      ("horizon", "gradcheck.horizon"), ("coords", "gradcheck.coords")):
        val = getattr(args, attr, None)
        if val is not None:
            pairs[key] = str(val)
    pairs.update(parse_set(args.set))
    return pairs


def _train(cfg, out: Path) -> int:
    results = harness.train(cfg, out)
    vals = np.array(list(results.values()))
    print(f"best return over {len(vals)} seeds: {vals.mean():.4f} +- {vals.std():.4f}")
    return EXIT_OK


def _rollout(cfg, out: Path, args) -> int:
    stats = harness.rollouts(cfg, args.policy, out, cfg["eval.rollouts"])
    print(f"return {stats.mean:.4f} +- {stats.std:.4f} over {len(stats.returns)} rollouts; "
          f"balance {np.mean(stats.balance):.3f}")
    return EXIT_OK


def _landscape(cfg, out: Path, args) -> int:
    arch, theta = harness.policy_or_random(cfg, args.policy)
    alphas, rets = harness.landscape(cfg.env_spec, arch, theta, cfg["landscape.direction_seed"],
                                     cfg["landscape.half_range"], cfg["landscape.samples"],
                                     harness.landscape_initial_state(cfg))
    out.mkdir(parents=True, exist_ok=True)
    with CsvWriter(out / "landscape.csv", ["alpha", "return"]) as w:
        for a, r in zip(alphas, rets):
            w.row([a, r])
    print(f"wrote {len(alphas)} rows to {out / 'landscape.csv'}")
    return EXIT_OK


def _gradcheck(cfg) -> int:
    horizon = cfg["gradcheck.horizon"]
    errs = harness.gradcheck(cfg.env_spec, cfg.arch, cfg["master_seed"], cfg["seeds"],
                             cfg["gradcheck.coords"], horizon)
    worst = max(errs)
    print(f"max relative error {worst:.3e} (horizon {horizon}, seeds {list(cfg['seeds'])})")
    if horizon <= 50 and worst > cfg["gradcheck.threshold"]:
        print(f"threshold {cfg['gradcheck.threshold']:g} exceeded", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load(args.config, _overrides(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg["out"])
    try:
        if args.command == "train":
            return _train(cfg, out)
        if args.command == "rollout":
            return _rollout(cfg, out, args)
        if args.command == "landscape":
            return _landscape(cfg, out, args)
        return _gradcheck(cfg)
    except (IntegrationError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
