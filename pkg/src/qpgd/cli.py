"""Command-line front end.

Subcommands: truth, pretrain, train, evaluate, diagnose, sample, toy.
Every run-config key has an override flag of the same name (dashes for
underscores), applied on top of --scale preset and --config file, in that
order.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .harness import PRESETS, RunConfig, _CONFIG_SECTIONS, _parse_value


def _add_config_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--config", metavar="PATH", help="config file (ini-style)")
    parser.add_argument("--scale", choices=sorted(PRESETS), default=None,
                        help="start from a preset (desk: laptop-sized, full: reference scale)")
    parser.add_argument("--out", metavar="DIR", help="output directory (alias for --out-dir)")
    for keys in _CONFIG_SECTIONS.values():
        for key in keys:
            flag = "--" + key.replace("_", "-")
            parser.add_argument(flag, dest=f"cfg_{key}", metavar="VALUE", default=None)


def _build_config(args) -> RunConfig:
    cfg = PRESETS[args.scale]() if args.scale else RunConfig()
    if args.config:
        cfg = harness.load_config(args.config, base=cfg)
    overrides = {}
    for keys in _CONFIG_SECTIONS.values():
        for key in keys:
            raw = getattr(args, f"cfg_{key}", None)
            if raw is not None:
                overrides[key] = _parse_value(key, raw)
    if args.out:
        overrides["out_dir"] = args.out
    if overrides:
        cfg = replace(cfg, **overrides)
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qpgd",
        description="Constrained network training via a QP-filtered update law: "
                    "capacitor case study and theory diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_truth = sub.add_parser("truth", help="train the known-voltage forward model")
    _add_config_flags(p_truth)

    p_pre = sub.add_parser("pretrain", help="baseline-loss steps until the data "
                                            "term reaches the noise floor")
    _add_config_flags(p_pre)

    p_train = sub.add_parser("train", help="inverse-problem run (naive or qpgd mode)")
    _add_config_flags(p_train)

    p_eval = sub.add_parser("evaluate", help="metrics of a checkpoint against truth")
    p_eval.add_argument("checkpoint")
    p_eval.add_argument("truth_checkpoint")
    p_eval.add_argument("--grid-resolution", type=int, default=200)
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--expected-digest", default=None)

    p_diag = sub.add_parser("diagnose", help="theory checks over a loss history CSV")
    p_diag.add_argument("history_csv")
    p_diag.add_argument("--out", default=None)
    p_diag.add_argument("--c", type=float, default=1.0)
    p_diag.add_argument("--beta", type=float, default=10.0)
    p_diag.add_argument("--sgd-mode", action="store_true",
                        help="treat the trajectory as plain-gradient (checks asserted)")

    p_sample = sub.add_parser("sample", help="emit frozen point sets without training")
    _add_config_flags(p_sample)

    p_toy = sub.add_parser("toy", help="run the analytic toy verification suite")
    p_toy.add_argument("--out", default=None)
    p_toy.add_argument("--gamma", type=float, default=1e-3)
    p_toy.add_argument("--c", type=float, default=1.0)

    args = parser.parse_args(argv)

    if args.command == "truth":
        cfg = _build_config(args)
        art = harness.cmd_truth(cfg)
        print(f"truth checkpoint: {art.checkpoint}")
        for key, value in art.report.items():
            print(f"  {key} = {value}")
        return 0

    if args.command == "pretrain":
        cfg = _build_config(args)
        params, _, epoch, fired, _ = harness.cmd_pretrain(cfg)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        harness.save_checkpoint(out / "pretrained.txt", params, cfg.spec,
                                harness.config_digest(cfg), cfg.seed)
        print(f"pretraining {'reached threshold' if fired else 'hit cap'} at epoch {epoch}")
        print(f"pretrained checkpoint: {out / 'pretrained.txt'}")
        return 0

    if args.command == "train":
        cfg = _build_config(args)
        art = harness.cmd_train(cfg)
        for w in art.warnings:
            print(f"warning: {w}", file=sys.stderr)
        print(f"run artifacts in {art.out_dir}")
        for key, value in art.report.items():
            print(f"  {key} = {value}")
        return 0

    if args.command == "evaluate":
        report = harness.cmd_evaluate(
            args.checkpoint, args.truth_checkpoint,
            grid_resolution=args.grid_resolution, out_dir=args.out,
            expected_digest=args.expected_digest,
        )
        for key, value in report.items():
            print(f"{key} = {value}")
        return 0

    if args.command == "diagnose":
        lines = harness.cmd_diagnose(args.history_csv, out_path=args.out,
                                     c=args.c, beta=args.beta, sgd_mode=args.sgd_mode)
        for line in lines:
            print(line)
        return 0  # advisory by default; reports never fail the command

    if args.command == "sample":
        cfg = _build_config(args)
        out = harness.cmd_sample(cfg)
        print(f"point sets written to {out}")
        return 0

    if args.command == "toy":
        report = harness.cmd_toy(out_path=args.out, gamma=args.gamma, c=args.c)
        for line in report.lines:
            print(line)
        print(f"suite: {'PASS' if report.ok else 'FAIL'}")
        return 0 if report.ok else 1

    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
