"""Command line entry point: ``clvae {generate,train,eval,sweep,report}``.

Any config key can be overridden with a dotted flag, e.g. ``--model.latent_channels 512``
or ``--loss.beta=1``. Exit codes: 0 ok, 1 usage/config error, 2 runtime/data error,
3 numerical abort.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import yaml

from clvae.checkpoint import CheckpointError
from clvae.datamodel import DataError
from clvae.losses import LossError
from clvae.metrics import MetricError
from clvae.pipeline.config import ConfigError, ExperimentConfig

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_NAN = 0, 1, 2, 3

log = logging.getLogger("clvae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int, help="override every seed")
    common.add_argument("--out", help="output root (config key output_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="clvae", description="Conditioned-latent VAE anomaly classification pipeline.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="write the synthetic dataset and manifest")

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--manifest", help="dataset manifest (default: from config)")
    t.add_argument("--eval", action="store_true", help="evaluate right after training")

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", help="test manifest (default: test split from the stored config)")
    e.add_argument("--eval-dir", help="where to write evaluation outputs (default: <run>/eval)")

    s = sub.add_parser("sweep", parents=[common], help="train+eval once per value of one config key")
    s.add_argument("--axis", required=True, help="beta, latent_channels, discrepancy or any dotted key")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--reuse", action="store_true", help="skip runs that already have evaluation results")

    r = sub.add_parser("report", parents=[common], help="consolidate a run directory")
    r.add_argument("run_dir")
    return p


def split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull ``--a.b value`` / ``--a.b=value`` pairs out of ``argv``."""
    rest, overrides = [], {}
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok.startswith("--") and "." in tok.split("=", 1)[0]:
            key, eq, value = tok[2:].partition("=")
            if not eq:
                if i + 1 >= len(argv):
                    raise UsageError(f"missing value for --{key}")
                i += 1
                value = argv[i]
            overrides[key] = yaml.safe_load(value) if value else value
        else:
            rest.append(tok)
        i += 1
    return rest, overrides


def resolve_config(args, overrides: dict) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if overrides:
        cfg = cfg.override(overrides)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg = cfg.override({"output_dir": args.out})
    return cfg


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True, default=str))


def run(argv: list[str]) -> int:
    from clvae.pipeline import commands
    from clvae.pipeline.training import NumericalAbort

    rest, overrides = split_overrides(argv)
    args = build_parser().parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            out = commands.cmd_report(args.run_dir)
            _emit(json.loads((out / "report.json").read_text()))
            return EXIT_OK
        if args.command == "eval":
            rep = commands.cmd_eval(args.checkpoint, args.manifest, args.eval_dir)
            _emit({"config_hash": rep.config_hash, **rep.metrics})
            return EXIT_OK
        cfg = resolve_config(args, overrides)
        if args.command == "generate":
            path = commands.cmd_generate(cfg)
            _emit({"config_hash": cfg.hash(), "manifest": str(path)})
        elif args.command == "train":
            run_dir, result = commands.cmd_train(cfg, args.manifest)
            payload = {"config_hash": cfg.hash(), "run_dir": str(run_dir), "steps": result.steps,
                       "final_epoch": result.epochs[-1]}
            if args.eval:
                payload["metrics"] = commands.cmd_eval(run_dir / "checkpoint.npz", args.manifest).metrics
            _emit(payload)
        elif args.command == "sweep":
            values = [yaml.safe_load(v) for v in args.values.split(",") if v.strip()]
            path, rows = commands.cmd_sweep(cfg, args.axis, values, reuse=args.reuse)
            _emit({"csv": str(path), "rows": rows})
            if any(r["violations"] for r in rows):
                return EXIT_RUNTIME
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NAN
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        return run(argv)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, MetricError, LossError, ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
