"""Command-line entry point.

Verbs: ``train``, ``evaluate``, ``transfer``, ``probe`` and ``report``. Exit
status is 0 on success, 1 for configuration errors and 2 for runtime errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .experiment import (
    CHECKPOINT,
    PipelineError,
    render_outputs,
    run_evaluate,
    run_probe,
    run_train,
    run_transfer,
)

log = logging.getLogger("logitreg")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="logitreg", description="Logit-regularization robustness experiments")
    p.add_argument("verb", choices=["train", "evaluate", "transfer", "probe", "report"])
    p.add_argument("--config", type=Path, help="experiment config (INI)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", type=Path, help="output directory (overrides the config)")
    p.add_argument("--checkpoint", type=Path, help="existing checkpoint to evaluate instead of training")
    p.add_argument("--format", choices=["markdown", "csv"], help="table format printed to stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load_config(args):
    if args.config is None:
        raise ConfigError("--config is required for this verb")
    config = parse_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out is not None:
        config = config.with_output(args.out)
    return config


def _params(config, args):
    from .checkpoint import load_checkpoint

    path = args.checkpoint or config.checkpoint
    if path is None and args.verb != "train":
        path = Path(config.output) / CHECKPOINT
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"checkpoint not found: {path}")
        try:
            return load_checkpoint(path, config.model).params
        except Exception as exc:
            raise PipelineError("checkpoint", exc) from exc
    return run_train(config)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.verb == "report":
            if args.out is None and args.config is None:
                raise ConfigError("report needs --out or --config")
            out = args.out if args.out is not None else _load_config(args).output
            rendered = render_outputs(out, args.format)
            print(rendered[args.format or "markdown"], end="")
            return 0
        config = _load_config(args)
        params = _params(config, args)
        if args.verb in ("train", "evaluate"):
            run_evaluate(config, params)
            print(render_outputs(config.output)[args.format or "markdown"], end="")
        elif args.verb == "transfer":
            run_transfer(config, params)
            print(render_outputs(config.output)[args.format or "markdown"], end="")
        else:
            print(json.dumps(run_probe(config, params), indent=2, sort_keys=True))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
