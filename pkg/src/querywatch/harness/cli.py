"""Command-line entry point: ``querywatch <subcommand> [--config ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import CheckpointError
from .config import ConfigError, apply_overrides, load_config, with_out, with_seed
from .experiments import (
    Run,
    cmd_defend_eval,
    cmd_evasion,
    cmd_monitor_replay,
    cmd_project,
    cmd_spaced_out,
    cmd_sweep,
    cmd_train,
    run_all,
)


class JsonLines(logging.Formatter):
    """One JSON object per record: level, event name and structured fields."""

    def format(self, record: logging.LogRecord) -> str:
        out = {"level": record.levelname.lower(), "event": record.getMessage()}
        out.update(getattr(record, "fields", {}))
        return json.dumps(out, sort_keys=True, default=str)


def setup_logging(out: Path | None, stream=None) -> list[logging.Handler]:
    logger = logging.getLogger("querywatch")
    logger.setLevel(logging.INFO)
    logger.propagate = False
    handlers: list[logging.Handler] = [logging.StreamHandler(stream or sys.stderr)]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out / "log.jsonl", mode="w"))
    for h in handlers:
        h.setFormatter(JsonLines())
        logger.addHandler(h)
    return handlers


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--out", help="output directory (overrides config 'out')")
    common.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a dotted config key, e.g. detector.m=50",
    )
    p = argparse.ArgumentParser(prog="querywatch", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train g, the VAE and the latent reference")
    sub.add_parser("sweep", parents=[common], help="alarm matrix over thresholds and streams")
    sub.add_parser("defend-eval", parents=[common], help="defended vs undefended extraction")
    sub.add_parser("project", parents=[common], help="3-component PCA of latent embeddings")
    sub.add_parser("evasion", parents=[common], help="white-box encoder evasion grid")
    rp = sub.add_parser("monitor-replay", parents=[common], help="replay a stream through the monitor")
    src = rp.add_mutually_exclusive_group()
    src.add_argument("--stream", help="named stream: PD, AltPD, Syn, AdvPD, NPD or JbDA")
    src.add_argument("--stream-path", help="raw tensor directory to replay")
    rp.add_argument("--spaced-out", action="store_true", help="run the dilution experiment instead")
    sub.add_parser("all", parents=[common], help="train followed by every experiment")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers: list[logging.Handler] = []
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, args.set)
        cfg = with_out(with_seed(cfg, args.seed), args.out)
        run = Run(cfg)
        handlers = setup_logging(run.out)
        cmd = args.command
        if cmd == "train":
            cmd_train(run)
        elif cmd == "sweep":
            cmd_sweep(run)
        elif cmd == "defend-eval":
            cmd_defend_eval(run)
        elif cmd == "project":
            cmd_project(run)
        elif cmd == "evasion":
            cmd_evasion(run)
        elif cmd == "monitor-replay":
            if args.spaced_out:
                cmd_spaced_out(run)
            else:
                cmd_monitor_replay(run, args.stream, args.stream_path)
        elif cmd == "all":
            run_all(run)
    except (ConfigError, CheckpointError) as e:
        print(json.dumps({"level": "error", "event": "failed", "error": str(e)}), file=sys.stderr)
        return 2
    finally:
        logger = logging.getLogger("querywatch")
        for h in handlers:
            logger.removeHandler(h)
            h.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
