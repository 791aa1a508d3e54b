"""Command-line entry point: train, eval, dream, diagnose and plot."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from agent import Agent, checkpoint_path
from config import ConfigError, default_run_root, load_config
from plot import plot_metrics
from storage import RunStorage, timestamp

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file or preset name (see presets/)")
    common.add_argument(
        "--override", action="append", default=[], metavar="KEY=VALUE", help="override one config field; repeatable"
    )
    common.add_argument("--run-dir", type=Path, help="run directory (default: a new one under $DESKWORLD_RUN_ROOT)")
    common.add_argument("--seed", type=int, help="shorthand for --override seed=N")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="deskworld", description="Reconstruction-free world-model agent on pixel tasks.")
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser("train", parents=[common], help="train an agent")

    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", type=Path)
    evaluate.add_argument("--episodes", type=int, default=10)

    dream = commands.add_parser("dream", parents=[common], help="decode an imagined rollout into an image grid")
    dream.add_argument("--checkpoint", type=Path)
    dream.add_argument("--context", type=int, default=5)
    dream.add_argument("--horizon", type=int, default=59)

    diagnose = commands.add_parser("diagnose", parents=[common], help="representation collapse report")
    diagnose.add_argument("--checkpoint", type=Path)
    diagnose.add_argument("--observations", type=int, default=256)

    plot = commands.add_parser("plot", parents=[common], help="render metrics files to a PNG")
    plot.add_argument("metrics", nargs="*", type=Path, help="metrics files or run directories")
    plot.add_argument("--output", type=Path)
    return parser


def overrides(args: argparse.Namespace) -> list[str]:
    pairs = list(args.override)
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    return pairs


def latest_run(root: Path) -> Path:
    runs = [p.parent.parent for p in root.glob("*/checkpoints/latest.pt")]
    if not runs:
        raise FileNotFoundError(f"no trained run under {root}; pass --run-dir or --checkpoint")
    return max(runs, key=lambda run: (run / "checkpoints" / "latest.pt").stat().st_mtime)


def resolve_checkpoint(args: argparse.Namespace) -> tuple[Path, Path]:
    """(checkpoint, run directory) from --checkpoint, --run-dir or the newest run."""
    if args.checkpoint is not None:
        run_dir = args.run_dir or args.checkpoint.resolve().parent.parent
        return args.checkpoint, run_dir
    run_dir = args.run_dir or latest_run(default_run_root())
    return checkpoint_path(run_dir), run_dir


def load_agent(args: argparse.Namespace) -> tuple[Agent, Path]:
    if args.config:
        logger.warning("--config is ignored here; the checkpoint carries its own config")
    checkpoint, run_dir = resolve_checkpoint(args)
    return Agent.load(checkpoint, overrides(args)), run_dir


def run_train(args: argparse.Namespace) -> int:
    config = load_config(args.config, overrides(args))
    run_dir = args.run_dir or default_run_root() / f"{config.task}_s{config.seed}_{timestamp()}"
    agent = Agent(config)
    agent.train(RunStorage(run_dir))
    print(f"Run written to {run_dir}")
    return 0


def run_eval(args: argparse.Namespace) -> int:
    agent, _ = load_agent(args)
    result = agent.evaluate(args.episodes)
    print(result.table())
    print(f"mean {result.mean:.3f}  median {result.median:.3f}  over {len(result.returns)} episodes")
    return 0


def run_dream(args: argparse.Namespace) -> int:
    agent, run_dir = load_agent(args)
    result = agent.dream(args.context, args.horizon, RunStorage(run_dir))
    for path in result.paths:
        print(path)
    return 0


def run_diagnose(args: argparse.Namespace) -> int:
    agent, _ = load_agent(args)
    print(agent.diagnose(args.observations).table())
    return 0


def run_plot(args: argparse.Namespace) -> int:
    sources = args.metrics or ([args.run_dir] if args.run_dir else [])
    if not sources:
        raise ConfigError("plot needs metrics files, run directories or --run-dir")
    output = args.output
    if output is None:
        first = sources[0] if sources[0].is_dir() else sources[0].parent
        output = first / "media" / "curves.png"
    print(plot_metrics(sources, output))
    return 0


COMMANDS = {
    "train": run_train,
    "eval": run_eval,
    "dream": run_dream,
    "diagnose": run_diagnose,
    "plot": run_plot,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        logger.error("%s", exc)
        return 2
    except Exception:
        logger.exception("%s failed", args.command)
        return 1


if __name__ == "__main__":
    sys.exit(main())
