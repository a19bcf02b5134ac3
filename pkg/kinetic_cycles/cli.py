import argparse
import logging
import sys
from typing import List, Optional

from .campaign import ExperimentCampaign
from .config_classes import ENV_PREFIX, EXPERIMENTS, ConfigError, ExperimentConfig, load_config
from .geometry import DomainValidationError, from_spec

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class ArgumentParser(argparse.ArgumentParser):
    """Reports usage errors as ConfigError so they map to exit code 2."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="kinetic_cycles",
        description="Numerical checks of boundary regularity for kinetic transport in convex domains.",
        epilog=f"Any config key can also be set through {ENV_PREFIX}<SECTION>__<KEY> environment variables.",
    )
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    run = commands.add_parser("run", help="run one experiment or all of them")
    run.add_argument("experiment", choices=EXPERIMENTS + ("all",))
    run.add_argument("--config", help="INI file with one section per config group")
    run.add_argument("--seed", type=int)
    run.add_argument("--workers", type=int)
    run.add_argument("--quick", action="store_true", help="reduced sample counts and grids")
    run.add_argument("--out", help="output root; results go to <out>/run_<counter>")
    run.add_argument("--domain", help="NAME or NAME:p1,p2,... (sphere, disk, ellipsoid, quartic)")
    run.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", dest="assignments")
    run.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    plot = commands.add_parser("plot", help="log-log plot of a scan CSV")
    plot.add_argument("csv")
    plot.add_argument("--x", default="alpha")
    plot.add_argument("--y", action="append", required=True)
    plot.add_argument("--summary", help="summary.json with fitted slopes")
    plot.add_argument("--output", help="image file instead of a window")
    return parser


def flag_assignments(args) -> List[str]:
    """Flags as section.key=value strings, applied after --set."""
    assignments = list(args.assignments) + [f"run.experiment={args.experiment}"]
    if args.seed is not None:
        assignments.append(f"run.seed={args.seed}")
    if args.workers is not None:
        assignments.append(f"run.workers={args.workers}")
    if args.out is not None:
        assignments.append(f"run.out={args.out}")
    if args.log_level is not None:
        assignments.append(f"run.log_level={args.log_level}")
    if args.domain is not None:
        name, _, params = args.domain.partition(":")
        assignments += [f"domain.name={name}", f"domain.params={params}"]
    return assignments


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config, assignments=flag_assignments(args), quick=args.quick)
    try:
        from_spec(config.domain.name, config.domain.params)
    except (KeyError, DomainValidationError) as e:
        raise ConfigError(f"[domain] {e}") from e
    return config


def run(argv: Optional[List[str]] = None) -> int:
    """
    Command-line entry point.

    Returns:
        int: 0 if every check passed, 1 on any failure, 2 on a configuration error.
    """
    try:
        args = build_parser().parse_args(argv)
        if args.command == "plot":
            from .visualize import plot_scan
            plot_scan(args.csv, args.x, args.y, summary=args.summary, output=args.output)
            return 0
        config = resolve_config(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2

    logging.basicConfig(level=getattr(logging, config.run.log_level.upper(), logging.INFO), format=LOG_FORMAT)
    logger.info("experiments: %s ; seed: %d ; workers: %d%s", config.run.experiment, config.run.seed,
                config.run.workers, " ; quick" if config.run.quick else "")
    return ExperimentCampaign(config).run_campaign()


def main():
    sys.exit(run())
