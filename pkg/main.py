import argparse
import logging
import sys

from app.config import load_scenario, settings
from app.errors import exit_code_for
from app.logging_config import setup_logging
from app.routers import setup_routers

logger = logging.getLogger(__name__)


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    parser = argparse.ArgumentParser(
        prog="donaldson",
        description="Equivariant Donaldson divisors on torus quotients and orbifold charts",
    )
    parser.add_argument("--config", required=True, help="scenario YAML file")
    parser.add_argument("--out", help="artifact directory (overrides the config)")
    parser.add_argument("--jobs", type=int, help="worker threads for the local searches")
    parser.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    subparsers = parser.add_subparsers(dest="verb", required=True)
    routes = setup_routers(subparsers)
    return parser, routes


def main(argv: list[str] | None = None) -> int:
    parser, routes = build_parser()
    args = parser.parse_args(argv)
    setup_logging(settings.LOG_DIR, settings.LOG_LEVEL, args.verbose)
    try:
        config = load_scenario(args.config, {"out": args.out, "jobs": args.jobs})
        logger.info(f"Running '{args.verb}' on {config.preset} (k={config.k}) into {config.output_dir()}")
        routes[args.verb](config)
    except KeyboardInterrupt:
        logger.info("Stopped by user (KeyboardInterrupt)")
        return 130
    except Exception as e:
        code = exit_code_for(e)
        module = getattr(e, "module", "internal")
        logger.error(f"[{module}] {type(e).__name__}: {e} (exit code {code})", exc_info=code == 4)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
