import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from app.commands import bench, gradcheck, infer, report, sampledist, synth, train
from app.core.config import load_settings_from_file
from app.core.exceptions import ConfigError, NumericError
from app.core.logger import resolve_log_level

# Load environment variables from .env file
load_dotenv()

# Set up logging based on environment variable
log_level = resolve_log_level()
logging.basicConfig(
    level=log_level, format="[%(asctime)s] %(levelname)s %(name)s: %(message)s"
)
logging.debug(f"Logging level set to: {logging.getLevelName(log_level)}")

COMMANDS = [synth, train, infer, bench, gradcheck, sampledist, report]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsepatch",
        description="Learned patch selection for 3D segmentation on CPU-sized volumes",
    )
    parser.add_argument("--config", type=Path, help="TOML config (default config/config.toml)")
    parser.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value; may be repeated",
    )
    parser.add_argument("--workdir", type=Path, default=Path("."), help="base directory for all paths")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in COMMANDS:
        sub = subparsers.add_parser(module.NAME, help=module.HELP)
        module.add_arguments(sub)
        sub.set_defaults(module=module)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    module = args.module
    try:
        settings = load_settings_from_file(args.config, list(args.overrides) + module.overrides(args))
        return module.run(args, settings, args.workdir)
    except ConfigError as e:
        logging.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        logging.error(str(e))
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as e:
        logging.error(f"{module.NAME} failed: {e}")
        logging.debug("traceback", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
