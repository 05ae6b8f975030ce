import logging
from logging.handlers import RotatingFileHandler
import os
import sys

LOG_FILE = "donaldson.log"
FILE_FORMAT = "%(asctime)s [%(levelname)s] %(name)s:%(lineno)d - %(message)s"
CONSOLE_FORMAT = "%(asctime)s [%(levelname)s] %(message)s"


def _resolve_level(level: str, verbose: bool) -> int:
    if verbose:
        return logging.DEBUG
    return getattr(logging, level.upper(), logging.INFO)


def setup_logging(log_dir: str = "logs", level: str = "INFO", verbose: bool = False) -> None:
    os.makedirs(log_dir, exist_ok=True)
    log_level = _resolve_level(level, verbose)

    root_logger = logging.getLogger()
    # one invocation per process normally; tests call main() repeatedly
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()
    root_logger.setLevel(log_level)

    file_handler = RotatingFileHandler(
        os.path.join(log_dir, LOG_FILE),
        maxBytes=5 * 1024 * 1024,
        backupCount=5,
        encoding="utf-8",
    )
    file_handler.setFormatter(logging.Formatter(FILE_FORMAT))

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))

    for handler in (file_handler, console_handler):
        handler.setLevel(log_level)
        root_logger.addHandler(handler)

    logging.info(
        f"Logging initialized (level={logging.getLevelName(log_level)}, dir={log_dir})"
    )
