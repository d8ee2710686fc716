import logging
import os
import sys

from colorama import Fore, Style, init as colorama_init

LOG_FORMAT = "%(levelname)s: %(message)s"

_LEVEL_COLORS = {
    logging.DEBUG: Fore.CYAN,
    logging.INFO: Fore.GREEN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}


class ColorFormatter(logging.Formatter):
    """Colors the level name; the message itself stays plain."""

    def format(self, record: logging.LogRecord) -> str:
        color = _LEVEL_COLORS.get(record.levelno, "")
        original = record.levelname
        record.levelname = f"{color}{original}{Style.RESET_ALL}"
        try:
            return super().format(record)
        finally:
            record.levelname = original


def configure_logging(level: str | int | None = None) -> None:
    """
    Configures the root logger once for the CLI.

    Level comes from the argument, then AGGLOD_LOG_LEVEL, then INFO.
    """
    if level is None:
        level = os.environ.get("AGGLOD_LOG_LEVEL", "INFO")
    if isinstance(level, str):
        level = getattr(logging, level.upper(), logging.INFO)

    colorama_init()
    handler = logging.StreamHandler(sys.stderr)
    if sys.stderr.isatty():
        handler.setFormatter(ColorFormatter(LOG_FORMAT))
    else:
        handler.setFormatter(logging.Formatter(LOG_FORMAT))

    root = logging.getLogger()
    for existing in list(root.handlers):
        root.removeHandler(existing)
    root.addHandler(handler)
    root.setLevel(level)


def progress_enabled() -> bool:
    """tqdm bars only when a human is watching."""
    return sys.stderr.isatty() and logging.getLogger().isEnabledFor(logging.INFO)
