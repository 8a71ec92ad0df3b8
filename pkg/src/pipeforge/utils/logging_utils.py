#!/usr/bin/env python3
"""
Logging setup

Console output is coloured by level with colorama; an optional log file
receives the same records without colour codes.
"""

import logging
import os
from typing import Optional

from colorama import Fore, Style, init as colorama_init

_LEVEL_COLOURS = {
    logging.DEBUG: Fore.CYAN,
    logging.INFO: Fore.GREEN,
    logging.WARNING: Fore.YELLOW,
    logging.ERROR: Fore.RED,
    logging.CRITICAL: Fore.RED + Style.BRIGHT,
}

_CONSOLE_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
_FILE_FORMAT = "%(asctime)s %(levelname)-8s %(name)s [%(threadName)s]: %(message)s"


class ColourFormatter(logging.Formatter):
    """Formatter that wraps the level name in a colour escape"""

    def format(self, record: logging.LogRecord) -> str:
        colour = _LEVEL_COLOURS.get(record.levelno, "")
        original = record.levelname
        record.levelname = f"{colour}{original}{Style.RESET_ALL}"
        try:
            return super().format(record)
        finally:
            record.levelname = original


def setup_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Configure the package logger

    Args:
        level: Level name for the console handler
        log_file: Optional path of a log file (directory created on demand)
    """
    colorama_init()
    root = logging.getLogger("pipeforge")
    root.setLevel(logging.DEBUG)
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()

    console = logging.StreamHandler()
    console.setLevel(getattr(logging, str(level).upper(), logging.INFO))
    console.setFormatter(ColourFormatter(_CONSOLE_FORMAT, datefmt="%H:%M:%S"))
    root.addHandler(console)

    if log_file:
        directory = os.path.dirname(log_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding="utf-8")
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(_FILE_FORMAT))
        root.addHandler(file_handler)

    root.propagate = False
