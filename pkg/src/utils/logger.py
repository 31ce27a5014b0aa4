"""
Console logging for training runs, sweeps and the command line

Every module logs through the one 'rvae' logger. Records go to stdout with
the level and message colored, so a terminal watching a run can tell epoch
progress (INFO) from eps or divergence trouble (WARNING, ERROR) at a glance.
Result lines printed by the commands stay uncolored on stdout as well.
"""

import logging
import sys
from typing import IO, Optional

from colorama import Fore, Style, init

from src.utils.errors import ConfigurationError

# Initialize colorama
init(autoreset=True)

LEVELS = ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL')


class ColoredFormatter(logging.Formatter):
    """Colors level name and message by severity"""

    COLORS = {
        'DEBUG': Fore.CYAN,
        'INFO': Fore.GREEN,
        'WARNING': Fore.YELLOW,
        'ERROR': Fore.RED,
        'CRITICAL': Fore.RED + Style.BRIGHT,
    }

    def format(self, record):
        # Copy so other handlers see the uncolored record
        record = logging.makeLogRecord(record.__dict__)
        log_color = self.COLORS.get(record.levelname, '')
        record.levelname = f"{log_color}{record.levelname}{Style.RESET_ALL}"
        record.msg = f"{log_color}{record.msg}{Style.RESET_ALL}"
        return super().format(record)


def parse_level(level: str) -> int:
    """Map a level name (any case) to its logging constant"""
    name = str(level).strip().upper()
    if name not in LEVELS:
        raise ConfigurationError(f"unknown log level '{level}', expected one of {', '.join(LEVELS)}")
    return getattr(logging, name)


def set_level(level: str, name: str = 'rvae') -> logging.Logger:
    """Change the level of an already configured logger"""
    target = logging.getLogger(name)
    target.setLevel(parse_level(level))
    return target


def setup_logger(name: str = 'rvae', level: str = 'INFO', stream: Optional[IO[str]] = None) -> logging.Logger:
    """
    Configure a logger with a single colored console handler

    Calling it again replaces the handler instead of stacking a second one.

    Args:
        name: Logger name
        level: DEBUG, INFO, WARNING, ERROR or CRITICAL (any case)
        stream: Destination of the records (stdout when omitted)

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(parse_level(level))
    logger.handlers.clear()

    console_handler = logging.StreamHandler(stream or sys.stdout)
    console_handler.setLevel(logging.DEBUG)
    console_handler.setFormatter(ColoredFormatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    ))
    logger.addHandler(console_handler)
    # Records must not reach the root logger a second time
    logger.propagate = False

    return logger


# Default logger instance
logger = setup_logger()
