"""Logging setup for the CLI and long-running experiments."""

import logging

LOG_FORMAT = "%(asctime)s %(levelname)-7s %(name)s: %(message)s"


def configure_logging(level: str | int = "INFO") -> None:
    """
    Configure the root logger once.

    Args:
        level: Level name or number; unknown names fall back to INFO
    """
    if isinstance(level, str):
        level = logging.getLevelName(level.upper())
        if not isinstance(level, int):
            level = logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    # numpy/scipy do not log, sqlalchemy does
    logging.getLogger("sqlalchemy").setLevel(logging.WARNING)
