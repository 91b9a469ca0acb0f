"""Application logging from the ``logging`` section of the run config."""

from __future__ import annotations

import logging
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Optional

from .config import LoggingConfig

LOGGER_NAME = "orthoforest"
QUIET_LIBRARIES = ("matplotlib", "joblib")

_FORMAT = logging.Formatter(
    "%(asctime)s [%(levelname)s] %(name)s - %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
)


def _file_handler(logger: logging.Logger) -> Optional[RotatingFileHandler]:
    for h in logger.handlers:
        if isinstance(h, RotatingFileHandler):
            return h
    return None


def setup_logging(cfg: Optional[LoggingConfig] = None) -> logging.Logger:
    """Configure and return the ``orthoforest`` logger.

    One RotatingFileHandler on ``<dir>/<file>`` plus an optional console handler.
    Calling again with the same file only adjusts the level; a different file
    replaces the file handler so each run logs where its config says.
    """
    cfg = cfg or LoggingConfig()
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(getattr(logging, cfg.level.upper(), logging.INFO))

    log_path = Path(cfg.dir)
    target = (log_path / cfg.file).resolve()
    current = _file_handler(logger)
    if current is not None and Path(current.baseFilename) == target:
        return logger

    log_path.mkdir(parents=True, exist_ok=True)
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()

    fh = RotatingFileHandler(
        target,
        maxBytes=cfg.max_bytes,
        backupCount=cfg.backup_count,
        encoding="utf-8",
    )
    fh.setFormatter(_FORMAT)
    logger.addHandler(fh)

    if cfg.console:
        ch = logging.StreamHandler()
        ch.setFormatter(_FORMAT)
        logger.addHandler(ch)

    # joblib workers and matplotlib are chatty at DEBUG
    for lib in QUIET_LIBRARIES:
        logging.getLogger(lib).setLevel(logging.WARNING)

    return logger
