"""Centralized logging configuration for cellsearch.

All modules log through ``get_logger(__name__)`` so that the CLI can switch
verbosity and file output in one place.
"""
from __future__ import annotations

import logging
import sys
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Dict, Optional

ROOT_LOGGER_NAME = "cellsearch"


class CellSearchLogger:
    """Centralized logger registry for cellsearch."""

    _loggers: Dict[str, logging.Logger] = {}
    _default_level = logging.INFO
    _log_file: Optional[Path] = None
    _initialized = False

    @classmethod
    def setup(
        cls,
        level: int = logging.INFO,
        log_file: Optional[Path] = None,
        console: bool = True,
        max_bytes: int = 10 * 1024 * 1024,  # 10MB
        backup_count: int = 3,
    ) -> None:
        """Configure global logging settings.

        Args:
            level: Logging level (DEBUG, INFO, WARNING, ERROR)
            log_file: Optional path to log file (enables file logging)
            console: Whether to output to the console (stderr)
            max_bytes: Maximum size of log file before rotation
            backup_count: Number of backup log files to keep
        """
        cls._default_level = level
        cls._log_file = log_file
        cls._initialized = True

        root_logger = logging.getLogger(ROOT_LOGGER_NAME)
        root_logger.setLevel(level)
        for handler in root_logger.handlers:
            handler.close()
        root_logger.handlers.clear()
        root_logger.propagate = False

        formatter = logging.Formatter(
            fmt="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
        )

        # stdout carries CSV paths and results, so logs go to stderr
        if console:
            console_handler = logging.StreamHandler(sys.stderr)
            console_handler.setLevel(level)
            console_handler.setFormatter(formatter)
            root_logger.addHandler(console_handler)

        if log_file:
            log_file.parent.mkdir(parents=True, exist_ok=True)
            file_handler = RotatingFileHandler(
                log_file,
                maxBytes=max_bytes,
                backupCount=backup_count,
                encoding="utf-8",
            )
            file_handler.setLevel(level)
            file_handler.setFormatter(formatter)
            root_logger.addHandler(file_handler)

        if not root_logger.handlers:
            root_logger.addHandler(logging.NullHandler())

        for logger in cls._loggers.values():
            logger.setLevel(level)

    @classmethod
    def get_logger(cls, name: str) -> logging.Logger:
        """Get or create a logger for a specific module.

        Args:
            name: Logger name (typically ``__name__`` of the module)

        Returns:
            Logger parented under the ``cellsearch`` root
        """
        if not cls._initialized:
            cls.setup(level=logging.WARNING)

        if name not in cls._loggers:
            short = name[len(ROOT_LOGGER_NAME) + 1:] if name.startswith(ROOT_LOGGER_NAME + ".") else name
            logger = logging.getLogger(f"{ROOT_LOGGER_NAME}.{short}")
            logger.setLevel(cls._default_level)
            cls._loggers[name] = logger

        return cls._loggers[name]


def get_logger(name: str) -> logging.Logger:
    """Get a logger instance for a module.

    Usage:
        from cellsearch.logger import get_logger
        logger = get_logger(__name__)
        logger.info("bracket opened")
    """
    return CellSearchLogger.get_logger(name)
