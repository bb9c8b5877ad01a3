# vslan/utils/logging.py
"""Logging setup shared by the CLI and the mock scorer. stdout carries JSON results, so everything here goes to stderr."""
import logging
from logging.config import dictConfig
from typing import Optional

from vslan.core.config import settings

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
SERVICE_LOGGERS = ("vslan", "uvicorn", "uvicorn.access", "fastapi")
# httpx logs every request at INFO; reward scoring makes thousands of them
QUIET_LOGGERS = ("httpx", "httpcore")


def configure_logging(level: Optional[str] = None) -> logging.Logger:
    """Route the package and server loggers to one stderr handler; ``level`` overrides the settings."""
    log_level = (level or settings.log_level).upper()
    quiet_level = "DEBUG" if log_level == "DEBUG" else "WARNING"

    loggers = {name: {"handlers": ["stderr"], "level": log_level, "propagate": False} for name in SERVICE_LOGGERS}
    loggers.update({name: {"level": quiet_level} for name in QUIET_LOGGERS})

    dictConfig({
        "version": 1,
        "disable_existing_loggers": False,
        "formatters": {"plain": {"format": LOG_FORMAT, "datefmt": "%Y-%m-%d %H:%M:%S"}},
        "handlers": {
            "stderr": {
                "class": "logging.StreamHandler",
                "level": log_level,
                "formatter": "plain",
                "stream": "ext://sys.stderr",
            },
        },
        "loggers": loggers,
        "root": {"handlers": ["stderr"], "level": log_level},
    })
    return logging.getLogger("vslan")
