import logging
import os
from logging.config import fileConfig
from pathlib import Path

LOGGING_INI = Path(__file__).with_name("logging.ini")


def configure_logging(verbose=False, config_file=None):
    """Set up logging from the INI file; GAZECLASS_LOG_LEVEL overrides the package level."""
    fileConfig(str(config_file or LOGGING_INI), disable_existing_loggers=False)
    level = "DEBUG" if verbose else os.environ.get("GAZECLASS_LOG_LEVEL")
    if level:
        logging.getLogger("gazeclass").setLevel(level.upper())
