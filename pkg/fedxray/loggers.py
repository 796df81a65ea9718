import logging
import os


def setup_logger(name: str) -> logging.Logger:
    logger = logging.getLogger(name)
    level = os.environ.get("FEDXRAY_LOG_LEVEL")
    if os.environ.get("FEDXRAY_DEBUG", False):
        level = "DEBUG"
    if level and not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
        logger.setLevel(level.upper())
    return logger
