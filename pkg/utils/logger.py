import logging
from typing import Optional

LOGGER_NAME = 'fodswin'


def setup_logging(
    log_file: Optional[str] = None,
    level: int = logging.INFO
) -> logging.Logger:
    """
    Configure the package logger.

    Args:
        log_file: Path to a log file. If None, logs go to the console only
        level: Logging level
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)

    # repeated calls (tests, several CLI runs in one process) must not stack handlers
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    """Child logger of the package logger, e.g. `fodswin.trainer`."""
    return logging.getLogger(f'{LOGGER_NAME}.{name}')
