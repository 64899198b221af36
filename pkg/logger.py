import logging
from sys import stdout
from typing import Optional

from const import LOG_FILE

_configured_handlers: list[logging.Handler] = []


def create_logger(log_file: Optional[str] = LOG_FILE, level=logging.INFO) -> logging.Logger:
    logger = logging.getLogger()
    for handler in _configured_handlers:
        logger.removeHandler(handler)
        handler.close()
    _configured_handlers.clear()
    formatter = logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s')
    if log_file:
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setFormatter(formatter)
        _configured_handlers.append(file_handler)
    handler = logging.StreamHandler(stdout)
    handler.setFormatter(formatter)
    _configured_handlers.append(handler)
    for configured in _configured_handlers:
        configured.setLevel(level)
        logger.addHandler(configured)
    logger.setLevel(level)
    return logger
