import logging
import sys
from datetime import datetime
import os
from pathlib import Path

from trans_action.utils.config import config

DETAILED_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s'
SIMPLE_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logger(name: str = "trans_action", log_dir: str = config.LOG_DIR) -> logging.Logger:
    """Setup logger with file and console handlers"""

    # Create logs directory if it doesn't exist
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    logger = logging.getLogger(name)
    logger.setLevel(config.LOG_LEVEL)
    logger.propagate = False

    # Remove existing handlers
    for handler in logger.handlers[:]:
        logger.removeHandler(handler)
        handler.close()

    # File handler for detailed logs
    file_handler = logging.FileHandler(
        f"{log_dir}/trans_action_{datetime.now().strftime('%Y-%m-%d')}.log"
    )
    file_handler.setLevel(config.LOG_LEVEL)
    file_handler.setFormatter(logging.Formatter(DETAILED_FORMAT))

    # Console goes to stderr so report tables on stdout stay clean
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(config.LOG_LEVEL)
    console_handler.setFormatter(logging.Formatter(SIMPLE_FORMAT))

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)

    return logger


def attach_run_log(output_dir: Path) -> logging.Handler:
    """Mirror the detailed log into `<output_dir>/logs/run.log` for one CLI run."""
    log_dir = Path(output_dir) / "logs"
    log_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(log_dir / "run.log")
    handler.setLevel(config.LOG_LEVEL)
    handler.setFormatter(logging.Formatter(DETAILED_FORMAT))
    logger.addHandler(handler)
    return handler


def detach_run_log(handler: logging.Handler) -> None:
    logger.removeHandler(handler)
    handler.close()


# Global logger instance
logger = setup_logger()
