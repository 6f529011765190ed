import logging
import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


@dataclass(frozen=True)
class Settings:
    """Process-level settings read from the environment."""

    threads: int = -1
    log_level: str = "INFO"
    output_dir: str = "results"


def load_settings(env_file: Optional[str] = None) -> Settings:
    """Load settings from environment variables, optionally from a .env file."""
    # Load environment variables
    if env_file:
        load_dotenv(env_file)
    else:
        load_dotenv()

    threads_raw = os.getenv("FIEM_THREADS", "-1")
    try:
        threads = int(threads_raw)
    except ValueError:
        raise ValueError(f"FIEM_THREADS must be an integer, got {threads_raw!r}")
    if threads == 0:
        raise ValueError("FIEM_THREADS must be non-zero (-1 means all cores)")

    return Settings(
        threads=threads,
        log_level=os.getenv("FIEM_LOG_LEVEL", "INFO").upper(),
        output_dir=os.getenv("FIEM_OUTPUT_DIR", "results"),
    )


def configure_logging(level: str = "INFO") -> None:
    """Install a single stream handler on the package logger."""
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        raise ValueError(f"Unknown log level {level!r}")
    root = logging.getLogger("fiem")
    root.handlers.clear()
    handler = logging.StreamHandler()
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root.addHandler(handler)
    root.setLevel(numeric)
    root.propagate = False
