import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import List, Optional

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler

load_dotenv()

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

_configured = False


def setup_logging(verbose: bool = False, log_file: Optional[str] = None) -> None:
    """Rich console on stderr plus a rotating plain-text file under logs/."""
    global _configured
    level_name = "DEBUG" if verbose else os.getenv("DICTUTOR_LOG_LEVEL", "INFO")
    level = getattr(logging, level_name.upper(), logging.INFO)

    root = logging.getLogger()
    if _configured:
        root.setLevel(level)
        return

    console = RichHandler(console=Console(stderr=True), rich_tracebacks=True, show_path=False, markup=False)
    console.setFormatter(logging.Formatter("%(message)s"))
    handlers: List[logging.Handler] = [console]

    path = log_file or os.getenv("DICTUTOR_LOG_FILE", os.path.join("logs", "dictutor.log"))
    if path:
        try:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            file_handler = RotatingFileHandler(path, maxBytes=5_000_000, backupCount=3, encoding="utf-8")
            file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
            handlers.append(file_handler)
        except OSError as e:
            print(f"⚠️  File logging disabled ({path}): {e}", file=sys.stderr)

    root.setLevel(level)
    for h in handlers:
        root.addHandler(h)
    # httpx logs every request at INFO
    logging.getLogger("httpx").setLevel(logging.WARNING)
    _configured = True
