# config.py

import logging
import os
from pathlib import Path
from dotenv import load_dotenv

# Load .env file variables if available
load_dotenv()

# -------- App paths --------
APP_DIR = Path(__file__).resolve().parent
PROJECT_ROOT = APP_DIR.parent.parent
CONFIGS_DIR = PROJECT_ROOT / "configs"
DEFAULT_OUTPUT_DIR = PROJECT_ROOT / "results"

# -------- Environment Variables --------
OUTPUT_DIR_OVERRIDE = os.getenv("MTCSIM_OUTPUT_DIR")
LOG_LEVEL           = os.getenv("MTCSIM_LOG_LEVEL", "INFO")
DEFAULT_WORKERS     = int(os.getenv("MTCSIM_WORKERS", "1"))


# -------- Output directory --------
def resolve_output_dir(configured: str | None) -> Path:
    """Env override wins over the config file, which wins over the project default."""
    if OUTPUT_DIR_OVERRIDE:
        return Path(OUTPUT_DIR_OVERRIDE).resolve()
    if configured:
        return Path(configured).resolve()
    return DEFAULT_OUTPUT_DIR


# -------- Logging --------
def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=(level or LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
