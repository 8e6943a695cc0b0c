"""Settings loading: YAML defaults with SSLCOUNT_* environment overrides."""

import os
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv

load_dotenv()

PROJECT_ROOT = Path(__file__).parent.parent.parent


def load_settings(yaml_path: Path | None = None) -> dict[str, Any]:
    """Load settings from YAML file with env var overrides.

    Args:
        yaml_path: Path to the YAML config file. Defaults to config/settings.yaml.

    Returns:
        Dict with all configuration values.
    """
    if yaml_path is None:
        yaml_path = PROJECT_ROOT / "config" / "settings.yaml"

    with open(yaml_path) as f:
        config = yaml.safe_load(f) or {}

    config.setdefault("logging", {})
    config.setdefault("paths", {})
    config.setdefault("runtime", {})

    # Environment variable overrides
    if os.getenv("LOG_LEVEL"):
        config["logging"]["level"] = os.getenv("LOG_LEVEL")
    if os.getenv("SSLCOUNT_LOG_DIR"):
        config["logging"]["dir"] = os.getenv("SSLCOUNT_LOG_DIR")
    if os.getenv("SSLCOUNT_DATA_DIR"):
        config["paths"]["data_dir"] = os.getenv("SSLCOUNT_DATA_DIR")
    if os.getenv("SSLCOUNT_WORKERS"):
        config["runtime"]["workers"] = int(os.getenv("SSLCOUNT_WORKERS", "1"))

    return config


# Global settings singleton
settings = load_settings()
