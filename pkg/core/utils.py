import os
import yaml
import logging
from pathlib import Path
from typing import Dict, Any, List, Optional
from dotenv import load_dotenv

from .errors import ConfigurationError

# Load environment variables
load_dotenv()

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
SETTINGS_PATH = "config/settings.yml"


def setup_logging(name: str = "core", level: Optional[str] = None) -> logging.Logger:
    """Setup logging configuration"""
    level = level or os.getenv("SUPERDIFF_LOG_LEVEL") or settings_section("logging").get("level", "INFO")
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT
    )
    return logging.getLogger(name)


def get_project_root() -> Path:
    """Get the project root directory"""
    return Path(__file__).parent.parent


def resolve_path(file_path: str) -> Path:
    """Resolve a path relative to the project root unless it exists as given"""
    path = Path(file_path)
    if path.is_absolute() or path.exists():
        return path
    return get_project_root() / path


def load_yaml_config(file_path: str) -> Dict[str, Any]:
    """Load YAML configuration file"""
    try:
        with open(resolve_path(file_path), 'r', encoding='utf-8') as file:
            return yaml.safe_load(file) or {}
    except Exception as e:
        raise Exception(f"Error loading config file {file_path}: {e}")


def load_settings(config_path: str = SETTINGS_PATH) -> Dict[str, Any]:
    """Load the global settings file, empty if it is missing"""
    if not resolve_path(config_path).exists():
        return {}
    return load_yaml_config(config_path)


def settings_section(section: str, config_path: str = SETTINGS_PATH) -> Dict[str, Any]:
    return dict(load_settings(config_path).get(section, {}) or {})


def ensure_directory(path: str) -> None:
    """Ensure directory exists, create if it doesn't"""
    Path(path).mkdir(parents=True, exist_ok=True)


def thread_cap(default: int = 1) -> int:
    """Worker cap from SUPERDIFF_THREADS"""
    raw = os.getenv("SUPERDIFF_THREADS", "")
    try:
        value = int(raw) if raw else default
    except ValueError:
        return default
    return max(1, value)


def parse_float_list(text: str) -> List[float]:
    """Parse '1e-2,1e-4' style lists"""
    if not text:
        return []
    try:
        return [float(item) for item in text.replace(";", ",").split(",") if item.strip()]
    except ValueError:
        raise ConfigurationError(f"expected a comma-separated list of numbers, got {text!r}")


def merge_settings(*layers: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    """Merge dicts left to right, later layers win; None values are skipped"""
    merged: Dict[str, Any] = {}
    for layer in layers:
        if not layer:
            continue
        for key, value in layer.items():
            if value is not None:
                merged[key] = value
    return merged
