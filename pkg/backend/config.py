"""Run configuration: TOML file, environment and CLI overrides merged into RunConfig."""
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from pydantic import ValidationError

from .models.errors import ConfigError
from .models.schemas import RunConfig

# Load environment variables from .env file
load_dotenv()


def env_defaults() -> Dict[str, Any]:
    """Top-level settings taken from the environment when present."""
    values: Dict[str, Any] = {}
    if os.getenv("CASCADE_OUT_DIR"):
        values["out_dir"] = os.getenv("CASCADE_OUT_DIR")
    if os.getenv("CASCADE_SEED"):
        try:
            values["seed"] = int(os.getenv("CASCADE_SEED"))
        except ValueError as exc:
            raise ConfigError(f"CASCADE_SEED must be an integer, got {os.getenv('CASCADE_SEED')!r}") from exc
    return values


def read_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        with open(path, "rb") as f:
            return tomllib.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML in {path}: {exc}") from exc


def load_run_config(
    path: Optional[str] = None,
    seed: Optional[int] = None,
    out_dir: Optional[str] = None,
    strict: Optional[bool] = None,
) -> RunConfig:
    """CLI flag > config file > environment > model default."""
    data: Dict[str, Any] = env_defaults()
    if path:
        data.update(read_config_file(path))
    for key, value in (("seed", seed), ("out_dir", out_dir), ("strict", strict)):
        if value is not None:
            data[key] = value
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def configure_logging(level: Optional[str] = None) -> None:
    level_name = (level or os.getenv("CASCADE_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
