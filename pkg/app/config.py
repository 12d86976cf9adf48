import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Union

from pydantic import ValidationError
from pydantic_settings import BaseSettings

from app.schemas.pipeline import PathsConfig, PipelineConfig
from app.utils.errors import AssetError, ConfigError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    debug: bool = False
    api_title: str = "Pose Synthesis API"
    api_version: str = "1.0.0"
    upload_dir: str = "uploads"
    prior_model_path: Optional[str] = None
    default_jobs: int = 1

    class Config:
        env_file = ".env"


settings = Settings()


def _apply_overrides(data: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Apply CLI flag overrides (--seed, --out, --jobs, --count) on top of the file contents."""
    if overrides.get("seed") is not None:
        data["seed"] = overrides["seed"]
    if overrides.get("jobs") is not None:
        data["jobs"] = overrides["jobs"]
    if overrides.get("out") is not None:
        data.setdefault("paths", {})["output"] = str(overrides["out"])
    if overrides.get("count") is not None:
        data.setdefault("counts", {})[overrides.get("count_field", "images")] = overrides["count"]
    return data


def check_input_paths(config: PipelineConfig) -> None:
    """Every configured input path must exist."""
    for field in PathsConfig.INPUT_FIELDS:
        value = getattr(config.paths, field)
        if value is not None and not os.path.exists(value):
            raise AssetError(f"configured path '{field}' does not exist: {value}")


def load_pipeline_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> PipelineConfig:
    """Load a pipeline config JSON file, apply overrides and validate it."""
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
    if data.get("jobs") is None and settings.default_jobs > 1:
        data["jobs"] = settings.default_jobs
    data = _apply_overrides(data, overrides or {})
    try:
        config = PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid config: {e}")
    check_input_paths(config)
    logger.debug(f"Loaded pipeline config from {path or 'defaults'}")
    return config
