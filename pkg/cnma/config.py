# Configuration for CNMA fitting, estimability checks and ranking runs

import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

import orjson
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from cnma.errors import ConfigError

logger = logging.getLogger(__name__)

# Default library configuration
DEFAULT_CONFIG = {
    "rank_tolerance": 1e-8,
    "fragile_factor": 10.0,  # verdicts within this factor of the rank threshold are flagged
    "psd_tolerance": 1e-10,
    "n_samples": 1000,
    "seed": 20240101,
    "sampling_mode": "joint",
    "max_workers": 1,
    "ci_z": 1.959964,
}

METRICS = ["point-estimate", "p-best", "median-rank", "expected-rank", "sucra", "p-score"]

OUTPUT_FORMATS = ["json", "csv", "svg"]


class CnmaConfig:
    """Configuration class for library-level settings."""

    def __init__(self, config_dict: Optional[Dict] = None):
        """
        Initialize configuration.

        Args:
            config_dict: Optional dictionary to override default settings
        """
        self.config = DEFAULT_CONFIG.copy()
        if config_dict:
            self.config.update(config_dict)

    def get(self, key: str, default=None):
        """Get configuration value."""
        return self.config.get(key, default)

    def set(self, key: str, value):
        """Set configuration value."""
        self.config[key] = value

    def update(self, config_dict: Dict):
        """Update multiple configuration values."""
        self.config.update(config_dict)

    def rank_tolerance(self):
        """Build the RankTolerance used by every rank comparison of a run."""
        from cnma.estimability import RankTolerance

        return RankTolerance(
            relative_threshold=float(self.config["rank_tolerance"]),
            fragile_factor=float(self.config["fragile_factor"]),
        )


def get_config_from_env() -> CnmaConfig:
    """Create configuration from environment variables (and a .env file if present)."""
    load_dotenv()
    config_dict = {}

    if rank_tol := os.getenv("CNMA_RANK_TOL"):
        config_dict["rank_tolerance"] = float(rank_tol)

    if n_samples := os.getenv("CNMA_SAMPLES"):
        config_dict["n_samples"] = int(n_samples)

    if seed := os.getenv("CNMA_SEED"):
        config_dict["seed"] = int(seed)

    if mode := os.getenv("CNMA_SAMPLING_MODE"):
        config_dict["sampling_mode"] = mode

    if workers := os.getenv("CNMA_MAX_WORKERS"):
        config_dict["max_workers"] = int(workers)

    return CnmaConfig(config_dict)


# Predefined configurations for different use cases
CONFIGS = {
    # independent normal draws per element, as used for the published case studies
    "case-study": {
        "sampling_mode": "independent",
        "n_samples": 1000,
    },
    "joint": {
        "sampling_mode": "joint",
        "n_samples": 1000,
    },
    "precise": {
        "sampling_mode": "joint",
        "n_samples": 1_000_000,
        "max_workers": 4,
    },
}


def get_preset_config(preset_name: str) -> CnmaConfig:
    """Get a preset configuration."""
    if preset_name not in CONFIGS:
        raise ValueError(f"Unknown preset: {preset_name}. Available presets: {list(CONFIGS.keys())}")

    return CnmaConfig(CONFIGS[preset_name])


class ModelSection(BaseModel):
    effects: Literal["common", "random"] = Field(default="common", description="Common- or random-effects model")
    anchor: Optional[str] = Field(default=None, description="Parameter fixed at zero (anchored model)")
    interactions: List[str] = Field(default_factory=list, description="Colon-joined component lists, e.g. 'A:B'")

    @field_validator("interactions")
    @classmethod
    def _check_interactions(cls, value: List[str]) -> List[str]:
        for term in value:
            members = [m.strip() for m in term.split(":")]
            if len(members) < 2 or any(not m for m in members) or len(set(members)) != len(members):
                raise ValueError(f"interaction '{term}' needs at least two distinct components")
        return value


class QuestionSection(BaseModel):
    set: Union[Literal["all-treatments", "all-components"], List[str]] = Field(
        default="all-treatments", description="Elements to rank or a named set"
    )
    reference: Optional[str] = Field(default=None, description="Common reference; first element of S* if omitted")
    metric: str = Field(default="p-score", description="Ranking metric")
    orientation: Literal["larger-is-better", "smaller-is-better"] = "larger-is-better"
    samples: int = Field(default=DEFAULT_CONFIG["n_samples"], ge=1)
    seed: int = Field(default=DEFAULT_CONFIG["seed"], ge=0)
    mode: Literal["joint", "independent"] = "joint"

    @field_validator("metric")
    @classmethod
    def _check_metric(cls, value: str) -> str:
        if value not in METRICS:
            raise ValueError(f"unknown metric '{value}'. Available metrics: {METRICS}")
        return value


class OutputSection(BaseModel):
    dir: str = "cnma-out"
    formats: List[str] = Field(default_factory=lambda: ["json", "csv"])

    @field_validator("formats")
    @classmethod
    def _check_formats(cls, value: List[str]) -> List[str]:
        unknown = [f for f in value if f not in OUTPUT_FORMATS]
        if unknown:
            raise ValueError(f"unknown output formats {unknown}. Available formats: {OUTPUT_FORMATS}")
        return value


class RunConfig(BaseModel):
    """One JSON file holding every modelling and ranking decision of a run."""

    data: str = Field(description="Contrast CSV (studlab,treat1,treat2,TE,seTE)")
    model: ModelSection = Field(default_factory=ModelSection)
    question: QuestionSection = Field(default_factory=QuestionSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def data_path(self, base_dir: Optional[Path] = None) -> Path:
        path = Path(self.data)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        return path


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """
    Load and validate a run configuration file.

    Args:
        path: JSON config file

    Returns:
        RunConfig with `data` resolved relative to the config file
    """
    path = Path(path)
    raw = path.read_bytes()
    try:
        payload = orjson.loads(raw)
    except orjson.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}")

    try:
        run_config = RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}")

    run_config.data = str(run_config.data_path(path.parent))
    logger.info(f"Loaded run config from {path} (data={run_config.data})")
    return run_config
