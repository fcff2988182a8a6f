import os
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from trans_action.exceptions import DataError, UsageError

load_dotenv()


class Config:
    # Logging
    LOG_DIR = os.getenv("TRANS_ACTION_LOG_DIR", "logs")
    LOG_LEVEL = os.getenv("TRANS_ACTION_LOG_LEVEL", "INFO")

    # Numerics
    DEBUG = os.getenv("TRANS_ACTION_DEBUG", "0").lower() in ("1", "true", "yes")
    PRECISION = int(os.getenv("TRANS_ACTION_PRECISION", 32))


config = Config()


class RunConfig(BaseModel):
    """Every knob a CLI run can set. Flags and config-file keys use these names."""

    # Paths
    features: Optional[str] = None
    annotations: Optional[str] = None
    output_dir: str = "runs/default"
    checkpoints: List[str] = Field(default_factory=list)
    # Directory of <task>_frequencies.tsv tables for the loss; unset uses the train split counts
    frequency_dir: Optional[str] = None

    # Global
    seed: int = 0
    precision: int = 32
    debug: bool = False

    # Synthetic data
    n_samples: int = Field(default=64, ge=1)
    n_participants: int = Field(default=8, ge=1)
    unseen_fraction: float = Field(default=0.25, ge=0.0, le=1.0)
    zipf_exponent: float = Field(default=1.0, ge=0.0)
    val_fraction: float = Field(default=0.2, ge=0.0, lt=1.0)

    # Model
    n_frames: int = Field(default=8, ge=1)
    d_rgb: int = Field(default=32, ge=1)
    d_flow: int = Field(default=32, ge=1)
    d_obj: int = Field(default=32, ge=1)
    n_blocks: int = Field(default=2, ge=1)
    heads: int = Field(default=4, ge=1)
    d_ff: Optional[int] = None
    n_verbs: int = Field(default=12, ge=1)
    n_nouns: int = Field(default=24, ge=1)
    n_actions: int = Field(default=48, ge=1)
    variant: str = "full"

    # Training
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=16, ge=1)
    learning_rate: float = Field(default=0.01, gt=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    checkpoint_every: int = Field(default=10, ge=1)
    progress: bool = True

    # Equalization loss; lambda_* left unset means the bottom-quartile threshold
    gamma: float = Field(default=0.9, ge=0.0, le=1.0)
    lambda_verb: Optional[float] = None
    lambda_noun: Optional[float] = None
    lambda_action: Optional[float] = None

    # Evaluation
    eval_split: Literal["val", "test", "train"] = "val"
    action_mode: Literal["head", "product"] = "head"
    top_k: int = Field(default=5, ge=1)

    # Gradient check
    gradcheck_entries: int = Field(default=100, ge=1)

    @field_validator("checkpoints", mode="before")
    @classmethod
    def _split_checkpoint_list(cls, value):
        if isinstance(value, str):
            return [part.strip() for part in value.split(",") if part.strip()]
        return value

    @field_validator("precision")
    @classmethod
    def _known_precision(cls, value):
        if value not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        return value

    @model_validator(mode="after")
    def _check_contradictions(self):
        if self.features is not None and self.annotations is None:
            raise ValueError("--features given without --annotations")
        if self.annotations is not None and self.features is None:
            raise ValueError("--annotations given without --features")
        return self


def read_config_file(path: str) -> dict:
    """Parse a `key = value` text file; blank lines and `#` comments are skipped."""
    config_path = Path(path)
    if not config_path.is_file():
        raise DataError(f"Config file not found: {path}")

    values = {}
    for line_no, raw in enumerate(config_path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in RunConfig.model_fields:
            raise UsageError(f"{path}:{line_no}: unknown config key '{key}'")
        values[key] = None if value in ("", "None") else value
    return values


def resolve_run_config(file_values: dict, flag_values: dict) -> RunConfig:
    """Defaults, then config file, then flags; flags win."""
    merged = {}
    for source in (file_values, flag_values):
        merged.update({k: v for k, v in source.items() if v is not None})
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or "config"
        raise UsageError(f"Invalid value for '{field}': {first['msg']}") from e


def render_config(run_config: RunConfig) -> str:
    lines = []
    for key, value in sorted(run_config.model_dump().items()):
        if isinstance(value, list):
            value = ",".join(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def echo_config(run_config: RunConfig, output_dir: Path) -> Path:
    output_dir.mkdir(parents=True, exist_ok=True)
    path = output_dir / "effective_config.txt"
    path.write_text(render_config(run_config), encoding="utf-8")
    return path
