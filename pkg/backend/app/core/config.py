# backend/app/core/config.py
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union
import logging

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from app.core.exceptions import ConfigError
from app.core.logger import get_logger_with_env_level

# Will be updated to use get_logger_with_env_level after settings are loaded
logger = logging.getLogger("core.config")

# BACKEND_ROOT is <repo>/backend/
BACKEND_ROOT = Path(__file__).resolve().parent.parent.parent
CONFIG_FILE_PATH = BACKEND_ROOT.parent / "config" / "config.toml"
EXAMPLE_CONFIG_FILE_PATH = BACKEND_ROOT.parent / "config" / "config.example.toml"

Triple = List[int]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Section):
    shape: Triple = [48, 48, 48]
    spacing: List[float] = [1.0, 1.0, 1.0]
    num_classes: int = Field(4, ge=2)
    # class 0 is background; list length must equal num_classes
    intensity_means: List[float] = [0.0, 1.0, 0.5, 0.25]
    noise_sigma: float = Field(0.1, ge=0.0)
    small_blob_count: List[int] = [3, 5]
    small_blob_radius: List[float] = [1.5, 2.5]
    large_blob_radius: List[float] = [5.0, 8.0]
    twin_classes: bool = True
    n_train: int = Field(8, ge=1)
    n_val: int = Field(2, ge=1)
    seed: int = 0
    dataset_dir: str = "data"

    @field_validator("shape")
    @classmethod
    def _positive_shape(cls, v):
        if len(v) != 3 or min(v) < 1:
            raise ValueError("shape must be three positive integers")
        return v


class NetSection(_Section):
    global_channels: List[int] = [8, 16]
    local_channels: List[int] = [8, 16]
    kernel_size: int = 3
    patch_shape: Triple = [16, 16, 16]
    overlap: float = Field(0.5, gt=0.0, lt=1.0)
    global_downsample: List[float] = [3.0, 3.0, 3.0]

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        return v


class TrainSection(_Section):
    epochs: int = Field(10, ge=1)
    iters_per_epoch: int = Field(20, ge=1)
    k_topk: int = Field(3, ge=0)
    extra_random_patches: int = Field(1, ge=0)
    seed: int = 0
    st_mode: Literal["scaled", "plain"] = "scaled"
    redraw_noise: bool = False
    intensity_noise: float = Field(0.0, ge=0.0)
    tau_start: float = Field(2.0, gt=0.0)
    tau_end: float = Field(0.33, gt=0.0)
    train_baseline: bool = True
    run_dir: str = "runs/default"


class LossSection(_Section):
    dice_weight: float = Field(0.8, ge=0.0)
    ce_weight: float = Field(0.2, ge=0.0)
    lambda_entropy: float = Field(1e-4, ge=0.0)
    entropy_sign: Literal["bonus", "penalty"] = "bonus"
    dice_epsilon: float = Field(1e-5, gt=0.0)


class OptimSection(_Section):
    lr: float = Field(3e-4, gt=0.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = Field(0.2, ge=0.0, le=1.0)


class InferSection(_Section):
    mode: Literal["sw", "topk", "rf", "global"] = "topk"
    # integer k, or "full" for every floor-grid candidate
    k: Union[int, Literal["full"]] = 4
    aggregation: Literal["normalized", "eq6_literal"] = "normalized"
    # "learned" or a frozen class-weight logit
    class_weight: Union[float, Literal["learned"]] = "learned"
    rf_threshold: float = Field(0.01, ge=0.0, le=1.0)
    seed: int = 0
    sample_id: Optional[str] = None
    write_pgm: bool = True
    output_dir: str = "runs/default/infer"


class BenchSection(_Section):
    modes: List[Literal["sw", "topk", "rf", "global"]] = ["sw", "global", "topk", "rf"]
    k_values: List[int] = [2, 4, 8]
    include_full: bool = True
    seeds: List[int] = [0, 1, 2]
    repeats: int = Field(3, ge=1)
    class_weight_ablation: bool = True
    frozen_class_weight: float = 6.0
    output_csv: str = "runs/default/bench.csv"


SECTION_MODELS = {
    "synth": SynthSection,
    "net": NetSection,
    "train": TrainSection,
    "loss": LossSection,
    "optim": OptimSection,
    "infer": InferSection,
    "bench": BenchSection,
}


class Settings:
    def __init__(self, config_data: Dict[str, Any]):
        unknown = sorted(set(config_data) - set(SECTION_MODELS))
        if unknown:
            raise ConfigError(unknown[0], "unknown section")
        for name, model in SECTION_MODELS.items():
            section_data = config_data.get(name, {})
            if not isinstance(section_data, dict):
                raise ConfigError(name, "section must be a table")
            try:
                section = model(**section_data)
            except ValidationError as e:
                first = e.errors()[0]
                key = ".".join([name] + [str(p) for p in first["loc"][:1]])
                raise ConfigError(key, first["msg"]) from e
            setattr(self, name, section)
        if len(self.synth.intensity_means) != self.synth.num_classes:
            raise ConfigError(
                "synth.intensity_means", "length must equal synth.num_classes"
            )

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name).model_dump() for name in SECTION_MODELS}

    def dump_toml(self, path: Path) -> Path:
        """Write the resolved configuration next to a command's outputs."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            toml.dump(self.to_dict(), f)
        return path


def parse_override(override: str) -> tuple:
    """Split ``section.key=value`` and decode the value as a TOML scalar or array."""
    if "=" not in override:
        raise ConfigError(override, "override must look like section.key=value")
    dotted, raw = override.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) != 2:
        raise ConfigError(dotted, "override key must be section.key")
    try:
        value = toml.loads(f"v = {raw.strip()}")["v"]
    except toml.TomlDecodeError:
        value = raw.strip()
    return parts[0], parts[1], value


def apply_overrides(config_data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for override in overrides:
        section, key, value = parse_override(override)
        config_data.setdefault(section, {})
        if not isinstance(config_data[section], dict):
            raise ConfigError(section, "section must be a table")
        config_data[section][key] = value
    return config_data


def load_settings_from_file(
    config_path: Optional[Path] = None, overrides: Sequence[str] = ()
) -> Settings:
    config_path_to_load = None
    if config_path is not None:
        config_path_to_load = Path(config_path)
        if not config_path_to_load.exists():
            raise ConfigError("--config", f"file not found: {config_path_to_load}")
    elif CONFIG_FILE_PATH.exists():
        config_path_to_load = CONFIG_FILE_PATH
    elif EXAMPLE_CONFIG_FILE_PATH.exists():
        logger.warning(
            f"Configuration file {CONFIG_FILE_PATH.name} not found in {CONFIG_FILE_PATH.parent}. "
            f"Falling back to {EXAMPLE_CONFIG_FILE_PATH.name}."
        )
        config_path_to_load = EXAMPLE_CONFIG_FILE_PATH
    else:
        logger.warning("No configuration file found; using built-in defaults.")

    config_data: Dict[str, Any] = {}
    if config_path_to_load is not None:
        try:
            with config_path_to_load.open("r", encoding="utf-8") as f:
                config_data = toml.load(f)
        except toml.TomlDecodeError as e:
            raise ConfigError(str(config_path_to_load), f"invalid TOML: {e}") from e
        logger.info(f"Successfully loaded configuration from {config_path_to_load}")

    return Settings(apply_overrides(config_data, overrides))


# At this point, we can safely import the logger utility without circular import concerns
# Update the logger to use our environment-based logging utility
logger = get_logger_with_env_level(__name__)
