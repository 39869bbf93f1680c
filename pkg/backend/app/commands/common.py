"""Helpers shared by the command modules."""

from pathlib import Path
from typing import List, Optional, Tuple

from app.core.config import Settings
from app.core.logger import get_logger_with_env_level
from app.ops.volgrid import LabelMap, Volume
from app.services.synth_service import SynthService

logger = get_logger_with_env_level(__name__)

RESOLVED_CONFIG = "resolved_config.toml"


def write_resolved_config(settings: Settings, directory: Path) -> Path:
    path = settings.dump_toml(Path(directory) / RESOLVED_CONFIG)
    logger.debug(f"Resolved configuration written to {path}")
    return path


def load_split(
    settings: Settings, workdir: Path, split: str, fallback: Optional[str] = "train"
) -> List[Tuple[str, Volume, LabelMap]]:
    """Samples of ``split``, or of ``fallback`` when that split is empty."""
    synth = SynthService(settings.synth, workdir)
    samples = synth.load_dataset(split)
    if not samples and fallback:
        logger.warning(f"No '{split}' samples in {synth.dataset_dir}; using '{fallback}'")
        samples = synth.load_dataset(fallback)
    if not samples:
        raise FileNotFoundError(f"no samples found in {synth.dataset_dir}")
    return samples
