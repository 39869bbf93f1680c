"""
Global pytest configuration for the SparsePatch test suite.
This file contains fixtures that can be used by all tests.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add the parent directory to sys.path to ensure imports work correctly
sys.path.append(str(Path(__file__).parent.parent))

from app.core.config import Settings  # noqa: E402
from app.ops import autodiff as ad  # noqa: E402
from app.services.synth_service import SynthService  # noqa: E402

# Small enough for a full train/infer/bench cycle in seconds:
# 24³ volumes, 8³ patches, overlap 0.5 → 5³ = 125 floor candidates, 8³ low-res grid.
SMALL_CONFIG = {
    "synth": {
        "shape": [24, 24, 24],
        "num_classes": 4,
        "intensity_means": [0.0, 1.0, 0.5, 0.25],
        "noise_sigma": 0.05,
        "small_blob_count": [2, 3],
        "small_blob_radius": [1.0, 1.5],
        "large_blob_radius": [2.5, 4.0],
        "n_train": 2,
        "n_val": 1,
        "seed": 3,
        "dataset_dir": "data",
    },
    "net": {
        "global_channels": [2, 4],
        "local_channels": [2, 4],
        "patch_shape": [8, 8, 8],
        "overlap": 0.5,
        "global_downsample": [3.0, 3.0, 3.0],
    },
    "train": {
        "epochs": 1,
        "iters_per_epoch": 2,
        "k_topk": 2,
        "extra_random_patches": 1,
        "seed": 0,
        "run_dir": "runs/test",
    },
    "infer": {"mode": "topk", "k": 2, "output_dir": "runs/test/infer"},
    "bench": {
        "modes": ["sw", "global", "topk", "rf"],
        "k_values": [2],
        "include_full": False,
        "seeds": [0],
        "repeats": 1,
        "class_weight_ablation": True,
        "output_csv": "runs/test/bench.csv",
    },
}


def small_config() -> dict:
    return {name: dict(section) for name, section in SMALL_CONFIG.items()}


@pytest.fixture
def small_settings() -> Settings:
    return Settings(small_config())


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Run the autodiff engine in float64 for gradient checks."""
    with ad.precision(np.float64):
        yield


@pytest.fixture
def small_dataset(tmp_path, small_settings):
    """A written 2-train / 1-val dataset under tmp_path; yields (workdir, samples by split)."""
    service = SynthService(small_settings.synth, tmp_path)
    service.gen_dataset()
    return tmp_path, {
        "train": service.load_dataset("train"),
        "val": service.load_dataset("val"),
    }
