"""
Analytic compute cost of each inference mode.

macs_total = macs_global·[mode runs the global net]
           + patch_count·macs_per_patch
           + macs_aggregation·[mode blends patches and patch_count > 0]
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional

import numpy as np

from app.core.logger import get_logger_with_env_level
from app.ops.volgrid import build_grid
from app.services.net_service import Geometry, ModelBundle, count_macs

# multiply-accumulates per voxel and class for weighted blending
AGGREGATION_OPS_PER_VOXEL = 4

GLOBAL_MODES = ("topk", "rf", "global")
AGGREGATING_MODES = ("topk", "rf")


@dataclass
class PhaseCosts:
    macs_global: float
    macs_per_patch: float
    macs_aggregation: float


@dataclass
class CostReport:
    mode: str
    patch_count: int
    macs_global: float
    macs_per_patch: float
    macs_aggregation: float
    macs_total: float
    wall_clock_seconds: Optional[float] = None

    def to_dict(self) -> Dict:
        return asdict(self)


def cost_from_phases(phases: PhaseCosts, mode: str, patch_count: int) -> CostReport:
    """Combine per-phase costs; also used with externally supplied constants."""
    if mode not in ("sw", "topk", "rf", "global"):
        raise ValueError(f"unknown inference mode '{mode}'")
    uses_global = mode in GLOBAL_MODES
    aggregates = mode in AGGREGATING_MODES and patch_count > 0
    total = (
        phases.macs_global * uses_global
        + patch_count * phases.macs_per_patch
        + phases.macs_aggregation * aggregates
    )
    return CostReport(
        mode=mode,
        patch_count=patch_count,
        macs_global=phases.macs_global if uses_global else 0.0,
        macs_per_patch=phases.macs_per_patch,
        macs_aggregation=phases.macs_aggregation if aggregates else 0.0,
        macs_total=float(total),
    )


class CostService:
    """Counts MACs of the networks in a checkpoint for a given mode and k."""

    def __init__(self, bundle: ModelBundle):
        self.logger = get_logger_with_env_level("CostService")
        self.bundle = bundle
        self.geometry = Geometry.from_meta(bundle.volume_shape, bundle.meta)

    def phases(self, patch_count: int, local_for_sw: bool = False) -> PhaseCosts:
        patch_shape = self.geometry.grid.patch_shape
        local = self.bundle.baseline_local if local_for_sw and self.bundle.baseline_local else self.bundle.local_net
        num_classes = self.bundle.local_net.cfg.num_classes
        full_voxels = int(np.prod(self.geometry.volume_shape))
        touched = patch_count * int(np.prod(patch_shape)) + full_voxels
        return PhaseCosts(
            macs_global=float(count_macs(self.bundle.global_net.cfg, self.geometry.low_shape)),
            macs_per_patch=float(count_macs(local.cfg, patch_shape)),
            macs_aggregation=float(touched * num_classes * AGGREGATION_OPS_PER_VOXEL),
        )

    def sw_patch_count(self) -> int:
        grid = self.geometry.grid
        return build_grid(self.geometry.volume_shape, grid.patch_shape, grid.overlap, mode="cover").n

    def cost_model(self, mode: str, patch_count: int) -> CostReport:
        if mode == "sw":
            patch_count = self.sw_patch_count()
        report = cost_from_phases(self.phases(patch_count, local_for_sw=(mode == "sw")), mode, patch_count)
        self.logger.debug(f"cost {mode} k={patch_count}: {report.macs_total:.3e} MACs")
        return report
