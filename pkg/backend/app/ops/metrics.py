"""Evaluation metrics: Dice similarity and statistics of the patch distribution."""

from dataclasses import dataclass
from typing import List

import numpy as np

from app.ops.volgrid import GridSpec


@dataclass
class DiceReport:
    per_class: List[float]
    mean: float


def dsc(pred, gt, num_classes: int, include_background: bool = True) -> DiceReport:
    """
    Per-class Dice 2|P∩G|/(|P|+|G|); a class absent from both scores 1.0.

    The mean runs over the classes present in ``gt``; ``include_background=False``
    gives the foreground-only mean. If none is present it falls back to all
    considered classes.
    """
    pred = np.asarray(getattr(pred, "data", pred))
    gt = np.asarray(getattr(gt, "data", gt))
    if pred.shape != gt.shape:
        raise ValueError(f"dsc: prediction {pred.shape} and ground truth {gt.shape} differ")
    per_class = []
    for c in range(num_classes):
        p, g = pred == c, gt == c
        denom = int(p.sum()) + int(g.sum())
        per_class.append(1.0 if denom == 0 else 2.0 * int(np.logical_and(p, g).sum()) / denom)

    considered = range(num_classes) if include_background else range(1, num_classes)
    present = [c for c in considered if np.any(gt == c)]
    pool = present or list(considered)
    mean = float(np.mean([per_class[c] for c in pool])) if pool else 1.0
    return DiceReport(per_class=per_class, mean=mean)


def foreground_candidates(grid: GridSpec, foreground: np.ndarray, min_fraction: float = 0.0) -> List[int]:
    """
    Indices of grid patches whose foreground fraction exceeds ``min_fraction``
    (any foreground voxel when 0).
    """
    foreground = np.asarray(foreground, dtype=bool)
    if foreground.shape != tuple(grid.volume_shape):
        raise ValueError(f"foreground mask {foreground.shape} does not match grid {grid.volume_shape}")
    picked = []
    for i, origin in enumerate(grid.origins):
        region = tuple(slice(o, o + p) for o, p in zip(origin, grid.patch_shape))
        frac = foreground[region].mean()
        if (min_fraction <= 0.0 and frac > 0.0) or (min_fraction > 0.0 and frac >= min_fraction):
            picked.append(i)
    return picked


def foreground_mass(probs: np.ndarray, grid: GridSpec, labels) -> float:
    """Probability the patch distribution puts on candidates overlapping any foreground voxel."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (grid.n,):
        raise ValueError(f"probs of shape {probs.shape} do not match a grid of {grid.n}")
    labels = np.asarray(getattr(labels, "data", labels))
    idx = foreground_candidates(grid, labels > 0)
    return float(probs[idx].sum()) if idx else 0.0


def distribution_entropy(probs: np.ndarray) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    nz = probs[probs > 0]
    return float(-(nz * np.log(nz)).sum())
