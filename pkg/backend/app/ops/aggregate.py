"""
Blend patch predictions into the upsampled global prediction.

``normalized`` averages overlapping patches by their Gaussian weights and mixes
the result with the global prediction through σ(c_w); voxels no patch covers
keep the global prediction. ``eq6_literal`` pastes patches one after another,
each overwriting its region with σ(c_w)·p_w·patch + (1 − σ(c_w))·global.
"""

from dataclasses import dataclass
from typing import List, Literal, Sequence, Tuple

import numpy as np

from app.ops import autodiff as ad
from app.ops.volgrid import GaussianWeightMap, GridSpec

AggregationMode = Literal["normalized", "eq6_literal"]


@dataclass
class ClassWeights:
    logits: ad.DTensor
    frozen: bool = False

    @property
    def num_classes(self) -> int:
        return self.logits.shape[0]

    def sigma(self) -> ad.DTensor:
        return ad.sigmoid(self.logits)


@dataclass
class PatchPrediction:
    probs: ad.DTensor  # [C, Hp, Wp, Dp]
    origin: Tuple[int, int, int]
    soft_value: float = 1.0


def learnable_class_weights(num_classes: int) -> ClassWeights:
    # σ(0) = 0.5: global and local start with equal say
    return ClassWeights(ad.DTensor(np.zeros(num_classes), requires_grad=True))


def freeze_class_weights(value: float, num_classes: int) -> ClassWeights:
    return ClassWeights(ad.DTensor(np.full(num_classes, value)), frozen=True)


def coverage_map(grid: GridSpec, indices: Sequence[int]) -> np.ndarray:
    covered = np.zeros(grid.volume_shape, dtype=bool)
    for i in indices:
        if not 0 <= i < grid.n:
            raise ValueError(f"patch index {i} outside grid of {grid.n}")
        region = tuple(slice(o, o + p) for o, p in zip(grid.origins[i], grid.patch_shape))
        covered[region] = True
    return covered


def _check_patch(patch: PatchPrediction, volume_shape: Sequence[int], num_classes: int):
    spatial = patch.probs.shape[1:]
    if patch.probs.shape[0] != num_classes:
        raise ValueError(f"patch has {patch.probs.shape[0]} classes, expected {num_classes}")
    if any(o < 0 for o in patch.origin) or any(
        o + p > v for o, p, v in zip(patch.origin, spatial, volume_shape)
    ):
        raise ValueError(f"patch region at {patch.origin} of size {spatial} is out of bounds")


def _class_broadcast(sigma: ad.DTensor, shape: Sequence[int]) -> ad.DTensor:
    return ad.broadcast_to(ad.reshape(sigma, (shape[0], 1, 1, 1)), shape)


def aggregate(
    up: ad.Operand,
    patches: List[PatchPrediction],
    patch_weight: GaussianWeightMap,
    class_weights: ClassWeights,
    mode: AggregationMode = "normalized",
) -> ad.DTensor:
    up = ad.as_tensor(up)
    full_shape = up.shape
    num_classes, volume_shape = full_shape[0], full_shape[1:]
    if class_weights.num_classes != num_classes:
        raise ValueError(
            f"class weights cover {class_weights.num_classes} classes, prediction has {num_classes}"
        )
    for patch in patches:
        _check_patch(patch, volume_shape, num_classes)
    if not patches:
        return up

    pw = np.broadcast_to(patch_weight.data, (num_classes,) + patch_weight.data.shape)
    if patches[0].probs.shape[1:] != patch_weight.data.shape:
        raise ValueError(
            f"patch weight {patch_weight.data.shape} does not match patch {patches[0].probs.shape[1:]}"
        )
    sigma = _class_broadcast(class_weights.sigma(), full_shape)

    if mode == "normalized":
        # fixed summation order by origin keeps the result independent of list order
        ordered = sorted(patches, key=lambda p: tuple(p.origin))
        weight_sum = np.zeros(volume_shape, dtype=np.float64)
        numerator = None
        for patch in ordered:
            region = tuple(slice(o, o + p) for o, p in zip(patch.origin, pw.shape[1:]))
            weight_sum[region] += patch_weight.data
            term = ad.embed(ad.mul(patch.probs, pw), patch.origin, full_shape)
            numerator = term if numerator is None else ad.add(numerator, term)
        covered = weight_sum > 0
        inv_weight = np.where(covered, 1.0 / np.where(covered, weight_sum, 1.0), 0.0)
        inv_weight = np.broadcast_to(inv_weight, full_shape)
        covered4 = np.broadcast_to(covered, full_shape).astype(ad.default_dtype())
        blended = ad.mul(numerator, inv_weight)
        delta = ad.mul(ad.mul(sigma, ad.sub(blended, up)), covered4)
        return ad.add(up, delta)

    if mode == "eq6_literal":
        high = up
        for patch in patches:
            spatial = patch.probs.shape[1:]
            mask = np.zeros(full_shape, dtype=ad.default_dtype())
            mask[(slice(None),) + tuple(slice(o, o + p) for o, p in zip(patch.origin, spatial))] = 1.0
            sigma_patch = ad.crop(sigma, patch.origin, spatial)
            local = ad.mul(sigma_patch, ad.mul(patch.probs, pw))
            glob = ad.mul(ad.sub(1.0, sigma_patch), ad.crop(up, patch.origin, spatial))
            pasted = ad.embed(ad.add(local, glob), patch.origin, full_shape)
            high = ad.add(ad.mul(high, 1.0 - mask), pasted)
        return high

    raise ValueError(f"unknown aggregation mode '{mode}'")
