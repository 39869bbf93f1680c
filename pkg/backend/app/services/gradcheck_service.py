"""
Finite-difference checks of every differentiable stage, run in float64.

Each check builds a small random problem from its seed, freezes all random
draws and compares backward gradients with central differences.
"""

from typing import Callable, Dict, List, Sequence

import numpy as np
import pandas as pd

from app.core.logger import get_logger_with_env_level
from app.ops import autodiff as ad
from app.ops.aggregate import ClassWeights, PatchPrediction, aggregate
from app.ops.objective import LossConfig, cross_entropy, soft_dice, total_loss
from app.ops.sampler import draw_gumbels, gumbel_softmax, make_rng, select_patch
from app.ops.volgrid import build_grid, gaussian_weight_map, resize, upsample_probs
from app.services.net_service import NetConfig, SegNet, forward_global, forward_local

GRADCHECK_STREAM = 500
TOLERANCE = 1e-3
EPS = 1e-6


def _random_probs(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    logits = rng.normal(size=shape)
    e = np.exp(logits - logits.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def _check(f: Callable, x: np.ndarray) -> float:
    return ad.finite_diff_check(f, x, eps=EPS)


def check_softmax_tau(seed: int) -> float:
    rng = make_rng(seed, GRADCHECK_STREAM, 1)
    weights = rng.normal(size=6)
    tau = float(rng.uniform(0.3, 2.0))
    return _check(lambda x: ad.sum(ad.mul(ad.softmax_tau(x, tau), weights)), rng.normal(size=6))


def check_soft_dice(seed: int) -> float:
    rng = make_rng(seed, GRADCHECK_STREAM, 2)
    labels = rng.integers(0, 3, size=(4, 4, 4))
    target = np.moveaxis(np.eye(3)[labels], -1, 0)
    return _check(lambda p: soft_dice(p, target), _random_probs(rng, (3, 4, 4, 4)))


def check_cross_entropy(seed: int) -> float:
    rng = make_rng(seed, GRADCHECK_STREAM, 3)
    labels = rng.integers(0, 3, size=(4, 4, 4))
    return _check(lambda p: cross_entropy(p, labels), _random_probs(rng, (3, 4, 4, 4)))


def _aggregate_problem(rng: np.random.Generator):
    shape, patch = (8, 8, 8), (4, 4, 4)
    grid = build_grid(shape, patch, 0.5, mode="floor")
    chosen = sorted(rng.choice(grid.n, size=3, replace=False).tolist())
    up = _random_probs(rng, (3,) + shape)
    preds = [_random_probs(rng, (3,) + patch) for _ in chosen]
    logits = rng.normal(size=3)
    return grid, chosen, up, preds, logits, gaussian_weight_map(patch)


def _make_aggregate_check(mode: str, target: str):
    def check(seed: int) -> float:
        rng = make_rng(seed, GRADCHECK_STREAM, 4 if mode == "normalized" else 5)
        grid, chosen, up, preds, logits, pw = _aggregate_problem(rng)
        weights = rng.normal(size=up.shape)

        def f(x):
            patch_tensors = [ad.DTensor(p) for p in preds]
            cw_logits, up_t = ad.DTensor(logits), ad.DTensor(up)
            if target == "class_weights":
                cw_logits = x
            elif target == "patch":
                patch_tensors[0] = x
            else:
                up_t = x
            patches = [PatchPrediction(p, grid.origins[i]) for p, i in zip(patch_tensors, chosen)]
            high = aggregate(up_t, patches, pw, ClassWeights(cw_logits), mode)
            return ad.sum(ad.mul(high, weights))

        x0 = {"class_weights": logits, "patch": preds[0], "up": up}[target]
        return _check(f, x0)

    return check


def check_select_patch(seed: int) -> float:
    rng = make_rng(seed, GRADCHECK_STREAM, 6)
    stack = rng.normal(size=(5, 3, 3, 3))
    g = draw_gumbels(rng, 5)
    log_probs = np.log(_random_probs(rng, (5,)))
    return _check(lambda lp: ad.sum(select_patch(gumbel_softmax(lp, g, 0.7), stack)), log_probs)


def check_conv3(seed: int) -> float:
    rng = make_rng(seed, GRADCHECK_STREAM, 7)
    kernel = rng.normal(size=(2, 2, 3, 3, 3))
    weights = rng.normal(size=(2, 3, 3, 3))
    return _check(
        lambda x: ad.sum(ad.mul(ad.conv3(x, kernel, stride=2, padding=1), weights)),
        rng.normal(size=(2, 5, 5, 5)),
    )


def check_local_net(seed: int) -> float:
    rng = make_rng(seed, GRADCHECK_STREAM, 8)
    net = SegNet.init(NetConfig(channels=[2, 3], num_classes=3), seed)

    # channel sums are constant after softmax, so take one class only
    def f(x):
        return ad.mean(ad.getitem(forward_local(net, x), 1))

    return _check(f, rng.normal(size=(4, 4, 4)))


def _tiny_pipeline(seed: int):
    rng = make_rng(seed, GRADCHECK_STREAM, 9)
    shape, patch, low = (8, 8, 8), (4, 4, 4), (4, 4, 4)
    grid = build_grid(shape, patch, 0.5, mode="floor")
    global_net = SegNet.init(NetConfig(channels=[2, 2], num_classes=3, score_grid=grid.counts), seed, 1)
    local_net = SegNet.init(NetConfig(channels=[2], num_classes=3), seed, 2)
    # non-zero score head so π depends on the input
    global_net.params["score.weight"].values = rng.normal(size=global_net.params["score.weight"].shape).astype(ad.default_dtype())
    labels = rng.integers(0, 3, size=shape)
    gumbels = draw_gumbels(rng, grid.n)
    cw = rng.normal(size=3)
    return rng, shape, patch, low, grid, global_net, local_net, labels, gumbels, cw


def check_relaxed_pipeline(seed: int) -> float:
    """Global net → π → Gumbel-softmax (soft z) → select → local net → aggregate → total loss."""
    rng, shape, patch, low, grid, global_net, local_net, labels, gumbels, cw = _tiny_pipeline(seed)
    pw = gaussian_weight_map(patch)
    low_labels = labels[::2, ::2, ::2]
    tau, k = 0.8, 2

    def f(x):
        x_low = resize(x, low)
        probs_low, logits = forward_global(global_net, x_low, grid.n)
        pi = ad.softmax(logits, axis=0)
        log_pi = ad.log(pi)
        crops = [ad.reshape(ad.crop(x, o, patch), (1,) + patch) for o in grid.origins]
        stack = ad.concat(crops, axis=0)
        mask = np.zeros(grid.n, dtype=bool)
        preds, patch_labels, patches = [], [], []
        for _ in range(k):
            masked = ad.masked_fill(log_pi, mask, -np.inf) if mask.any() else log_pi
            soft = gumbel_softmax(masked, gumbels, tau)
            idx = int(np.argmax(np.where(mask, -np.inf, log_pi.values + gumbels)))
            mask[idx] = True
            pred = forward_local(local_net, select_patch(soft, stack))
            origin = grid.origins[idx]
            preds.append(pred)
            patches.append(PatchPrediction(pred, origin))
            patch_labels.append(labels[tuple(slice(o, o + p) for o, p in zip(origin, patch))])
        up = upsample_probs(probs_low, shape)
        high = aggregate(up, patches, pw, ClassWeights(ad.DTensor(cw)))
        return total_loss(probs_low, low_labels, high, labels, preds, patch_labels, pi, LossConfig()).total

    return _check(f, rng.normal(size=shape))


CHECKS: Dict[str, Callable[[int], float]] = {
    "softmax_tau": check_softmax_tau,
    "soft_dice": check_soft_dice,
    "cross_entropy": check_cross_entropy,
    "aggregate_normalized": _make_aggregate_check("normalized", "patch"),
    "aggregate_normalized_class_weights": _make_aggregate_check("normalized", "class_weights"),
    "aggregate_eq6_literal": _make_aggregate_check("eq6_literal", "up"),
    "aggregate_eq6_literal_class_weights": _make_aggregate_check("eq6_literal", "class_weights"),
    "select_patch": check_select_patch,
    "conv3": check_conv3,
    "local_net": check_local_net,
    "relaxed_pipeline": check_relaxed_pipeline,
}


class GradcheckService:
    def __init__(self, seeds: Sequence[int] = (0, 1, 2, 3, 4), tolerance: float = TOLERANCE):
        self.logger = get_logger_with_env_level("GradcheckService")
        self.seeds = list(seeds)
        self.tolerance = tolerance

    def run(self, names: Sequence[str] = ()) -> pd.DataFrame:
        names = list(names) or list(CHECKS)
        unknown = [n for n in names if n not in CHECKS]
        if unknown:
            raise ValueError(f"unknown gradient checks: {unknown}")
        rows: List[Dict] = []
        with ad.precision(np.float64):
            for name in names:
                errors = [CHECKS[name](seed) for seed in self.seeds]
                worst = max(errors)
                rows.append({"check": name, "seeds": len(errors), "max_rel_error": worst, "passed": worst <= self.tolerance})
                self.logger.info(f"gradcheck {name}: max relative error {worst:.3e}")
        return pd.DataFrame(rows)
