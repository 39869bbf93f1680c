"""
Segmentation losses, the entropy term on the patch distribution, the total
training objective, the learning-rate schedule and an AdamW optimizer.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence

import numpy as np

from app.ops import autodiff as ad

CE_CLAMP = 1e-12


@dataclass
class LossConfig:
    dice_weight: float = 0.8
    ce_weight: float = 0.2
    lambda_entropy: float = 1e-4
    entropy_sign: Literal["bonus", "penalty"] = "bonus"
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        if self.dice_weight < 0 or self.ce_weight < 0 or self.lambda_entropy < 0:
            raise ValueError("loss weights and lambda must be non-negative")
        if self.entropy_sign not in ("bonus", "penalty"):
            raise ValueError(f"unknown entropy sign '{self.entropy_sign}'")

    @classmethod
    def from_section(cls, section) -> "LossConfig":
        return cls(**section.model_dump())


@dataclass
class OptimConfig:
    lr: float = 3e-4
    weight_decay: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_fraction: float = 0.2

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")

    @classmethod
    def from_section(cls, section) -> "OptimConfig":
        return cls(**section.model_dump())


def _check_same(pred: ad.DTensor, target: np.ndarray, name: str):
    if pred.shape != target.shape:
        raise ValueError(f"{name}: prediction {pred.shape} and target {target.shape} differ")


def soft_dice(pred: ad.Operand, target_onehot: np.ndarray, epsilon: float = 1e-5) -> ad.DTensor:
    """1 − mean_c (2Σ p·g + ε) / (Σ p + Σ g + ε) over a [C, ...] prediction."""
    pred = ad.as_tensor(pred)
    target_onehot = np.asarray(target_onehot, dtype=pred.values.dtype)
    _check_same(pred, target_onehot, "soft_dice")
    spatial = tuple(range(1, pred.ndim))
    intersection = ad.sum(ad.mul(pred, target_onehot), axes=spatial)
    denominator = ad.add(ad.sum(pred, axes=spatial), target_onehot.sum(axis=spatial))
    dice = ad.div(ad.add(ad.mul(intersection, 2.0), epsilon), ad.add(denominator, epsilon))
    return ad.sub(1.0, ad.mean(dice))


def cross_entropy(pred: ad.Operand, labels: np.ndarray) -> ad.DTensor:
    """Mean over voxels of −log pred[label], with pred clamped at 1e-12."""
    pred = ad.as_tensor(pred)
    labels = np.asarray(labels)
    if pred.shape[1:] != labels.shape:
        raise ValueError(f"cross_entropy: prediction {pred.shape} and labels {labels.shape} differ")
    selector = np.moveaxis(np.eye(pred.shape[0], dtype=pred.values.dtype)[labels.astype(np.int64)], -1, 0)
    picked = ad.sum(ad.mul(pred, selector), axes=0)
    return ad.mul(ad.mean(ad.log(ad.clip_min(picked, CE_CLAMP))), -1.0)


def seg_loss(pred: ad.Operand, labels: np.ndarray, cfg: LossConfig = None) -> ad.DTensor:
    cfg = cfg or LossConfig()
    pred = ad.as_tensor(pred)
    onehot = np.moveaxis(np.eye(pred.shape[0], dtype=pred.values.dtype)[np.asarray(labels).astype(np.int64)], -1, 0)
    dice = soft_dice(pred, onehot, cfg.dice_epsilon)
    ce = cross_entropy(pred, labels)
    return ad.add(ad.mul(dice, cfg.dice_weight), ad.mul(ce, cfg.ce_weight))


def entropy(probs: ad.Operand) -> ad.DTensor:
    """H = −Σ π log π with 0·log 0 = 0."""
    return ad.mul(ad.sum(ad.xlogx(probs)), -1.0)


@dataclass
class LossTerms:
    total: ad.DTensor
    low: float
    high: float
    patch: float
    entropy: float


def total_loss(
    low_pred: ad.Operand,
    low_labels: np.ndarray,
    high_pred: ad.Operand,
    high_labels: np.ndarray,
    patch_preds: Sequence[ad.Operand],
    patch_labels: Sequence[np.ndarray],
    probs: ad.Operand,
    cfg: LossConfig = None,
) -> LossTerms:
    """
    seg(low) + seg(high) + mean_k seg(patch k) + s·λ·H(π).

    s is −1 for the ``bonus`` sign (exploration is rewarded) and +1 for
    ``penalty``.
    """
    cfg = cfg or LossConfig()
    if len(patch_preds) == 0:
        raise ValueError("total_loss needs at least one patch prediction")
    if len(patch_preds) != len(patch_labels):
        raise ValueError("patch predictions and patch labels differ in count")

    low = seg_loss(low_pred, low_labels, cfg)
    high = seg_loss(high_pred, high_labels, cfg)
    patch_terms = [seg_loss(p, y, cfg) for p, y in zip(patch_preds, patch_labels)]
    patch = patch_terms[0]
    for term in patch_terms[1:]:
        patch = ad.add(patch, term)
    patch = ad.div(patch, float(len(patch_terms)))
    h = entropy(probs)
    sign = -1.0 if cfg.entropy_sign == "bonus" else 1.0
    total = ad.add(ad.add(ad.add(low, high), patch), ad.mul(h, sign * cfg.lambda_entropy))
    return LossTerms(total=total, low=low.item(), high=high.item(), patch=patch.item(), entropy=h.item())


def lr_at(iteration: int, total: int, cfg: OptimConfig = None) -> float:
    """Linear warmup to the peak at ``warmup_fraction`` of ``total``, then cosine decay to 0."""
    cfg = cfg or OptimConfig()
    if total <= 0 or not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    warmup = cfg.warmup_fraction * total
    if warmup > 0 and iteration < warmup:
        return cfg.lr * iteration / warmup
    remaining = total - warmup
    if remaining <= 0:
        return cfg.lr
    progress = (iteration - warmup) / remaining
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamW:
    """Adaptive moments with bias correction and decoupled weight decay."""

    params: List[ad.DTensor]
    cfg: OptimConfig = field(default_factory=OptimConfig)
    step_count: int = 0
    m: Dict[int, np.ndarray] = field(default_factory=dict)
    v: Dict[int, np.ndarray] = field(default_factory=dict)

    def step(self, lr: Optional[float] = None):
        lr = self.cfg.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        bias1 = 1.0 - b1**self.step_count
        bias2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = b1 * self.m.get(i, np.zeros_like(g)) + (1.0 - b1) * g
            self.v[i] = b2 * self.v.get(i, np.zeros_like(g)) + (1.0 - b2) * g * g
            m_hat = self.m[i] / bias1
            v_hat = self.v[i] / bias2
            update = m_hat / (np.sqrt(v_hat) + self.cfg.eps) + self.cfg.weight_decay * p.values
            p.values = (p.values - lr * update).astype(p.values.dtype)

    def zero_grad(self):
        ad.zero_grad(self.params)
