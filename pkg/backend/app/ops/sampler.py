"""
Differentiable Top-K patch sampling.

Gumbel noise perturbs log π once per call (redrawing per round is optional);
each round takes a tempered softmax, picks the argmax and masks it out of the
support for the following rounds. The returned ``z`` vectors select patches
from a candidate stack by an inner product.
"""

from dataclasses import dataclass, field
from typing import List, Literal, Optional, Sequence

import numpy as np

from app.core.logger import get_logger_with_env_level
from app.ops import autodiff as ad

logger = get_logger_with_env_level(__name__)

StMode = Literal["scaled", "plain", "soft"]

TAU_START = 2.0
TAU_END = 0.33


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``seed`` and an optional stream path."""
    sequence = np.random.SeedSequence([int(seed), *[int(s) for s in stream]])
    return np.random.Generator(np.random.Philox(sequence))


@dataclass
class TopKDraw:
    indices: List[int]
    softhots: List[ad.DTensor]
    z: List[ad.DTensor]
    gumbels: List[np.ndarray] = field(repr=False)

    @property
    def k(self) -> int:
        return len(self.indices)

    def weights(self) -> List[float]:
        """Forward value of each ``z`` at its selected index."""
        return [float(z.values[i]) for z, i in zip(self.z, self.indices)]


def gumbel(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if np.any((u <= 0.0) | (u >= 1.0)):
        raise ValueError("gumbel expects uniforms strictly inside (0, 1)")
    return -np.log(-np.log(u))


def draw_gumbels(rng: np.random.Generator, n: int) -> np.ndarray:
    # open interval; Generator.random can return exactly 0
    u = rng.random(n)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)
    return gumbel(u)


def gumbel_softmax(log_probs: ad.Operand, g: np.ndarray, tau: float) -> ad.DTensor:
    """softmax_tau(log π + g); masked (−inf) entries come out as exactly 0."""
    log_probs = ad.as_tensor(log_probs)
    g = np.asarray(g, dtype=log_probs.values.dtype)
    if g.shape != log_probs.shape:
        raise ValueError(f"gumbel noise shape {g.shape} != {log_probs.shape}")
    return ad.softmax_tau(ad.add(log_probs, g), tau)


def topk_sample(
    probs: ad.Operand,
    k: int,
    tau: float,
    rng: np.random.Generator,
    st_mode: StMode = "scaled",
    redraw_noise: bool = False,
    gumbels: Optional[np.ndarray] = None,
) -> TopKDraw:
    """
    Draw ``k`` distinct patch indices from ``probs``.

    ``gumbels`` freezes the noise (shape [N], or [k, N] when redrawing) so a
    call can be replayed exactly, e.g. for gradient checks.
    """
    probs = ad.as_tensor(probs)
    if probs.ndim != 1:
        raise ValueError(f"probs must be a vector, got shape {probs.shape}")
    n = probs.shape[0]
    support = int(np.count_nonzero(probs.values > 0))
    if k < 1 or k > support:
        raise ValueError(f"cannot sample without replacement: k={k}, support={support}")
    if st_mode not in ("scaled", "plain", "soft"):
        raise ValueError(f"unknown straight-through mode '{st_mode}'")

    if gumbels is None:
        noise = [draw_gumbels(rng, n) for _ in range(k)] if redraw_noise else [draw_gumbels(rng, n)] * k
    else:
        gumbels = np.asarray(gumbels, dtype=np.float64)
        noise = list(gumbels) if gumbels.ndim == 2 else [gumbels] * k

    log_pi = ad.log(probs)
    mask = np.zeros(n, dtype=bool)
    indices, softhots, zs = [], [], []
    for round_idx in range(k):
        g = noise[round_idx]
        masked = ad.masked_fill(log_pi, mask, -np.inf) if mask.any() else log_pi
        soft = gumbel_softmax(masked, g, tau)
        perturbed = np.where(mask, -np.inf, log_pi.values.astype(np.float64) + g)
        idx = int(np.argmax(perturbed))
        hard = np.zeros(n, dtype=soft.values.dtype)
        hard[idx] = 1.0
        if st_mode == "scaled":
            z = ad.mul(ad.straight_through(soft, hard), soft)
        elif st_mode == "plain":
            z = ad.straight_through(soft, hard)
        else:
            z = soft
        indices.append(idx)
        softhots.append(soft)
        zs.append(z)
        mask[idx] = True

    logger.debug(f"topk_sample: k={k} tau={tau:.3f} mode={st_mode} indices={indices}")
    return TopKDraw(indices=indices, softhots=softhots, z=zs, gumbels=noise)


def select_patch(z: ad.Operand, stack: ad.Operand) -> ad.DTensor:
    """Contract ``z`` [N] with a candidate stack [N, ...] over the patch axis."""
    return ad.matvec(z, stack)


def uniform_choice(
    rng: np.random.Generator, candidates: Sequence[int], k: int
) -> List[int]:
    """Pick up to ``k`` of ``candidates`` uniformly without replacement, in draw order."""
    candidates = list(candidates)
    if not candidates or k <= 0:
        return []
    take = min(k, len(candidates))
    picked = rng.choice(len(candidates), size=take, replace=False)
    return [candidates[i] for i in picked]


def anneal_tau(progress: float, start: float = TAU_START, end: float = TAU_END) -> float:
    """Geometric interpolation from ``start`` (progress 0) to ``end`` (progress 1)."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return float(start * (end / start) ** progress)
