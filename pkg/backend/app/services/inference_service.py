from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from app.core.logger import get_logger_with_env_level
from app.ops import autodiff as ad
from app.ops.aggregate import ClassWeights, PatchPrediction, aggregate, freeze_class_weights
from app.ops.metrics import foreground_candidates
from app.ops.sampler import make_rng, uniform_choice
from app.ops.volgrid import (
    GridSpec,
    LabelMap,
    ProbMap,
    Volume,
    build_grid,
    extract_patch,
    gaussian_weight_map,
    upsample_trilinear,
    write_volume,
)
from app.services.net_service import Geometry, ModelBundle, SegNet, forward_global, forward_local
from app.services.train_service import score_distribution

INFER_STREAM = 400
RF_CLASS_WEIGHT = 6.0
RF_FG_PROB = 0.5

Mode = str  # "sw" | "topk" | "rf" | "global"


@dataclass
class InferenceResult:
    probs: ProbMap
    mode: str
    k: int
    indices: List[int] = field(default_factory=list)
    patch_count: int = 0
    grid: Optional[GridSpec] = None

    def labels(self) -> LabelMap:
        return self.probs.argmax()


def resolve_k(k: Union[int, str], n: int) -> int:
    if k == "full":
        return n
    k = int(k)
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the {n} candidate patches")
    return k


def sliding_window(net: SegNet, volume: Volume, patch_shape, overlap) -> InferenceResult:
    """Gaussian-weighted average of local predictions over every cover-grid patch."""
    grid = build_grid(volume.shape, patch_shape, overlap, mode="cover")
    weights = gaussian_weight_map(grid.patch_shape).data.astype(np.float64)
    num_classes = net.cfg.num_classes
    accum = np.zeros((num_classes,) + volume.shape, dtype=np.float64)
    weight_sum = np.zeros(volume.shape, dtype=np.float64)
    with ad.no_grad():
        for origin in grid.origins:
            patch = extract_patch(volume, origin, grid.patch_shape)
            pred = forward_local(net, patch, grid.patch_shape).values.astype(np.float64)
            region = tuple(slice(o, o + p) for o, p in zip(origin, grid.patch_shape))
            accum[(slice(None),) + region] += pred * weights
            weight_sum[region] += weights
    probs = accum / weight_sum
    return InferenceResult(ProbMap(probs), "sw", grid.n, list(range(grid.n)), grid.n, grid)


class InferenceService:
    """Sliding-window, learned Top-K, random-foreground and global-only inference."""

    def __init__(self, bundle: ModelBundle, infer_section=None):
        self.logger = get_logger_with_env_level("InferenceService")
        self.bundle = bundle
        self.cfg = infer_section

    def geometry(self, volume_shape) -> Geometry:
        if tuple(volume_shape) != tuple(self.bundle.volume_shape):
            raise ValueError(f"volume shape {tuple(volume_shape)} != trained shape {self.bundle.volume_shape}")
        return Geometry.from_meta(volume_shape, self.bundle.meta)

    def class_weights(self, source: Union[str, float] = "learned") -> ClassWeights:
        if source == "learned":
            return self.bundle.class_weights
        return freeze_class_weights(float(source), self.bundle.class_weights.num_classes)

    def _global(self, volume: Volume, geometry: Geometry):
        with ad.no_grad():
            probs_low, pi = score_distribution(self.bundle, geometry, volume)
        up = upsample_trilinear(ProbMap(probs_low.values), geometry.volume_shape)
        return up, pi.values.astype(np.float64)

    def _blend(
        self,
        volume: Volume,
        geometry: Geometry,
        up: ProbMap,
        indices: List[int],
        class_weights: ClassWeights,
        aggregation: str,
    ) -> ProbMap:
        grid = geometry.grid
        with ad.no_grad():
            patches = []
            for idx in indices:
                patch = extract_patch(volume, grid.origins[idx], grid.patch_shape)
                pred = forward_local(self.bundle.local_net, patch, grid.patch_shape)
                patches.append(PatchPrediction(pred, grid.origins[idx]))
            high = aggregate(up.data, patches, geometry.patch_weight, class_weights, aggregation)
        return ProbMap(high.values)

    def infer_sw(self, volume: Volume) -> InferenceResult:
        geometry = self.geometry(volume.shape)
        net = self.bundle.baseline_local or self.bundle.local_net
        return sliding_window(net, volume, geometry.grid.patch_shape, geometry.grid.overlap)

    def infer_global(self, volume: Volume) -> InferenceResult:
        geometry = self.geometry(volume.shape)
        up, _ = self._global(volume, geometry)
        return InferenceResult(up, "global", 0, [], 0, geometry.grid)

    def infer_topk(
        self,
        volume: Volume,
        k: Union[int, str],
        class_weight: Union[str, float] = "learned",
        aggregation: str = "normalized",
    ) -> InferenceResult:
        """Deterministic top-k of π (no Gumbel noise, scale 1), blended into the global prediction."""
        geometry = self.geometry(volume.shape)
        k = resolve_k(k, geometry.grid.n)
        up, pi = self._global(volume, geometry)
        # stable sort: ties keep the lower index first
        indices = [int(i) for i in np.argsort(-pi, kind="stable")[:k]]
        probs = self._blend(volume, geometry, up, indices, self.class_weights(class_weight), aggregation)
        return InferenceResult(probs, "topk", k, indices, k, geometry.grid)

    def rf_candidates(self, up: ProbMap, geometry: Geometry, threshold: float) -> List[int]:
        foreground = (1.0 - up.data[0]) > RF_FG_PROB
        return foreground_candidates(geometry.grid, foreground, min_fraction=threshold)

    def infer_rf(
        self,
        volume: Volume,
        k: Union[int, str],
        seed: int = 0,
        threshold: float = 0.01,
        aggregation: str = "normalized",
    ) -> InferenceResult:
        """Uniform choice among foreground candidates, local predictions trusted (σ(c_w) ≈ 0.9975)."""
        geometry = self.geometry(volume.shape)
        up, _ = self._global(volume, geometry)
        candidates = self.rf_candidates(up, geometry, threshold)
        k = resolve_k(k, geometry.grid.n) if k != "full" else len(candidates)
        if len(candidates) < k:
            self.logger.warning(
                f"Only {len(candidates)} foreground candidates for k={k}; taking all of them"
            )
        rng = make_rng(seed, INFER_STREAM)
        indices = sorted(uniform_choice(rng, candidates, k))
        class_weights = freeze_class_weights(RF_CLASS_WEIGHT, self.bundle.class_weights.num_classes)
        probs = self._blend(volume, geometry, up, indices, class_weights, aggregation)
        return InferenceResult(probs, "rf", k, indices, len(indices), geometry.grid)

    def infer(self, volume: Volume, mode: Mode, k=None, seed: int = 0, class_weight="learned") -> InferenceResult:
        cfg = self.cfg
        k = k if k is not None else (cfg.k if cfg is not None else 0)
        aggregation = cfg.aggregation if cfg is not None else "normalized"
        threshold = cfg.rf_threshold if cfg is not None else 0.01
        if mode == "sw":
            return self.infer_sw(volume)
        if mode == "global":
            return self.infer_global(volume)
        if mode == "topk":
            return self.infer_topk(volume, k, class_weight, aggregation)
        if mode == "rf":
            return self.infer_rf(volume, k, seed, threshold, aggregation)
        raise ValueError(f"unknown inference mode '{mode}'")

    # ------------------------------------------------------------------
    # artifacts
    # ------------------------------------------------------------------

    def write_outputs(
        self,
        output_dir: Path,
        result: InferenceResult,
        volume: Volume,
        labels: Optional[LabelMap] = None,
        write_pgm: bool = True,
    ) -> Dict[str, str]:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        stem = volume.id or "sample"
        pred = result.labels()
        pred.spacing, pred.id = volume.spacing, stem
        written = {}
        json_path, _ = write_volume(output_dir / f"{stem}_pred", pred)
        written["prediction"] = str(json_path)
        if write_pgm:
            outline = None
            if result.grid is not None and result.mode in ("topk", "rf"):
                outline = [result.grid.origins[i] for i in result.indices]
                patch_shape = result.grid.patch_shape
            else:
                patch_shape = None
            pgm = mid_slice_pgm(volume, labels, pred, outline, patch_shape)
            pgm_path = output_dir / f"{stem}_mid.pgm"
            pgm_path.write_text(pgm, encoding="ascii")
            written["pgm"] = str(pgm_path)
        self.logger.info(f"Wrote inference outputs for {stem} to {output_dir}")
        return written


def _to_gray(image: np.ndarray) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return np.zeros(image.shape, dtype=np.int64)
    return np.round((image - lo) / (hi - lo) * 255).astype(np.int64)


def mid_slice_pgm(
    volume: Volume,
    labels: Optional[LabelMap],
    pred: LabelMap,
    outline_origins=None,
    patch_shape=None,
) -> str:
    """
    Plain (P2) PGM of the mid-depth slice: input | ground truth | prediction,
    side by side, with selected patch outlines drawn on the input panel.
    """
    d = volume.shape[2] // 2
    image = _to_gray(volume.data[:, :, d])
    if outline_origins and patch_shape is not None:
        for origin in outline_origins:
            if not origin[2] <= d < origin[2] + patch_shape[2]:
                continue
            h0, w0 = origin[0], origin[1]
            h1, w1 = h0 + patch_shape[0] - 1, w0 + patch_shape[1] - 1
            image[h0, w0 : w1 + 1] = 255
            image[h1, w0 : w1 + 1] = 255
            image[h0 : h1 + 1, w0] = 255
            image[h0 : h1 + 1, w1] = 255
    scale = max(1, pred.num_classes - 1)
    panels = [image]
    if labels is not None:
        panels.append(np.round(labels.data[:, :, d].astype(np.float64) / scale * 255).astype(np.int64))
    panels.append(np.round(pred.data[:, :, d].astype(np.float64) / scale * 255).astype(np.int64))
    sheet = np.concatenate(panels, axis=1)
    rows = [" ".join(str(v) for v in row) for row in sheet]
    return "P2\n{} {}\n255\n{}\n".format(sheet.shape[1], sheet.shape[0], "\n".join(rows))
