import json
import shutil
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.core.logger import get_logger_with_env_level
from app.ops.sampler import make_rng
from app.ops.volgrid import LabelMap, Volume, read_volume, write_volume

MANIFEST_NAME = "manifest.json"
MAX_PLACEMENT_ATTEMPTS = 100
SMALL_CLASS_MAX_FRACTION = 0.03

# RNG stream for sample generation; training uses other streams
SYNTH_STREAM = 100


class SynthService:
    """
    Procedural multi-class volumes.

    Class 1 is a handful of small blobs (detail that needs full resolution).
    Middle classes are single large blobs. With ``twin_classes`` the last two
    classes share one intensity and are told apart only by position: the
    first twin lives in the lower half along the first axis, the second twin
    in the upper half.
    """

    def __init__(self, synth_section, workdir: Path = Path(".")):
        self.logger = get_logger_with_env_level("SynthService")
        self.cfg = synth_section
        self.workdir = Path(workdir)
        self.dataset_dir = self.workdir / self.cfg.dataset_dir
        self.logger.debug(f"SynthService dataset_dir: {self.dataset_dir}")

    # ------------------------------------------------------------------
    # generation
    # ------------------------------------------------------------------

    def _twins(self) -> Tuple[int, ...]:
        c = self.cfg.num_classes
        return (c - 2, c - 1) if self.cfg.twin_classes and c >= 4 else ()

    def _intensity(self, label: int) -> float:
        twins = self._twins()
        if twins and label == twins[1]:
            return self.cfg.intensity_means[twins[0]]
        return self.cfg.intensity_means[label]

    def _h_range(self, label: int, shape: Sequence[int]) -> Tuple[int, int]:
        twins = self._twins()
        half = shape[0] // 2
        if twins and label == twins[0]:
            return 0, half
        if twins and label == twins[1]:
            return half, shape[0]
        return 0, shape[0]

    def _place_ellipsoid(
        self,
        labels: np.ndarray,
        label: int,
        radius_range: Sequence[float],
        rng: np.random.Generator,
    ):
        shape = labels.shape
        h_lo, h_hi = self._h_range(label, shape)
        grids = np.ogrid[: shape[0], : shape[1], : shape[2]]
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            base = rng.uniform(radius_range[0], radius_range[1])
            radii = base * rng.uniform(0.8, 1.2, size=3)
            lows = [h_lo + radii[0], radii[1], radii[2]]
            highs = [h_hi - 1 - radii[0], shape[1] - 1 - radii[1], shape[2] - 1 - radii[2]]
            if any(lo > hi for lo, hi in zip(lows, highs)):
                continue
            center = [rng.uniform(lo, hi) for lo, hi in zip(lows, highs)]
            dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
            mask = dist <= 1.0
            if not mask.any() or np.any(labels[mask] != 0):
                continue
            labels[mask] = label
            return
        raise ValueError(
            f"infeasible blob placement for class {label} after {MAX_PLACEMENT_ATTEMPTS} attempts"
        )

    def gen_sample(self, seed: int, index: int = 0, sample_id: str = "") -> Tuple[Volume, LabelMap]:
        cfg = self.cfg
        shape = tuple(cfg.shape)
        rng = make_rng(seed, SYNTH_STREAM, index)
        labels = np.zeros(shape, dtype=np.uint8)

        # large blobs first, they are the hard ones to fit
        for label in range(2, cfg.num_classes):
            self._place_ellipsoid(labels, label, cfg.large_blob_radius, rng)
        if cfg.num_classes > 1:
            lo, hi = cfg.small_blob_count
            for _ in range(int(rng.integers(lo, hi + 1))):
                self._place_ellipsoid(labels, 1, cfg.small_blob_radius, rng)

        small_fraction = float(np.mean(labels == 1))
        if small_fraction > SMALL_CLASS_MAX_FRACTION:
            self.logger.warning(
                f"Small class covers {small_fraction:.1%} of sample {index}, above {SMALL_CLASS_MAX_FRACTION:.0%}"
            )

        means = np.array([self._intensity(c) for c in range(cfg.num_classes)], dtype=np.float64)
        image = means[labels]
        if cfg.noise_sigma > 0:
            image = image + rng.normal(0.0, cfg.noise_sigma, size=shape)
        volume = Volume(image.astype(np.float32), tuple(cfg.spacing), sample_id)
        return volume, LabelMap(labels, cfg.num_classes, tuple(cfg.spacing), sample_id)

    def gen_dataset(self, force: bool = False, seed: Optional[int] = None) -> Path:
        """Write every sample in the sidecar format plus ``manifest.json``."""
        seed = self.cfg.seed if seed is None else seed
        root = self.dataset_dir
        if root.exists() and any(root.iterdir()):
            if not force:
                raise FileExistsError(f"dataset directory {root} is not empty (use --force)")
            self.logger.warning(f"Removing existing dataset directory {root}")
            shutil.rmtree(root)
        root.mkdir(parents=True, exist_ok=True)

        entries = []
        splits = [("train", self.cfg.n_train), ("val", self.cfg.n_val)]
        index = 0
        for split, count in splits:
            for i in range(count):
                sample_id = f"{split}_{i:03d}"
                volume, labels = self.gen_sample(seed, index, sample_id)
                write_volume(root / f"{sample_id}_img", volume)
                write_volume(root / f"{sample_id}_seg", labels)
                entries.append(
                    {
                        "id": sample_id,
                        "split": split,
                        "volume_path": f"{sample_id}_img",
                        "label_path": f"{sample_id}_seg",
                    }
                )
                index += 1

        with open(root / MANIFEST_NAME, "w", encoding="utf-8") as f:
            json.dump(entries, f, indent=2, sort_keys=True)
        self.logger.info(f"Wrote {len(entries)} samples to {root}")
        return root

    # ------------------------------------------------------------------
    # loading
    # ------------------------------------------------------------------

    def load_manifest(self, root: Optional[Path] = None) -> List[dict]:
        root = Path(root) if root is not None else self.dataset_dir
        manifest = root / MANIFEST_NAME
        if not manifest.exists():
            raise FileNotFoundError(f"dataset manifest not found: {manifest} (run `synth` first)")
        with open(manifest, "r", encoding="utf-8") as f:
            return json.load(f)

    def load_dataset(self, split: Optional[str] = None, root: Optional[Path] = None) -> List[Tuple[str, Volume, LabelMap]]:
        root = Path(root) if root is not None else self.dataset_dir
        samples = []
        for entry in self.load_manifest(root):
            if split is not None and entry["split"] != split:
                continue
            volume = read_volume(root / entry["volume_path"])
            labels = read_volume(root / entry["label_path"])
            if not isinstance(labels, LabelMap):
                raise ValueError(f"{entry['label_path']} is not a label map")
            volume.id = labels.id = entry["id"]
            samples.append((entry["id"], volume, labels))
        self.logger.debug(f"Loaded {len(samples)} samples (split={split}) from {root}")
        return samples
