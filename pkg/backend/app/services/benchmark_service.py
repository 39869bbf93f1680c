import time
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
import pandas as pd

from app.core.logger import get_logger_with_env_level
from app.ops.metrics import dsc
from app.services.cost_service import CostService
from app.services.inference_service import InferenceService
from app.services.net_service import ModelBundle

FROZEN_CW_SUFFIX = "_frozen_cw"


def csv_columns(num_classes: int) -> List[str]:
    return (
        ["mode", "k", "seed", "mean_dsc"]
        + [f"dsc_class_{c}" for c in range(num_classes)]
        + ["macs_total", "patch_count", "wall_ms"]
    )


class BenchmarkService:
    """Runs every requested (mode, k, seed) over a sample set and tabulates Dice, MACs and timing."""

    def __init__(self, bundle: ModelBundle, bench_section, infer_section):
        self.logger = get_logger_with_env_level("BenchmarkService")
        self.bundle = bundle
        self.cfg = bench_section
        self.inference = InferenceService(bundle, infer_section)
        self.cost = CostService(bundle)
        self.num_classes = bundle.local_net.cfg.num_classes

    def plan(self) -> List[Tuple[str, Union[int, str], Union[str, float]]]:
        """(mode label, k, class-weight source) triples in output order."""
        runs = []
        for mode in self.cfg.modes:
            if mode in ("sw", "global"):
                runs.append((mode, "-", "learned"))
                continue
            ks: List[Union[int, str]] = list(self.cfg.k_values)
            if mode == "topk" and self.cfg.include_full:
                ks.append("full")
            for k in ks:
                runs.append((mode, k, "learned"))
                if mode == "topk" and self.cfg.class_weight_ablation:
                    runs.append((mode + FROZEN_CW_SUFFIX, k, self.cfg.frozen_class_weight))
        return runs

    def _run_one(self, volume, mode: str, k, seed: int, class_weight):
        base_mode = mode.replace(FROZEN_CW_SUFFIX, "")
        k_arg = None if k == "-" else k
        return self.inference.infer(volume, base_mode, k=k_arg, seed=seed, class_weight=class_weight)

    def _timed(self, volume, mode, k, seed, class_weight):
        timings = []
        result = None
        for _ in range(self.cfg.repeats):
            start = time.perf_counter()
            result = self._run_one(volume, mode, k, seed, class_weight)
            timings.append(time.perf_counter() - start)
        return result, float(np.median(timings))

    def run(self, samples) -> pd.DataFrame:
        if not samples:
            raise ValueError("no samples to benchmark")
        rows: List[Dict] = []
        for mode, k, class_weight in self.plan():
            for seed in self.cfg.seeds:
                per_class, means, counts, walls = [], [], [], []
                for _, volume, labels in samples:
                    result, wall = self._timed(volume, mode, k, seed, class_weight)
                    report = dsc(result.labels(), labels, self.num_classes)
                    per_class.append(report.per_class)
                    means.append(report.mean)
                    counts.append(result.patch_count)
                    walls.append(wall)
                patch_count = int(round(float(np.mean(counts))))
                cost = self.cost.cost_model(mode.replace(FROZEN_CW_SUFFIX, ""), patch_count)
                row = {
                    "mode": mode,
                    "k": k if k != "-" else patch_count,
                    "seed": seed,
                    "mean_dsc": float(np.mean(means)),
                }
                class_means = np.mean(np.asarray(per_class), axis=0)
                row.update({f"dsc_class_{c}": float(v) for c, v in enumerate(class_means)})
                row.update(
                    {
                        "macs_total": cost.macs_total,
                        "patch_count": cost.patch_count,
                        "wall_ms": 1000.0 * float(np.mean(walls)),
                    }
                )
                rows.append(row)
                self.logger.info(
                    f"{mode} k={row['k']} seed={seed}: mean DSC {row['mean_dsc']:.4f}, "
                    f"{cost.macs_total:.3e} MACs"
                )
        return pd.DataFrame(rows, columns=csv_columns(self.num_classes))

    def write(self, frame: pd.DataFrame, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False, float_format="%.6g")
        self.logger.info(f"Benchmark written to {path} ({len(frame)} rows)")
        return path
