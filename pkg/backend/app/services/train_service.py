import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
import pandas as pd

from app.core.exceptions import NumericError
from app.core.logger import get_logger_with_env_level
from app.ops import autodiff as ad
from app.ops.aggregate import PatchPrediction, aggregate
from app.ops.metrics import distribution_entropy, foreground_candidates, foreground_mass
from app.ops.objective import AdamW, LossConfig, OptimConfig, lr_at, seg_loss, total_loss
from app.ops.sampler import anneal_tau, make_rng, select_patch, topk_sample, uniform_choice
from app.ops.volgrid import (
    LabelMap,
    Volume,
    downsample_label_nearest,
    extract_patch,
    patch_stack,
    resample_trilinear,
    upsample_probs,
)
from app.services.net_service import Geometry, ModelBundle, NetService, forward_global, forward_local

CHECKPOINT_DIR = "checkpoint"
TRAIN_LOG = "train_log.csv"
HISTORY_FILE = "sampling_history.json"
DIAGNOSTICS_DIR = "diagnostics"

# RNG streams
TRAIN_STREAM = 200
BASELINE_STREAM = 300

BASELINE_PATCHES = 4
BASELINE_FG_SHARE = 2.0 / 3.0


@dataclass
class StepResult:
    loss: float
    low: float
    high: float
    patch: float
    entropy: float
    fg_mass: float
    indices: List[int]
    random_indices: List[int]


def score_distribution(bundle: ModelBundle, geometry: Geometry, volume: Volume) -> Tuple[ad.DTensor, ad.DTensor]:
    """(coarse probabilities, π) for one volume."""
    x_low = resample_trilinear(volume, geometry.downsample).data
    probs_low, logits = forward_global(bundle.global_net, x_low, geometry.grid.n)
    return probs_low, ad.softmax(logits, axis=0)


class TrainService:
    """
    Joint training of the global and local networks through the Top-K sampler,
    followed (optionally) by a sliding-window baseline local network trained on
    random patches.
    """

    def __init__(self, settings, workdir: Path = Path(".")):
        self.logger = get_logger_with_env_level("TrainService")
        self.settings = settings
        self.train_cfg = settings.train
        self.loss_cfg = LossConfig.from_section(settings.loss)
        self.optim_cfg = OptimConfig.from_section(settings.optim)
        self.run_dir = Path(workdir) / self.train_cfg.run_dir
        self.net_service = NetService(settings.net, settings.synth.num_classes)
        if self.train_cfg.k_topk + self.train_cfg.extra_random_patches < 1:
            raise ValueError("train.k_topk + train.extra_random_patches must be >= 1")
        self.logger.debug(f"TrainService run_dir: {self.run_dir}")

    # ------------------------------------------------------------------
    # joint step
    # ------------------------------------------------------------------

    def _dump_diagnostics(self, step: int, volume: np.ndarray, labels: np.ndarray, indices, terms: Dict) -> Path:
        path = self.run_dir / DIAGNOSTICS_DIR / f"step_{step}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, volume=volume, labels=labels, indices=np.asarray(indices, dtype=np.int64), **terms)
        return path

    def train_step(
        self,
        bundle: ModelBundle,
        geometry: Geometry,
        volume: Volume,
        labels: LabelMap,
        tau: float,
        rng: np.random.Generator,
        step: int = 0,
    ) -> StepResult:
        """Forward, loss and backward for one volume; gradients are left on the leaves."""
        cfg = self.train_cfg
        grid = geometry.grid
        x = volume.data
        if cfg.intensity_noise > 0:
            x = (x + rng.normal(0.0, cfg.intensity_noise, size=x.shape)).astype(np.float32)
        x_vol = Volume(x, volume.spacing, volume.id)

        probs_low, pi = score_distribution(bundle, geometry, x_vol)
        y_low = downsample_label_nearest(labels, geometry.downsample).data

        stack = ad.DTensor(patch_stack(x, grid))
        local_preds, patch_labels, patches = [], [], []
        indices: List[int] = []
        if cfg.k_topk > 0:
            draw = topk_sample(pi, cfg.k_topk, tau, rng, st_mode=cfg.st_mode, redraw_noise=cfg.redraw_noise)
            indices = draw.indices
            for z, idx in zip(draw.z, draw.indices):
                patch = select_patch(z, stack)
                pred = forward_local(bundle.local_net, patch, grid.patch_shape)
                local_preds.append(pred)
                patches.append(PatchPrediction(pred, grid.origins[idx], float(z.values[idx])))
                patch_labels.append(extract_patch(labels, grid.origins[idx], grid.patch_shape))

        remaining = [i for i in range(grid.n) if i not in set(indices)]
        random_indices = uniform_choice(rng, remaining, cfg.extra_random_patches)
        for idx in random_indices:
            pred = forward_local(bundle.local_net, stack.values[idx], grid.patch_shape)
            local_preds.append(pred)
            patches.append(PatchPrediction(pred, grid.origins[idx]))
            patch_labels.append(extract_patch(labels, grid.origins[idx], grid.patch_shape))

        up = upsample_probs(probs_low, geometry.volume_shape)
        high = aggregate(up, patches, geometry.patch_weight, bundle.class_weights, "normalized")
        terms = total_loss(
            probs_low, y_low, high, labels.data, local_preds, patch_labels, pi, self.loss_cfg
        )
        loss_value = terms.total.item()
        if not np.isfinite(loss_value):
            path = self._dump_diagnostics(
                step,
                x,
                labels.data,
                indices + random_indices,
                {"low": terms.low, "high": terms.high, "patch": terms.patch, "entropy": terms.entropy},
            )
            raise NumericError(f"non-finite loss at step {step}", str(path))
        ad.backward(terms.total)
        return StepResult(
            loss=loss_value,
            low=terms.low,
            high=terms.high,
            patch=terms.patch,
            entropy=terms.entropy,
            fg_mass=foreground_mass(pi.values, grid, labels),
            indices=indices,
            random_indices=random_indices,
        )

    # ------------------------------------------------------------------
    # loops
    # ------------------------------------------------------------------

    def _monitor_record(self, bundle: ModelBundle, geometry: Geometry, monitor, epoch: int) -> Dict:
        _, volume, labels = monitor
        with ad.no_grad():
            _, pi = score_distribution(bundle, geometry, volume)
        probs = pi.values.astype(np.float64)
        return {
            "epoch": epoch,
            "entropy": distribution_entropy(probs),
            "fg_mass": foreground_mass(probs, geometry.grid, labels),
            "pi": [float(p) for p in probs],
        }

    def train_joint(self, bundle: ModelBundle, geometry: Geometry, train_set, monitor) -> Tuple[List[Dict], List[Dict]]:
        cfg = self.train_cfg
        rng = make_rng(cfg.seed, TRAIN_STREAM)
        params = bundle.global_net.parameters() + bundle.local_net.parameters()
        if not bundle.class_weights.frozen:
            params.append(bundle.class_weights.logits)
        optimizer = AdamW(params, self.optim_cfg)
        total = cfg.epochs * cfg.iters_per_epoch
        records: List[Dict] = []
        history = [self._monitor_record(bundle, geometry, monitor, 0)]

        step = 0
        for epoch in range(1, cfg.epochs + 1):
            epoch_losses = []
            for _ in range(cfg.iters_per_epoch):
                progress = step / (total - 1) if total > 1 else 1.0
                tau = anneal_tau(progress, cfg.tau_start, cfg.tau_end)
                sample_id, volume, labels = train_set[int(rng.integers(len(train_set)))]
                result = self.train_step(bundle, geometry, volume, labels, tau, rng, step)
                lr = lr_at(step + 1, total, self.optim_cfg)
                optimizer.step(lr)
                optimizer.zero_grad()
                record = {
                    "phase": "joint",
                    "epoch": epoch,
                    "step": step,
                    "sample": sample_id,
                    "loss": result.loss,
                    "loss_low": result.low,
                    "loss_high": result.high,
                    "loss_patch": result.patch,
                    "entropy": result.entropy,
                    "fg_mass": result.fg_mass,
                    "tau": tau,
                    "lr": lr,
                    "indices": " ".join(str(i) for i in result.indices + result.random_indices),
                }
                records.append(record)
                epoch_losses.append(result.loss)
                self.logger.debug(
                    f"step {step}: loss={result.loss:.4f} tau={tau:.3f} H={result.entropy:.3f} "
                    f"fg_mass={result.fg_mass:.3f} lr={lr:.2e}"
                )
                step += 1
            history.append(self._monitor_record(bundle, geometry, monitor, epoch))
            self.logger.info(
                f"Epoch {epoch}/{cfg.epochs}: mean loss {np.mean(epoch_losses):.4f}, "
                f"monitor fg_mass {history[-1]['fg_mass']:.3f}"
            )
        return records, history

    def _baseline_indices(self, rng: np.random.Generator, fg: List[int], bg: List[int], n: int) -> List[int]:
        picked = []
        for _ in range(BASELINE_PATCHES):
            pool = fg if (rng.random() < BASELINE_FG_SHARE and fg) or not bg else bg
            picked.append(pool[int(rng.integers(len(pool)))] if pool else int(rng.integers(n)))
        return picked

    def train_baseline(self, bundle: ModelBundle, geometry: Geometry, train_set) -> List[Dict]:
        """Local-only network on random patches, 2:1 foreground to background."""
        cfg = self.train_cfg
        rng = make_rng(cfg.seed, BASELINE_STREAM)
        net = bundle.baseline_local
        optimizer = AdamW(net.parameters(), self.optim_cfg)
        grid = geometry.grid
        total = cfg.epochs * cfg.iters_per_epoch
        records = []
        for step in range(total):
            sample_id, volume, labels = train_set[int(rng.integers(len(train_set)))]
            fg = foreground_candidates(grid, labels.data > 0)
            fg_set = set(fg)
            bg = [i for i in range(grid.n) if i not in fg_set]
            indices = self._baseline_indices(rng, fg, bg, grid.n)
            loss = None
            for idx in indices:
                patch = extract_patch(volume, grid.origins[idx], grid.patch_shape)
                pred = forward_local(net, patch, grid.patch_shape)
                term = seg_loss(pred, extract_patch(labels, grid.origins[idx], grid.patch_shape), self.loss_cfg)
                loss = term if loss is None else ad.add(loss, term)
            loss = ad.div(loss, float(len(indices)))
            value = loss.item()
            if not np.isfinite(value):
                path = self._dump_diagnostics(step, volume.data, labels.data, indices, {"loss": value})
                raise NumericError(f"non-finite baseline loss at step {step}", str(path))
            ad.backward(loss)
            lr = lr_at(step + 1, total, self.optim_cfg)
            optimizer.step(lr)
            optimizer.zero_grad()
            records.append(
                {
                    "phase": "baseline",
                    "epoch": step // cfg.iters_per_epoch + 1,
                    "step": step,
                    "sample": sample_id,
                    "loss": value,
                    "lr": lr,
                    "indices": " ".join(str(i) for i in indices),
                }
            )
            self.logger.debug(f"baseline step {step}: loss={value:.4f}")
        self.logger.info(f"Baseline local net trained for {total} steps")
        return records

    def run(self, train_set, val_set=None) -> Dict:
        """Train, then write checkpoint, train_log.csv and sampling_history.json into run_dir."""
        if not train_set:
            raise ValueError("training set is empty")
        cfg = self.train_cfg
        shape = train_set[0][1].shape
        if any(v.shape != shape for _, v, _ in train_set):
            raise ValueError("all training volumes must share one shape")
        geometry = Geometry.from_section(shape, self.settings.net)
        bundle = self.net_service.build(
            shape,
            geometry.low_shape,
            geometry.grid.counts,
            cfg.seed,
            with_baseline=cfg.train_baseline,
        )
        bundle.meta.update(geometry.to_meta())
        monitor = (val_set or train_set)[0]
        self.logger.info(
            f"Training on {len(train_set)} volumes of shape {shape}: "
            f"{geometry.grid.n} candidates, low-res {geometry.low_shape}"
        )

        records, history = self.train_joint(bundle, geometry, train_set, monitor)
        if bundle.baseline_local is not None:
            records += self.train_baseline(bundle, geometry, train_set)

        self.run_dir.mkdir(parents=True, exist_ok=True)
        checkpoint = self.net_service.save_checkpoint(self.run_dir / CHECKPOINT_DIR, bundle)
        pd.DataFrame.from_records(records).to_csv(self.run_dir / TRAIN_LOG, index=False)
        with open(self.run_dir / HISTORY_FILE, "w", encoding="utf-8") as f:
            json.dump({"grid_counts": list(geometry.grid.counts), "epochs": history}, f, indent=2, sort_keys=True)

        sigma = bundle.class_weights.sigma().values
        summary = {
            "checkpoint": str(checkpoint),
            "steps": len([r for r in records if r["phase"] == "joint"]),
            "final_loss": records[-1]["loss"] if records else None,
            "class_weight_sigma": [float(s) for s in sigma],
            "monitor_fg_mass": history[-1]["fg_mass"],
        }
        self.logger.info(f"Training finished: {summary}")
        return summary


def load_run(net_service: NetService, run_dir: Path) -> ModelBundle:
    checkpoint = Path(run_dir) / CHECKPOINT_DIR
    if not (checkpoint / "manifest.json").exists():
        raise FileNotFoundError(f"no checkpoint in {run_dir} (run `train` first)")
    return net_service.load_checkpoint(checkpoint)
