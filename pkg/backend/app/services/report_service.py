import json
from pathlib import Path
from typing import Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from app.core.logger import get_logger_with_env_level  # noqa: E402
from app.services.net_service import ModelBundle  # noqa: E402

SAMPLEDIST_CSV = "sampledist.csv"


def _numeric_k(frame: pd.DataFrame) -> pd.DataFrame:
    frame = frame.copy()
    frame["k_num"] = pd.to_numeric(frame["k"], errors="coerce")
    return frame


class ReportService:
    """Turns benchmark CSVs, training logs and sampling histories into summaries."""

    def __init__(self, run_dir: Path):
        self.logger = get_logger_with_env_level("ReportService")
        self.run_dir = Path(run_dir)

    # ------------------------------------------------------------------
    # benchmark tables
    # ------------------------------------------------------------------

    def load_bench(self, path: Path) -> pd.DataFrame:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"benchmark CSV not found: {path} (run `bench` first)")
        return pd.read_csv(path, dtype={"k": str})

    def summary_table(self, bench: pd.DataFrame) -> pd.DataFrame:
        """Seed-averaged Dice, MACs and timing per (mode, k)."""
        grouped = bench.groupby(["mode", "k"], sort=False)
        table = grouped.agg(
            mean_dsc=("mean_dsc", "mean"),
            dsc_std=("mean_dsc", "std"),
            macs_total=("macs_total", "mean"),
            patch_count=("patch_count", "mean"),
            wall_ms=("wall_ms", "median"),
            seeds=("seed", "nunique"),
        )
        table["dsc_std"] = table["dsc_std"].fillna(0.0)
        return table.reset_index()

    def dice_gain(self, bench: pd.DataFrame) -> pd.DataFrame:
        """Per-class Dice gain of each topk/rf row over the global-only row (same seed)."""
        class_cols = [c for c in bench.columns if c.startswith("dsc_class_")]
        base = bench[bench["mode"] == "global"]
        if base.empty:
            raise ValueError("benchmark has no global-only row to compare against")
        base = base.groupby("seed")[class_cols + ["mean_dsc"]].mean()
        rows = []
        for _, row in bench[bench["mode"].isin(["topk", "rf"])].iterrows():
            if row["seed"] not in base.index:
                continue
            ref = base.loc[row["seed"]]
            gains = {f"gain_{c}": row[c] - ref[c] for c in class_cols}
            rows.append({"mode": row["mode"], "k": row["k"], "seed": row["seed"], "gain_mean": row["mean_dsc"] - ref["mean_dsc"], **gains})
        gains = pd.DataFrame(rows)
        if gains.empty:
            return gains
        return gains.groupby(["mode", "k"], sort=False).mean(numeric_only=True).drop(columns="seed").reset_index()

    def topk_vs_rf(self, gains: pd.DataFrame) -> pd.DataFrame:
        """Side-by-side mean gain of learned and random-foreground selection at equal k."""
        if gains.empty:
            return gains
        pivot = gains.pivot_table(index="k", columns="mode", values="gain_mean")
        if {"topk", "rf"} <= set(pivot.columns):
            pivot["topk_minus_rf"] = pivot["topk"] - pivot["rf"]
        return pivot.reset_index()

    def plot_dsc_vs_k(self, bench: pd.DataFrame, path: Path) -> Path:
        """Deterministic SVG of mean DSC against k for the topk and rf rows."""
        frame = _numeric_k(bench)
        plt.rcParams["svg.hashsalt"] = "sparsepatch"
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for mode, marker in (("topk", "o"), ("rf", "s")):
            rows = frame[(frame["mode"] == mode) & frame["k_num"].notna()]
            if rows.empty:
                continue
            curve = rows.groupby("k_num")["mean_dsc"].mean().sort_index()
            ax.plot(curve.index, curve.values, marker=marker, label=mode)
        for mode, style in (("sw", "--"), ("global", ":")):
            rows = frame[frame["mode"] == mode]
            if not rows.empty:
                ax.axhline(rows["mean_dsc"].mean(), linestyle=style, color="gray", label=mode)
        ax.set_xlabel("k (patches)")
        ax.set_ylabel("mean DSC")
        ax.legend(loc="lower right")
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        return path

    # ------------------------------------------------------------------
    # checkpoint and training log
    # ------------------------------------------------------------------

    def class_weight_table(self, bundle: ModelBundle) -> pd.DataFrame:
        sigma = 1.0 / (1.0 + np.exp(-bundle.class_weights.logits.values.astype(np.float64)))
        return pd.DataFrame(
            {
                "class": list(range(len(sigma))),
                "logit": bundle.class_weights.logits.values.astype(np.float64),
                "sigma": sigma,
            }
        )

    def training_summary(self, log_path: Path) -> pd.DataFrame:
        log_path = Path(log_path)
        if not log_path.exists():
            raise FileNotFoundError(f"training log not found: {log_path}")
        log = pd.read_csv(log_path)
        return log.groupby(["phase", "epoch"], sort=False)["loss"].agg(["mean", "min", "max"]).reset_index()

    # ------------------------------------------------------------------
    # sampling distribution history
    # ------------------------------------------------------------------

    def load_history(self, path: Optional[Path] = None) -> Dict:
        path = Path(path) if path is not None else self.run_dir / "sampling_history.json"
        if not path.exists():
            raise FileNotFoundError(f"sampling history not found: {path} (run `train` first)")
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)

    def sampledist_frame(self, history: Dict) -> pd.DataFrame:
        rows = []
        for entry in history["epochs"]:
            row = {"epoch": entry["epoch"], "entropy": entry["entropy"], "fg_mass": entry["fg_mass"]}
            row.update({f"pi_{i}": p for i, p in enumerate(entry["pi"])})
            rows.append(row)
        return pd.DataFrame(rows)

    def sampledist_pgm(self, history: Dict) -> str:
        """One row of mid-depth π slices (one tile per epoch), scaled to the global max."""
        counts = tuple(history["grid_counts"])
        tiles = [np.asarray(e["pi"]).reshape(counts)[:, :, counts[2] // 2] for e in history["epochs"]]
        peak = max(float(t.max()) for t in tiles) or 1.0
        gap = np.zeros((counts[0], 1))
        pieces: List[np.ndarray] = []
        for tile in tiles:
            pieces.extend([tile, gap])
        sheet = np.round(np.concatenate(pieces[:-1], axis=1) / peak * 255).astype(np.int64)
        rows = [" ".join(str(v) for v in row) for row in sheet]
        return "P2\n{} {}\n255\n{}\n".format(sheet.shape[1], sheet.shape[0], "\n".join(rows))

    def write_sampledist(self, output_dir: Path, write_pgm: bool = True) -> Dict[str, str]:
        history = self.load_history()
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        frame = self.sampledist_frame(history)
        csv_path = output_dir / SAMPLEDIST_CSV
        frame.to_csv(csv_path, index=False, float_format="%.6g")
        written = {"csv": str(csv_path)}
        if write_pgm:
            pgm_path = output_dir / "sampledist.pgm"
            pgm_path.write_text(self.sampledist_pgm(history), encoding="ascii")
            written["pgm"] = str(pgm_path)
        self.logger.info(f"Sampling distribution over {len(frame)} epochs written to {output_dir}")
        return written
