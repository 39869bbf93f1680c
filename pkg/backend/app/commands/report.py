"""`report`: summary tables, Dice gains, σ(c_w) and the DSC-vs-k chart."""

from pathlib import Path

import pandas as pd

from app.commands.common import write_resolved_config
from app.services.net_service import NetService
from app.services.report_service import ReportService
from app.services.train_service import TRAIN_LOG, load_run

NAME = "report"
HELP = "render summary tables from benchmark and training outputs"


def add_arguments(parser):
    parser.add_argument("--bench-csv", help="benchmark CSV (default bench.output_csv)")


def overrides(args):
    return []


def _print(title: str, frame: pd.DataFrame):
    print(f"\n== {title} ==")
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}") if not frame.empty else "(empty)")


def run(args, settings, workdir: Path) -> int:
    workdir = Path(workdir)
    run_dir = workdir / settings.train.run_dir
    out_dir = run_dir / "report"
    service = ReportService(run_dir)
    bench = service.load_bench(Path(args.bench_csv) if args.bench_csv else workdir / settings.bench.output_csv)

    summary = service.summary_table(bench)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out_dir / "summary.csv", index=False)
    _print("benchmark summary", summary)

    if (bench["mode"] == "global").any():
        gains = service.dice_gain(bench)
        gains.to_csv(out_dir / "dice_gain.csv", index=False)
        _print("dice gain over global-only", gains)
        _print("topk vs rf", service.topk_vs_rf(gains))

    chart = service.plot_dsc_vs_k(bench, out_dir / "dsc_vs_k.svg")

    bundle = load_run(NetService(settings.net, settings.synth.num_classes), run_dir)
    weights = service.class_weight_table(bundle)
    weights.to_csv(out_dir / "class_weights.csv", index=False)
    _print("class weights", weights)

    log_path = run_dir / TRAIN_LOG
    if log_path.exists():
        _print("training loss", service.training_summary(log_path))
    write_resolved_config(settings, out_dir)
    print(f"\nchart: {chart}")
    return 0
