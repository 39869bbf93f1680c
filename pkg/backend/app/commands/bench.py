"""`bench`: benchmark CSV over modes, k values and seeds."""

from pathlib import Path

from app.commands.common import load_split, write_resolved_config
from app.services.benchmark_service import BenchmarkService
from app.services.net_service import NetService
from app.services.train_service import load_run

NAME = "bench"
HELP = "benchmark inference modes (Dice, MACs, wall-clock)"


def add_arguments(parser):
    parser.add_argument("--output", help="CSV path (bench.output_csv)")


def overrides(args):
    return [f"bench.output_csv='{args.output}'"] if args.output else []


def run(args, settings, workdir: Path) -> int:
    bundle = load_run(NetService(settings.net, settings.synth.num_classes), Path(workdir) / settings.train.run_dir)
    samples = load_split(settings, workdir, "val")
    service = BenchmarkService(bundle, settings.bench, settings.infer)
    frame = service.run(samples)
    path = service.write(frame, Path(workdir) / settings.bench.output_csv)
    write_resolved_config(settings, path.parent)
    print(frame.to_string(index=False))
    print(f"benchmark: {path}")
    return 0
