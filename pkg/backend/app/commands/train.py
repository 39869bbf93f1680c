"""`train`: joint training plus the sliding-window baseline."""

from pathlib import Path

from app.commands.common import load_split, write_resolved_config
from app.services.synth_service import SynthService
from app.services.train_service import TrainService

NAME = "train"
HELP = "train the global and local networks"


def add_arguments(parser):
    parser.add_argument("--seed", type=int, help="training seed (train.seed)")
    parser.add_argument("--epochs", type=int, help="number of epochs (train.epochs)")


def overrides(args):
    extra = []
    if args.seed is not None:
        extra.append(f"train.seed={args.seed}")
    if args.epochs is not None:
        extra.append(f"train.epochs={args.epochs}")
    return extra


def run(args, settings, workdir: Path) -> int:
    train_set = load_split(settings, workdir, "train", fallback=None)
    val_set = SynthService(settings.synth, workdir).load_dataset("val")
    service = TrainService(settings, workdir)
    summary = service.run(train_set, val_set)
    write_resolved_config(settings, service.run_dir)
    print(f"checkpoint: {summary['checkpoint']}")
    print(f"final loss: {summary['final_loss']:.4f}")
    print("sigma(c_w): " + " ".join(f"{s:.4f}" for s in summary["class_weight_sigma"]))
    return 0
