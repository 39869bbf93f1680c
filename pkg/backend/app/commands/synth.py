"""`synth`: write a procedural dataset."""

from pathlib import Path

from app.commands.common import write_resolved_config
from app.services.synth_service import SynthService

NAME = "synth"
HELP = "generate a synthetic multi-class dataset"


def add_arguments(parser):
    parser.add_argument("--seed", type=int, help="dataset seed (synth.seed)")
    parser.add_argument("--force", action="store_true", help="replace an existing dataset")


def overrides(args):
    return [f"synth.seed={args.seed}"] if args.seed is not None else []


def run(args, settings, workdir: Path) -> int:
    service = SynthService(settings.synth, workdir)
    root = service.gen_dataset(force=args.force)
    write_resolved_config(settings, root)
    print(f"dataset written to {root}")
    return 0
