"""`sampledist`: per-epoch patch distribution π as CSV (and a PGM strip)."""

from pathlib import Path

from app.services.report_service import ReportService

NAME = "sampledist"
HELP = "export the patch distribution recorded during training"


def add_arguments(parser):
    parser.add_argument("--no-pgm", action="store_true", help="skip the PGM strip")


def overrides(args):
    return []


def run(args, settings, workdir: Path) -> int:
    run_dir = Path(workdir) / settings.train.run_dir
    service = ReportService(run_dir)
    written = service.write_sampledist(run_dir, write_pgm=not args.no_pgm)
    frame = service.sampledist_frame(service.load_history())
    print(frame[["epoch", "entropy", "fg_mass"]].to_string(index=False))
    for kind, path in written.items():
        print(f"{kind}: {path}")
    return 0
