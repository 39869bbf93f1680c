"""`gradcheck`: finite-difference suite over every differentiable stage."""

from pathlib import Path

from app.core.exceptions import NumericError
from app.services.gradcheck_service import CHECKS, GradcheckService

NAME = "gradcheck"
HELP = "compare backward gradients with finite differences"


def add_arguments(parser):
    parser.add_argument("--check", action="append", choices=sorted(CHECKS), help="run only these checks")
    parser.add_argument("--seeds", type=int, default=5, help="seeds per check")


def overrides(args):
    return []


def run(args, settings, workdir: Path) -> int:
    service = GradcheckService(seeds=range(args.seeds))
    frame = service.run(args.check or ())
    for row in frame.itertuples():
        print(f"{row.check:40s} {row.max_rel_error:.3e} {'ok' if row.passed else 'FAIL'}")
    if not frame["passed"].all():
        path = Path(workdir) / settings.train.run_dir / "gradcheck.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        frame.to_csv(path, index=False)
        raise NumericError("gradient check failed", str(path))
    return 0
