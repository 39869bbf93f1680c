"""`infer`: predict one sample and dump label map plus mid-slice PGM."""

from pathlib import Path

from app.commands.common import load_split, write_resolved_config
from app.core.exceptions import ConfigError
from app.ops.metrics import dsc
from app.services.inference_service import InferenceService
from app.services.net_service import NetService
from app.services.train_service import load_run

NAME = "infer"
HELP = "run inference on one dataset sample"


def add_arguments(parser):
    parser.add_argument("--mode", choices=["sw", "topk", "rf", "global"], help="infer.mode")
    parser.add_argument("--k", help="patch count or 'full' (infer.k)")
    parser.add_argument("--sample-id", help="dataset sample id (infer.sample_id)")
    parser.add_argument("--seed", type=int, help="selection seed for rf (infer.seed)")


def _k_override(raw: str) -> str:
    if raw == "full":
        return "infer.k='full'"
    try:
        return f"infer.k={int(raw)}"
    except ValueError:
        raise ConfigError("infer.k", f"expected an integer or 'full', got '{raw}'") from None


def overrides(args):
    extra = []
    if args.mode is not None:
        extra.append(f"infer.mode='{args.mode}'")
    if args.k is not None:
        extra.append(_k_override(args.k))
    if args.sample_id is not None:
        extra.append(f"infer.sample_id='{args.sample_id}'")
    if args.seed is not None:
        extra.append(f"infer.seed={args.seed}")
    return extra


def run(args, settings, workdir: Path) -> int:
    cfg = settings.infer
    bundle = load_run(NetService(settings.net, settings.synth.num_classes), Path(workdir) / settings.train.run_dir)
    samples = load_split(settings, workdir, "val")
    if cfg.sample_id is not None:
        samples = [s for s in samples if s[0] == cfg.sample_id] or [
            s for s in load_split(settings, workdir, "train") if s[0] == cfg.sample_id
        ]
        if not samples:
            raise FileNotFoundError(f"sample '{cfg.sample_id}' not in the dataset")
    sample_id, volume, labels = samples[0]

    service = InferenceService(bundle, cfg)
    result = service.infer(volume, cfg.mode, k=cfg.k, seed=cfg.seed, class_weight=cfg.class_weight)
    output_dir = Path(workdir) / cfg.output_dir
    written = service.write_outputs(output_dir, result, volume, labels, cfg.write_pgm)
    write_resolved_config(settings, output_dir)

    report = dsc(result.labels(), labels, bundle.local_net.cfg.num_classes)
    print(f"{sample_id} mode={result.mode} k={result.k} patches={result.patch_count}")
    print("dsc per class: " + " ".join(f"{d:.4f}" for d in report.per_class))
    print(f"mean dsc: {report.mean:.4f}")
    for kind, path in written.items():
        print(f"{kind}: {path}")
    return 0
