import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.logger import get_logger_with_env_level
from app.ops import autodiff as ad
from app.ops.aggregate import ClassWeights, learnable_class_weights
from app.ops.sampler import make_rng
from app.ops.volgrid import (
    GaussianWeightMap,
    GridSpec,
    adaptive_pool_matrix,
    build_grid,
    gaussian_weight_map,
    low_res_shape,
    resize,
)

logger = get_logger_with_env_level(__name__)

MANIFEST_NAME = "manifest.json"
PAYLOAD_NAME = "weights.raw"

# RNG stream ids, one per network, so nets never share initial weights
NET_STREAMS = {"global": 1, "local": 2, "baseline_local": 3}


@dataclass
class NetConfig:
    channels: List[int]
    num_classes: int
    kernel_size: int = 3
    in_channels: int = 1
    # set for the global net: [N_h, N_w, N_d] of the floor candidate grid
    score_grid: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        if not self.channels or min(self.channels) < 1:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.channels = [int(c) for c in self.channels]
        if self.score_grid is not None:
            self.score_grid = tuple(int(n) for n in self.score_grid)

    @property
    def levels(self) -> int:
        return len(self.channels)


@dataclass
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int
    stride: int = 1


def layer_specs(cfg: NetConfig) -> List[ConvSpec]:
    """Conv layers in creation order: encoder, decoder, segmentation head, score head."""
    k, ch = cfg.kernel_size, cfg.channels
    specs = [ConvSpec("enc0", cfg.in_channels, ch[0], k)]
    for level in range(1, cfg.levels):
        specs.append(ConvSpec(f"down{level}", ch[level - 1], ch[level], k, stride=2))
    for level in range(cfg.levels - 1, 0, -1):
        specs.append(ConvSpec(f"dec{level}", ch[level] + ch[level - 1], ch[level - 1], k))
    specs.append(ConvSpec("head", ch[0], cfg.num_classes, 1))
    if cfg.score_grid is not None:
        specs.append(ConvSpec("score", ch[-1], 1, 1))
    return specs


def _conv_out(size: int, k: int, stride: int) -> int:
    pad = k // 2
    return (size + 2 * pad - k) // stride + 1


def conv_macs(out_shape: Sequence[int], cin: int, cout: int, k: int) -> int:
    return int(np.prod(out_shape)) * cout * cin * k**3


def count_macs(cfg: NetConfig, input_shape: Sequence[int]) -> int:
    """Σ over conv layers of out_voxels·Cout·Cin·k³ for one forward pass."""
    shapes = [tuple(int(s) for s in input_shape)]
    total = 0
    by_name = {s.name: s for s in layer_specs(cfg)}
    enc0 = by_name["enc0"]
    total += conv_macs(shapes[0], enc0.cin, enc0.cout, enc0.k)
    for level in range(1, cfg.levels):
        spec = by_name[f"down{level}"]
        shape = tuple(_conv_out(s, spec.k, spec.stride) for s in shapes[-1])
        total += conv_macs(shape, spec.cin, spec.cout, spec.k)
        shapes.append(shape)
    for level in range(cfg.levels - 1, 0, -1):
        spec = by_name[f"dec{level}"]
        total += conv_macs(shapes[level - 1], spec.cin, spec.cout, spec.k)
    head = by_name["head"]
    total += conv_macs(shapes[0], head.cin, head.cout, head.k)
    if "score" in by_name:
        score = by_name["score"]
        total += conv_macs(shapes[-1], score.cin, score.cout, score.k)
    return total


class SegNet:
    """Encoder/decoder conv net with an optional patch-score head on the deepest features."""

    def __init__(self, cfg: NetConfig, params: Dict[str, ad.DTensor], seed: int = 0):
        self.cfg = cfg
        self.params = params
        self.seed = seed

    @classmethod
    def init(cls, cfg: NetConfig, seed: int, stream: int = 0) -> "SegNet":
        rng = make_rng(seed, stream)
        params: Dict[str, ad.DTensor] = {}
        for spec in layer_specs(cfg):
            shape = (spec.cout, spec.cin, spec.k, spec.k, spec.k)
            if spec.name == "score":
                # zero head: uniform patch distribution at start
                weight = np.zeros(shape)
            else:
                bound = np.sqrt(6.0 / (spec.cin * spec.k**3))
                weight = rng.uniform(-bound, bound, size=shape)
            params[f"{spec.name}.weight"] = ad.DTensor(weight, requires_grad=True)
            params[f"{spec.name}.bias"] = ad.DTensor(np.zeros(spec.cout), requires_grad=True)
        return cls(cfg, params, seed)

    def parameters(self) -> List[ad.DTensor]:
        return [self.params[name] for name in sorted(self.params)]

    def _conv(self, name: str, x: ad.DTensor, stride: int = 1) -> ad.DTensor:
        weight = self.params[f"{name}.weight"]
        k = weight.shape[-1]
        return ad.conv3(x, weight, self.params[f"{name}.bias"], stride=stride, padding=k // 2)

    def forward(self, x: ad.DTensor) -> Tuple[ad.DTensor, ad.DTensor]:
        """Return (per-voxel class probabilities, deepest feature map)."""
        if x.ndim != 4 or x.shape[0] != self.cfg.in_channels:
            raise ValueError(f"expected input [{self.cfg.in_channels},H,W,D], got {x.shape}")
        skips = [ad.relu(self._conv("enc0", x))]
        for level in range(1, self.cfg.levels):
            skips.append(ad.relu(self._conv(f"down{level}", skips[-1], stride=2)))
        deepest = skips[-1]
        h = deepest
        for level in range(self.cfg.levels - 1, 0, -1):
            skip = skips[level - 1]
            up = resize(h, skip.shape[1:])
            h = ad.relu(self._conv(f"dec{level}", ad.concat([up, skip], axis=0)))
        logits = self._conv("head", h)
        return ad.softmax(logits, axis=0), deepest

    def score_logits(self, deepest: ad.DTensor) -> ad.DTensor:
        if self.cfg.score_grid is None:
            raise ValueError("this network has no score head")
        s = self._conv("score", deepest)
        mats = [adaptive_pool_matrix(n_in, n_out) for n_in, n_out in zip(s.shape[1:], self.cfg.score_grid)]
        pooled = ad.separable(s, mats)
        return ad.reshape(pooled, (int(np.prod(self.cfg.score_grid)),))


def _as_input(x, in_channels: int = 1) -> ad.DTensor:
    x = ad.as_tensor(x)
    if x.ndim == 3:
        x = ad.reshape(x, (in_channels,) + x.shape)
    return x


def forward_global(net: SegNet, x_low, n_candidates: Optional[int] = None) -> Tuple[ad.DTensor, ad.DTensor]:
    """Coarse class probabilities over the low-resolution grid and one score logit per candidate."""
    probs, deepest = net.forward(_as_input(x_low, net.cfg.in_channels))
    logits = net.score_logits(deepest)
    if n_candidates is not None and logits.shape[0] != n_candidates:
        raise ValueError(f"score head yields {logits.shape[0]} logits but the grid has {n_candidates} candidates")
    return probs, logits


def forward_local(net: SegNet, patch, patch_shape: Optional[Sequence[int]] = None) -> ad.DTensor:
    patch = _as_input(patch, net.cfg.in_channels)
    if patch_shape is not None and tuple(patch.shape[1:]) != tuple(patch_shape):
        raise ValueError(f"patch shape {patch.shape[1:]} != configured {tuple(patch_shape)}")
    probs, _ = net.forward(patch)
    return probs


@dataclass
class ModelBundle:
    """Everything a checkpoint holds."""

    global_net: SegNet
    local_net: SegNet
    class_weights: ClassWeights
    volume_shape: Tuple[int, int, int]
    low_shape: Tuple[int, int, int]
    seed: int
    baseline_local: Optional[SegNet] = None
    meta: Dict = field(default_factory=dict)

    def nets(self) -> Dict[str, SegNet]:
        nets = {"global": self.global_net, "local": self.local_net}
        if self.baseline_local is not None:
            nets["baseline_local"] = self.baseline_local
        return nets


class NetService:
    """Builds the global and local networks and reads/writes checkpoints."""

    def __init__(self, net_section, num_classes: int):
        self.logger = get_logger_with_env_level("NetService")
        self.net_section = net_section
        self.num_classes = num_classes

    def global_config(self, score_grid: Sequence[int]) -> NetConfig:
        return NetConfig(
            channels=list(self.net_section.global_channels),
            num_classes=self.num_classes,
            kernel_size=self.net_section.kernel_size,
            score_grid=tuple(score_grid),
        )

    def local_config(self) -> NetConfig:
        return NetConfig(
            channels=list(self.net_section.local_channels),
            num_classes=self.num_classes,
            kernel_size=self.net_section.kernel_size,
        )

    def build(
        self,
        volume_shape: Sequence[int],
        low_shape: Sequence[int],
        score_grid: Sequence[int],
        seed: int,
        with_baseline: bool = False,
    ) -> ModelBundle:
        global_net = SegNet.init(self.global_config(score_grid), seed, NET_STREAMS["global"])
        local_net = SegNet.init(self.local_config(), seed, NET_STREAMS["local"])
        baseline = (
            SegNet.init(self.local_config(), seed, NET_STREAMS["baseline_local"])
            if with_baseline
            else None
        )
        self.logger.debug(
            f"Built nets for volume {tuple(volume_shape)} (low {tuple(low_shape)}), "
            f"score grid {tuple(score_grid)}, seed {seed}"
        )
        return ModelBundle(
            global_net=global_net,
            local_net=local_net,
            class_weights=learnable_class_weights(self.num_classes),
            volume_shape=tuple(volume_shape),
            low_shape=tuple(low_shape),
            seed=seed,
            baseline_local=baseline,
        )

    def save_checkpoint(self, directory: Path, bundle: ModelBundle) -> Path:
        """Write a sorted-key JSON manifest plus one little-endian f32 payload."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        chunks: List[np.ndarray] = []
        offset = 0
        manifest = {
            "seed": bundle.seed,
            "volume_shape": list(bundle.volume_shape),
            "low_shape": list(bundle.low_shape),
            "meta": bundle.meta,
            "nets": {},
        }

        def add_tensor(values: np.ndarray) -> Dict:
            nonlocal offset
            flat = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
            entry = {"shape": list(values.shape), "offset": offset, "count": int(flat.size)}
            chunks.append(flat)
            offset += flat.size
            return entry

        for name, net in bundle.nets().items():
            config = asdict(net.cfg)
            manifest["nets"][name] = {
                "config": config,
                "seed": net.seed,
                "tensors": {pname: add_tensor(net.params[pname].values) for pname in sorted(net.params)},
            }
        manifest["class_weights"] = {
            "frozen": bundle.class_weights.frozen,
            "logits": add_tensor(bundle.class_weights.logits.values),
        }

        with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
        payload = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f4")
        with open(directory / PAYLOAD_NAME, "wb") as f:
            f.write(payload.astype("<f4").tobytes())
        self.logger.info(f"Saved checkpoint to {directory} ({offset} weights)")
        return directory

    def load_checkpoint(self, directory: Path) -> ModelBundle:
        directory = Path(directory)
        manifest_path = directory / MANIFEST_NAME
        payload_path = directory / PAYLOAD_NAME
        if not manifest_path.exists() or not payload_path.exists():
            raise FileNotFoundError(f"checkpoint not found in {directory}")
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
        payload = np.fromfile(payload_path, dtype="<f4")

        def take(entry: Dict) -> np.ndarray:
            start, count = entry["offset"], entry["count"]
            if start + count > payload.size:
                raise ValueError(f"checkpoint payload in {directory} is truncated")
            return payload[start : start + count].reshape(entry["shape"]).copy()

        nets = {}
        for name, spec in manifest["nets"].items():
            cfg = NetConfig(**spec["config"])
            params = {pname: ad.DTensor(take(entry), requires_grad=True) for pname, entry in spec["tensors"].items()}
            nets[name] = SegNet(cfg, params, spec["seed"])
        cw_spec = manifest["class_weights"]
        class_weights = ClassWeights(
            ad.DTensor(take(cw_spec["logits"]), requires_grad=not cw_spec["frozen"]),
            frozen=cw_spec["frozen"],
        )
        self.logger.debug(f"Loaded checkpoint from {directory}: nets {sorted(nets)}")
        return ModelBundle(
            global_net=nets["global"],
            local_net=nets["local"],
            class_weights=class_weights,
            volume_shape=tuple(manifest["volume_shape"]),
            low_shape=tuple(manifest["low_shape"]),
            seed=manifest["seed"],
            baseline_local=nets.get("baseline_local"),
            meta=manifest.get("meta", {}),
        )


@dataclass
class Geometry:
    """Grids shared by training and inference for one volume shape."""

    volume_shape: Tuple[int, int, int]
    low_shape: Tuple[int, int, int]
    downsample: Tuple[float, float, float]
    grid: GridSpec
    patch_weight: GaussianWeightMap

    @classmethod
    def build(cls, volume_shape, patch_shape, overlap, downsample) -> "Geometry":
        downsample = tuple(float(f) for f in (downsample if np.ndim(downsample) else [downsample] * 3))
        return cls(
            volume_shape=tuple(int(v) for v in volume_shape),
            low_shape=low_res_shape(volume_shape, downsample),
            downsample=downsample,
            grid=build_grid(volume_shape, patch_shape, overlap, mode="floor"),
            patch_weight=gaussian_weight_map(patch_shape),
        )

    @classmethod
    def from_section(cls, volume_shape, net_section) -> "Geometry":
        return cls.build(volume_shape, net_section.patch_shape, net_section.overlap, net_section.global_downsample)

    def to_meta(self) -> Dict:
        return {
            "patch_shape": list(self.grid.patch_shape),
            "overlap": list(self.grid.overlap),
            "downsample": list(self.downsample),
        }

    @classmethod
    def from_meta(cls, volume_shape, meta: Dict) -> "Geometry":
        return cls.build(volume_shape, meta["patch_shape"], meta["overlap"], meta["downsample"])
