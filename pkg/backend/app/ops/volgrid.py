"""
Volume containers, patch grids, resampling and the sidecar file format.

Shapes are (H, W, D) for volumes and label maps and (C, H, W, D) for
probability maps. Patch origins are voxel-aligned integer triples enumerated
in row-major (h, w, d) order.
"""

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Sequence, Tuple, Union

import numpy as np

from app.ops import autodiff as ad

Shape3 = Tuple[int, int, int]
GridMode = Literal["floor", "cover"]


def _as_triple(value, name: str) -> Tuple:
    if np.isscalar(value):
        return (value, value, value)
    value = tuple(value)
    if len(value) != 3:
        raise ValueError(f"{name} must be a scalar or a triple, got {value}")
    return value


@dataclass
class Volume:
    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.spacing = tuple(float(s) for s in _as_triple(self.spacing, "spacing"))
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume must be a non-empty 3-D grid, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


@dataclass
class LabelMap:
    data: np.ndarray
    num_classes: int
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("a label map needs at least two classes")
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"label map must be 3-D, got {data.shape}")
        if data.size and (data.min() < 0 or data.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        self.data = data.astype(np.uint8 if self.num_classes <= 256 else np.int32)
        self.spacing = tuple(float(s) for s in _as_triple(self.spacing, "spacing"))

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape)


@dataclass
class ProbMap:
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"probability map must be [C,H,W,D], got {self.data.shape}")

    @property
    def num_classes(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Shape3:
        return tuple(self.data.shape[1:])

    def argmax(self, num_classes: int = None) -> LabelMap:
        return LabelMap(np.argmax(self.data, axis=0), num_classes or self.num_classes)


@dataclass(frozen=True)
class GridSpec:
    volume_shape: Shape3
    patch_shape: Shape3
    overlap: Tuple[float, float, float]
    mode: str
    stride: Shape3
    counts: Shape3
    origins: List[Shape3] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.origins)

    def index_of(self, origin: Sequence[int]) -> int:
        return self.origins.index(tuple(origin))


@dataclass
class GaussianWeightMap:
    data: np.ndarray
    sigma_frac: float = 0.125


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------


def _axis_origins(size: int, patch: int, stride: int, mode: str) -> List[int]:
    if mode == "floor":
        count = (size - patch) // stride + 1
        return [i * stride for i in range(count)]
    if mode == "cover":
        count = math.ceil((size - patch) / stride) + 1
        return [min(i * stride, size - patch) for i in range(count)]
    raise ValueError(f"unknown grid mode '{mode}'")


def build_grid(
    volume_shape: Sequence[int],
    patch_shape: Sequence[int],
    overlap: Union[float, Sequence[float]] = 0.5,
    mode: GridMode = "floor",
) -> GridSpec:
    """
    Enumerate patch origins over a volume.

    ``floor`` keeps only patches that start on the stride lattice
    (N_d = ⌊(D−P_d)/(P_d·o_d)⌋ + 1); ``cover`` adds one clamped patch per axis
    so the union covers every voxel.
    """
    volume_shape = tuple(int(v) for v in volume_shape)
    patch_shape = tuple(int(p) for p in _as_triple(patch_shape, "patch_shape"))
    overlap = tuple(float(o) for o in _as_triple(overlap, "overlap"))
    if any(p > v for p, v in zip(patch_shape, volume_shape)):
        raise ValueError(f"patch exceeds volume: {patch_shape} > {volume_shape}")
    if min(patch_shape) < 1:
        raise ValueError(f"patch shape must be positive, got {patch_shape}")
    if any(not 0.0 < o < 1.0 for o in overlap):
        raise ValueError(f"overlap must lie in (0, 1), got {overlap}")

    # half-up: a stride of exactly x.5 rounds to x+1
    stride = tuple(max(1, int(np.floor(p * o + 0.5))) for p, o in zip(patch_shape, overlap))
    axes = [
        _axis_origins(v, p, s, mode)
        for v, p, s in zip(volume_shape, patch_shape, stride)
    ]
    origins = [tuple(o) for o in itertools.product(*axes)]
    return GridSpec(
        volume_shape=volume_shape,
        patch_shape=patch_shape,
        overlap=overlap,
        mode=mode,
        stride=stride,
        counts=tuple(len(a) for a in axes),
        origins=origins,
    )


def gaussian_weight_map(patch_shape: Sequence[int], sigma_frac: float = 0.125) -> GaussianWeightMap:
    """Separable Gaussian centred on the patch, σ = sigma_frac·P per axis, max 1."""
    if sigma_frac <= 0:
        raise ValueError(f"sigma_frac must be positive, got {sigma_frac}")
    patch_shape = tuple(int(p) for p in _as_triple(patch_shape, "patch_shape"))
    profiles = []
    for size in patch_shape:
        coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
        sigma = sigma_frac * size
        profiles.append(np.exp(-(coords**2) / (2.0 * sigma**2)))
    weights = np.einsum("i,j,k->ijk", *profiles)
    weights /= weights.max()
    return GaussianWeightMap(weights.astype(np.float32), sigma_frac)


def _check_region(shape: Sequence[int], origin: Sequence[int], patch_shape: Sequence[int]):
    if len(origin) != 3 or any(o < 0 for o in origin) or any(
        o + p > s for o, p, s in zip(origin, patch_shape, shape)
    ):
        raise ValueError(f"patch at {tuple(origin)} of size {tuple(patch_shape)} is out of bounds for {tuple(shape)}")


def _raw(array_like) -> np.ndarray:
    return array_like.data if isinstance(array_like, (Volume, LabelMap, ProbMap)) else np.asarray(array_like)


def extract_patch(source, origin: Sequence[int], patch_shape: Sequence[int]) -> np.ndarray:
    """Copy the sub-grid at ``origin``; leading (channel) axes are kept whole."""
    data = _raw(source)
    _check_region(data.shape[-3:], origin, patch_shape)
    lead = (slice(None),) * (data.ndim - 3)
    region = tuple(slice(o, o + p) for o, p in zip(origin, patch_shape))
    return data[lead + region].copy()


def scatter_patch(target: np.ndarray, patch: np.ndarray, origin: Sequence[int]) -> np.ndarray:
    """Write ``patch`` into ``target`` at ``origin`` (in place) and return ``target``."""
    _check_region(target.shape[-3:], origin, patch.shape[-3:])
    lead = (slice(None),) * (target.ndim - 3)
    region = tuple(slice(o, o + p) for o, p in zip(origin, patch.shape[-3:]))
    target[lead + region] = patch
    return target


def patch_stack(source, grid: GridSpec) -> np.ndarray:
    """All candidate patches of ``grid`` stacked on a leading patch-index axis."""
    return np.stack([extract_patch(source, o, grid.patch_shape) for o in grid.origins])


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Linear interpolation weights [n_out, n_in] with align-corners-false sampling."""
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(mat, (rows, lo), 1.0 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Average-pooling weights [n_out, n_in]; bin i spans ⌊i·n_in/n_out⌋ … ⌈(i+1)·n_in/n_out⌉."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        start = (i * n_in) // n_out
        stop = -((-(i + 1) * n_in) // n_out)
        mat[i, start:stop] = 1.0 / (stop - start)
    return mat


def low_res_shape(shape: Sequence[int], factors) -> Shape3:
    factors = _as_triple(factors, "factors")
    if any(f <= 0 for f in factors):
        raise ValueError(f"resample factors must be positive, got {factors}")
    return tuple(max(1, int(round(s / f))) for s, f in zip(shape, factors))


def _resize_values(values: np.ndarray, target_shape: Sequence[int]) -> np.ndarray:
    mats = [
        None if n_in == n_out else interp_matrix(n_in, n_out)
        for n_in, n_out in zip(values.shape[-3:], target_shape)
    ]
    return ad._apply_axis_matrices(values.astype(np.float64), mats)


def resample_trilinear(volume: Volume, factors) -> Volume:
    """Downsample by ``factors`` (≥ 1 per axis) with trilinear interpolation."""
    factors = _as_triple(factors, "factors")
    if any(f <= 0 for f in factors):
        raise ValueError(f"resample factors must be positive, got {factors}")
    if any(f < 1 for f in factors):
        raise ValueError(f"downsampling factors must be >= 1, got {factors}")
    target = low_res_shape(volume.shape, factors)
    data = _resize_values(volume.data, target).astype(np.float32)
    spacing = tuple(s * n_in / n_out for s, n_in, n_out in zip(volume.spacing, volume.shape, target))
    return Volume(data, spacing, volume.id)


def upsample_trilinear(probs: ProbMap, target_shape: Sequence[int]) -> ProbMap:
    """Upsample a probability map and re-normalise every voxel to sum to one."""
    target_shape = tuple(int(t) for t in target_shape)
    if any(t < s for t, s in zip(target_shape, probs.shape)):
        raise ValueError(f"target shape {target_shape} is smaller than {probs.shape}")
    data = _resize_values(probs.data, target_shape)
    data /= data.sum(axis=0, keepdims=True)
    return ProbMap(data.astype(np.float32))


def resize(x: ad.DTensor, target_shape: Sequence[int]) -> ad.DTensor:
    """Differentiable trilinear resize of the trailing three axes."""
    mats = [
        None if n_in == n_out else interp_matrix(n_in, n_out)
        for n_in, n_out in zip(x.shape[-3:], target_shape)
    ]
    return ad.separable(x, mats)


def upsample_probs(probs: ad.DTensor, target_shape: Sequence[int]) -> ad.DTensor:
    """Differentiable counterpart of ``upsample_trilinear`` for [C,H,W,D] tensors."""
    up = resize(probs, target_shape)
    total = ad.broadcast_to(ad.sum(up, axes=0), up.shape)
    return ad.div(up, total)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------


def one_hot(labels: LabelMap, num_classes: int = None) -> ProbMap:
    num_classes = num_classes or labels.num_classes
    if labels.data.size and labels.data.max() >= num_classes:
        raise ValueError(f"label {int(labels.data.max())} >= num_classes {num_classes}")
    eye = np.eye(num_classes, dtype=np.float32)
    return ProbMap(np.moveaxis(eye[labels.data.astype(np.int64)], -1, 0))


def _nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(np.floor(src + 0.5).astype(int), 0, n_in - 1)


def downsample_label_nearest(labels: LabelMap, factors) -> LabelMap:
    """Pick the label of the source voxel whose centre is nearest each output centre."""
    target = low_res_shape(labels.shape, factors)
    idx = [_nearest_indices(n_in, n_out) for n_in, n_out in zip(labels.shape, target)]
    data = labels.data[np.ix_(*idx)]
    return LabelMap(data, labels.num_classes, labels.spacing, labels.id)


# ---------------------------------------------------------------------------
# sidecar file format: <name>.json + <name>.raw (little-endian, row-major)
# ---------------------------------------------------------------------------


def write_volume(stem: Union[str, Path], item: Union[Volume, LabelMap]) -> Tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(item, LabelMap):
        dtype, payload, classes = "u8", item.data.astype("<u1"), item.num_classes
    else:
        dtype, payload, classes = "f32", item.data.astype("<f4"), None
    header = {"shape": list(item.shape), "dtype": dtype, "spacing": list(item.spacing)}
    if classes is not None:
        header["classes"] = classes
    json_path = stem.with_name(stem.name + ".json")
    raw_path = stem.with_name(stem.name + ".raw")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2, sort_keys=True)
    with open(raw_path, "wb") as f:
        f.write(np.ascontiguousarray(payload).tobytes())
    return json_path, raw_path


def read_volume(stem: Union[str, Path]) -> Union[Volume, LabelMap]:
    stem = Path(stem)
    json_path = stem.with_name(stem.name + ".json")
    raw_path = stem.with_name(stem.name + ".raw")
    if not json_path.exists() or not raw_path.exists():
        raise FileNotFoundError(f"volume files not found for {stem}")
    with open(json_path, "r", encoding="utf-8") as f:
        header = json.load(f)
    shape = tuple(header["shape"])
    if header["dtype"] == "u8":
        data = np.fromfile(raw_path, dtype="<u1").reshape(shape)
        return LabelMap(data, int(header["classes"]), tuple(header["spacing"]), stem.name)
    if header["dtype"] == "f32":
        data = np.fromfile(raw_path, dtype="<f4").reshape(shape)
        return Volume(data, tuple(header["spacing"]), stem.name)
    raise ValueError(f"unsupported dtype '{header['dtype']}' in {json_path}")
