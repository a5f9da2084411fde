"""
64^3 patch extraction with standardize-then-rescale normalization, and
sliding-window reassembly of per-patch foreground probabilities into a
whole-volume mask.
"""
from __future__ import annotations

import itertools
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage

import utils
from modules import stats
from modules.volume_core import (
    BinaryMask,
    LandmarkSet,
    Volume,
    nearest_voxel,
    read_nifti,
    require_same_grid,
    voxel_to_phys,
    write_nifti,
)
from utils import GeometryError, PredictorError, ShapeMismatchError

logger = logging.getLogger(__name__)

PATCH_SIZE = utils.PATCH_SIZE
HALF = PATCH_SIZE // 2
STD_FLOOR = 1e-8
TILE_PATTERN = re.compile(r"^tile_(-?\d+)_(-?\d+)_(-?\d+)\.nii(\.gz)?$")


# -----------------------------
# Data model
# -----------------------------
@dataclass(frozen=True)
class NormalizationRecord:
    mean: float
    std: float
    min: float
    max: float
    degenerate: bool


@dataclass(frozen=True, eq=False)
class Patch:
    data: np.ndarray  # (64, 64, 64) float32 in [0, 1]
    origin: Tuple[int, int, int]  # source voxel index of data[0, 0, 0]; may be negative
    spacing: Tuple[float, float, float]
    normalization: NormalizationRecord
    valid_lo: Tuple[int, int, int]  # in-bounds block [valid_lo, valid_hi) in patch coordinates
    valid_hi: Tuple[int, int, int]

    @property
    def valid(self) -> Tuple[slice, slice, slice]:
        return tuple(slice(lo, hi) for lo, hi in zip(self.valid_lo, self.valid_hi))

    @property
    def padded_voxels(self) -> int:
        inside = int(np.prod([hi - lo for lo, hi in zip(self.valid_lo, self.valid_hi)]))
        return PATCH_SIZE ** 3 - inside

    @property
    def center(self) -> Tuple[int, int, int]:
        return tuple(o + HALF for o in self.origin)


class Predictor(Protocol):
    """Maps a normalized patch to a same-shape foreground probability array in [0, 1].

    Implementations must be pure: the same patch always yields the same output.
    """

    def __call__(self, patch: Patch) -> np.ndarray: ...


# -----------------------------
# Extraction
# -----------------------------
def _normalize(block: np.ndarray) -> Tuple[np.ndarray, NormalizationRecord]:
    values = block.astype(np.float64)
    mean = float(values.mean())
    std = float(values.std())
    if std < STD_FLOOR:
        return np.zeros_like(values), NormalizationRecord(mean, std, 0.0, 0.0, True)
    z = (values - mean) / std
    lo, hi = float(z.min()), float(z.max())
    if hi <= lo:
        return np.zeros_like(values), NormalizationRecord(mean, std, lo, hi, True)
    return (z - lo) / (hi - lo), NormalizationRecord(mean, std, lo, hi, False)


def patch_at(v: Volume, origin: Sequence[int]) -> Patch:
    """Normalized patch whose first voxel sits at `origin`; out-of-volume voxels are zero."""
    origin = np.asarray(origin, dtype=int)
    dims = np.asarray(v.dims)
    lo = np.clip(origin, 0, dims)
    hi = np.clip(origin + PATCH_SIZE, 0, dims)
    if np.any(hi <= lo):
        raise GeometryError(f"Patch at origin {tuple(origin)} does not overlap the volume.")
    block = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    normalized, record = _normalize(block)
    if record.degenerate:
        logger.debug("Patch at %s has degenerate intensity statistics", tuple(origin))

    out = np.zeros((PATCH_SIZE,) * 3, dtype=np.float32)
    valid_lo = tuple(int(c) for c in lo - origin)
    valid_hi = tuple(int(c) for c in hi - origin)
    out[tuple(slice(a, b) for a, b in zip(valid_lo, valid_hi))] = normalized
    return Patch(out, tuple(int(c) for c in origin), v.spacing, record, valid_lo, valid_hi)


def extract_patch(v: Volume, center: Sequence[int]) -> Patch:
    """Crops [center - 32, center + 32) per axis, zero-pads, then normalizes the in-bounds voxels."""
    center = tuple(int(c) for c in center)
    if not all(0 <= c < d for c, d in zip(center, v.dims)):
        raise GeometryError(f"Patch centre {center} lies outside volume of dims {v.dims}.")
    return patch_at(v, np.asarray(center) - HALF)


def sample_patches(v: Volume, landmarks: LandmarkSet) -> List[Tuple[str, Patch]]:
    """One patch centred on each landmark that falls inside the volume."""
    out = []
    for lm in landmarks:
        idx, inside = nearest_voxel(v, lm.point)
        if not inside:
            logger.warning("Landmark '%s' lies outside the volume; no patch sampled", lm.name)
            continue
        out.append((lm.name, extract_patch(v, idx)))
    return out


def patch_volume(v: Volume, patch: Patch, data: Optional[np.ndarray] = None) -> Volume:
    """The patch (or same-shape data) as a Volume placed at its source position."""
    affine = v.affine.copy()
    affine[:3, 3] = voxel_to_phys(v, patch.origin)
    return Volume.from_array(patch.data if data is None else data, affine=affine)


# -----------------------------
# Tiling
# -----------------------------
def _axis_starts(dim: int, stride: int) -> List[int]:
    if dim <= PATCH_SIZE:
        return [0]
    starts = list(range(0, dim - PATCH_SIZE + 1, stride))
    if starts[-1] != dim - PATCH_SIZE:
        starts.append(dim - PATCH_SIZE)
    return starts


def tile_origins(dims: Sequence[int], stride: int = utils.STRIDE) -> List[Tuple[int, int, int]]:
    """Patch origins on a regular grid with the given stride; the last tile per axis is
    shifted back so tiles end at the volume border."""
    if not 1 <= stride <= PATCH_SIZE:
        raise utils.ConfigError(f"Stride must lie in [1, {PATCH_SIZE}], got {stride}.")
    return list(itertools.product(*(_axis_starts(int(d), stride) for d in dims)))


def gaussian_importance(sigma_scale: float = 1.0 / 8) -> np.ndarray:
    """Patch weight map peaking at the centre, as used to down-weight tile borders."""
    impulse = np.zeros((PATCH_SIZE,) * 3, dtype=np.float64)
    impulse[(HALF,) * 3] = 1.0
    weights = ndimage.gaussian_filter(impulse, sigma=PATCH_SIZE * sigma_scale, mode="constant", cval=0)
    weights /= weights.max()
    weights[weights == 0] = weights[weights > 0].min()
    return weights


def tile_name(origin: Sequence[int]) -> str:
    x, y, z = (int(c) for c in origin)
    return f"tile_{x}_{y}_{z}.nii.gz"


def _check_prediction(prob: np.ndarray, origin: Tuple[int, int, int]) -> np.ndarray:
    prob = np.asarray(prob)
    if prob.shape != (PATCH_SIZE,) * 3:
        raise PredictorError(f"Predictor returned shape {prob.shape} for tile {origin}; expected {(PATCH_SIZE,) * 3}.")
    prob = prob.astype(np.float64)
    if not np.all(np.isfinite(prob)) or prob.min() < 0.0 or prob.max() > 1.0:
        raise PredictorError(
            f"Predictor returned values outside [0, 1] for tile {origin} "
            f"(min {np.nanmin(prob):.4g}, max {np.nanmax(prob):.4g})."
        )
    return prob


def stitch(
    v: Volume,
    predictor: Predictor,
    stride: int = utils.STRIDE,
    threshold: float = utils.THRESHOLD,
    gaussian: bool = False,
    threads: int = 1,
) -> BinaryMask:
    """Sliding-window reassembly: average overlapping tile probabilities, then threshold (>=).

    Padding voxels never contribute. Predictions may run in a thread pool; the
    accumulation is serial in tile order, so the result does not depend on threads.
    """
    if not 0.0 < threshold < 1.0:
        raise utils.ConfigError(f"Threshold must lie in (0, 1), got {threshold}.")
    origins = tile_origins(v.dims, stride)
    weights = gaussian_importance() if gaussian else np.ones((PATCH_SIZE,) * 3, dtype=np.float64)
    acc = np.zeros(v.dims, dtype=np.float64)
    hits = np.zeros(v.dims, dtype=np.float64)

    def predict(origin: Tuple[int, int, int]) -> Tuple[Patch, np.ndarray]:
        patch = patch_at(v, origin)
        return patch, _check_prediction(predictor(patch), origin)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(predict, origins)
            for patch, prob in results:
                _accumulate(acc, hits, patch, prob, weights)
    else:
        for origin in origins:
            patch, prob = predict(origin)
            _accumulate(acc, hits, patch, prob, weights)

    logger.info("Stitched %d tiles (stride %d) over dims %s", len(origins), stride, v.dims)
    mean = np.divide(acc, hits, out=np.zeros_like(acc), where=hits > 0)
    return BinaryMask.from_bool(mean >= threshold, like=v)


def _accumulate(acc: np.ndarray, hits: np.ndarray, patch: Patch, prob: np.ndarray, weights: np.ndarray) -> None:
    target = tuple(slice(o + lo, o + hi) for o, lo, hi in zip(patch.origin, patch.valid_lo, patch.valid_hi))
    w = weights[patch.valid]
    acc[target] += prob[patch.valid] * w
    hits[target] += w


# -----------------------------
# Predictors
# -----------------------------
class ThresholdPredictor:
    """Reference predictor: normalized intensity at or above `level` is foreground."""

    def __init__(self, level: float = 0.5):
        self.level = float(level)

    def __call__(self, patch: Patch) -> np.ndarray:
        return (patch.data >= self.level).astype(np.float32) * _valid_mask(patch)


class ConstantPredictor:
    def __init__(self, value: float):
        self.value = float(value)

    def __call__(self, patch: Patch) -> np.ndarray:
        return np.full((PATCH_SIZE,) * 3, self.value, dtype=np.float32)


class OraclePredictor:
    """Returns a known mask restricted to the patch; reassembly must reproduce the mask."""

    def __init__(self, mask: BinaryMask):
        self.mask = mask

    def __call__(self, patch: Patch) -> np.ndarray:
        out = np.zeros((PATCH_SIZE,) * 3, dtype=np.float32)
        src = tuple(slice(o + lo, o + hi) for o, lo, hi in zip(patch.origin, patch.valid_lo, patch.valid_hi))
        out[patch.valid] = self.mask.data[src]
        return out


class TileDirectoryPredictor:
    """Reads precomputed probabilities from `tile_<x>_<y>_<z>.nii.gz` files keyed by patch origin."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise PredictorError(f"Tile directory not found: {self.directory}")
        self.files: Dict[Tuple[int, int, int], Path] = {}
        for path in sorted(self.directory.iterdir()):
            match = TILE_PATTERN.match(path.name)
            if match:
                self.files[tuple(int(g) for g in match.groups()[:3])] = path

    def __call__(self, patch: Patch) -> np.ndarray:
        path = self.files.get(patch.origin)
        if path is None:
            raise PredictorError(f"No probability tile for origin {patch.origin} in {self.directory}")
        return np.asarray(read_nifti(path).data, dtype=np.float32)


def _valid_mask(patch: Patch) -> np.ndarray:
    valid = np.zeros((PATCH_SIZE,) * 3, dtype=np.float32)
    valid[patch.valid] = 1.0
    return valid


def write_tiles(
    v: Volume, out_dir: str | Path, stride: int = utils.STRIDE, config: Optional[utils.RunConfig] = None
) -> List[Dict[str, object]]:
    """Writes every tiling patch as `tile_<x>_<y>_<z>.nii.gz` plus returns their normalization records.

    An external network can write probabilities under the same names for
    TileDirectoryPredictor to read back.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for origin in tile_origins(v.dims, stride):
        patch = patch_at(v, origin)
        write_nifti(patch_volume(v, patch), out_dir / tile_name(origin), config)
        records.append({"file": tile_name(origin), "origin": list(origin),
                        "padded_voxels": patch.padded_voxels, **asdict(patch.normalization)})
    logger.info("Wrote %d tiles to %s", len(records), out_dir)
    return records


# -----------------------------
# Inter-rater agreement
# -----------------------------
@dataclass(frozen=True)
class RaterAgreement:
    rater_a: str
    rater_b: str
    dsc: Tuple[float, ...]
    mean: float
    sd: float

    @property
    def formatted(self) -> str:
        return format_agreement(self.mean, self.sd)

    def to_dict(self) -> Dict[str, object]:
        return {"raters": f"{self.rater_a}&{self.rater_b}", "n": len(self.dsc), "mean": self.mean,
                "sd": self.sd, "formatted": self.formatted, "dsc": list(self.dsc)}


def format_agreement(mean: float, sd: float) -> str:
    return f"{mean:.2f} ± {sd:.2f} %"


def interrater_dsc(masks: Mapping[str, Sequence[BinaryMask]]) -> List[RaterAgreement]:
    """Pairwise Dice between raters over shared patches: mean ± sample sd in percent."""
    raters = list(masks)
    if len(raters) < 2:
        raise utils.ConfigError("Inter-rater agreement needs at least two raters.")
    counts = {name: len(masks[name]) for name in raters}
    if len(set(counts.values())) != 1:
        raise ShapeMismatchError(f"Raters labelled different numbers of patches: {counts}")

    out = []
    for a, b in itertools.combinations(raters, 2):
        scores = []
        for ma, mb in zip(masks[a], masks[b]):
            require_same_grid(ma, mb, check_spacing=False)
            scores.append(stats.dice(ma, mb))
        mean, sd = stats.summarize(scores)
        out.append(RaterAgreement(a, b, tuple(scores), mean, sd))
        logger.info("Raters %s&%s: %s", a, b, format_agreement(mean, sd))
    return out
