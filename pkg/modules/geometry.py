"""
Exact Euclidean distance transform, feature transform and centres-of-maximal-balls
skeletonization with inscribed-ball radii.

Distances run from a foreground voxel centre to the nearest background voxel
centre in physical mm (no half-voxel surface correction). Voxels outside the
image are not background.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Iterable, Optional, Tuple

import numpy as np
from scipy import ndimage

from modules.volume_core import BinaryMask, Volume, linear_index
from utils import GeometryError

logger = logging.getLogger(__name__)

# Ball-containment comparisons are made with this slack; distances are stored as float32.
CMB_TOLERANCE_MM = 1e-5

NEIGHBOR_OFFSETS = tuple(
    o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)
)


@dataclass(frozen=True, eq=False)
class DistanceMap:
    volume: Volume

    @property
    def values(self) -> np.ndarray:
        return self.volume.data

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.volume.dims

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return self.volume.spacing


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Per-voxel index of one nearest background voxel, shape (3, X, Y, Z)."""

    indices: np.ndarray

    def feature_of(self, ijk: Tuple[int, int, int]) -> Tuple[int, int, int]:
        return tuple(int(self.indices[(a,) + tuple(ijk)]) for a in range(3))


@dataclass(frozen=True, eq=False)
class Skeleton:
    voxels: np.ndarray  # (N, 3) int, sorted by x-fastest linear index
    radii: np.ndarray  # (N,) mm
    dims: Tuple[int, int, int]
    affine: np.ndarray

    def __len__(self) -> int:
        return int(self.radii.shape[0])

    @property
    def linear(self) -> np.ndarray:
        return linear_index(self.dims, self.voxels)

    def as_volume(self) -> Volume:
        """Radius map: skeleton voxels carry their radius, everything else 0."""
        data = np.zeros(self.dims, dtype=np.float32)
        if len(self):
            data[tuple(self.voxels.T)] = self.radii
        return Volume(data, self.affine)


def distance_transform(m: BinaryMask) -> Tuple[DistanceMap, FeatureMap]:
    """Exact EDT in mm (anisotropic spacing aware) plus the feature transform."""
    fg = m.foreground
    if fg.all():
        raise GeometryError("Distance transform is undefined for an all-foreground mask.")
    if not fg.any():
        indices = np.indices(m.dims, dtype=np.int64)
        return DistanceMap(Volume(np.zeros(m.dims, dtype=np.float32), m.affine)), FeatureMap(indices)

    dist, indices = ndimage.distance_transform_edt(
        fg, sampling=m.spacing, return_distances=True, return_indices=True
    )
    logger.debug("EDT over %s voxels, max distance %.3f mm", fg.size, float(dist.max()))
    return DistanceMap(Volume(dist.astype(np.float32), m.affine)), FeatureMap(indices.astype(np.int64))


def _shifted(padded: np.ndarray, offset: Tuple[int, int, int], dims: Tuple[int, int, int]) -> np.ndarray:
    """Value at v + offset for every v, from an array padded by one voxel."""
    return padded[tuple(slice(1 + o, 1 + o + d) for o, d in zip(offset, dims))]


def removal_mask(m: BinaryMask, dm: DistanceMap) -> np.ndarray:
    """True where some 26-neighbour foreground ball contains this voxel's ball:
    r(u) >= r(v) + |u - v| in physical mm."""
    fg = m.foreground
    r = dm.values.astype(np.float64)
    step_matrix = m.affine[:3, :3]
    padded_r = np.pad(r, 1, mode="constant", constant_values=-np.inf)
    padded_fg = np.pad(fg, 1, mode="constant", constant_values=False)
    removed = np.zeros(m.dims, dtype=bool)
    for offset in NEIGHBOR_OFFSETS:
        step = float(np.linalg.norm(step_matrix @ np.asarray(offset, dtype=np.float64)))
        neighbor_r = _shifted(padded_r, offset, m.dims)
        neighbor_fg = _shifted(padded_fg, offset, m.dims)
        removed |= neighbor_fg & (neighbor_r + CMB_TOLERANCE_MM >= r + step)
    return removed


def skeletonize(m: BinaryMask, dm: DistanceMap, region: Optional[np.ndarray] = None) -> Skeleton:
    """Centres of maximal balls: foreground voxels whose ball no neighbour's ball contains.

    The rule is local, so the result does not depend on traversal order.
    With `region`, only voxels inside it are candidates (neighbours still count
    everywhere in the mask).
    """
    if dm.dims != m.dims:
        raise GeometryError(f"Distance map dims {dm.dims} do not match mask dims {m.dims}.")
    candidates = m.foreground
    if region is not None:
        candidates = candidates & np.asarray(region, dtype=bool)
    if not candidates.any():
        return Skeleton(np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=np.float64), m.dims, m.affine)

    keep = candidates & ~removal_mask(m, dm)
    voxels = np.argwhere(keep).astype(np.int64)
    order = np.argsort(linear_index(m.dims, voxels), kind="stable")
    voxels = voxels[order]
    radii = dm.values[tuple(voxels.T)].astype(np.float64)
    logger.debug("Skeleton keeps %d of %d candidate voxels", len(voxels), int(candidates.sum()))
    return Skeleton(voxels, radii, m.dims, m.affine)


def _region_mask(region: np.ndarray | Iterable[Tuple[int, int, int]], dims: Tuple[int, int, int]) -> np.ndarray:
    arr = np.asarray(region) if not isinstance(region, (set, frozenset)) else None
    if arr is not None and arr.shape == dims:
        return arr.astype(bool)
    mask = np.zeros(dims, dtype=bool)
    idx = np.asarray(list(region), dtype=np.int64).reshape(-1, 3)
    if len(idx):
        mask[tuple(idx.T)] = True
    return mask


def max_inscribed_sphere(
    sk: Skeleton, region: np.ndarray | Iterable[Tuple[int, int, int]]
) -> Tuple[Tuple[int, int, int], float]:
    """Skeleton voxel in region with the largest radius; ties go to the smallest linear index."""
    mask = _region_mask(region, sk.dims)
    if not mask.any():
        raise GeometryError("Region is empty.")
    if not len(sk):
        raise GeometryError("No skeleton voxel inside the region.")
    inside = mask[tuple(sk.voxels.T)]
    if not inside.any():
        raise GeometryError("No skeleton voxel inside the region.")
    radii = np.where(inside, sk.radii, -np.inf)
    best = int(np.argmax(radii))
    return tuple(int(c) for c in sk.voxels[best]), float(sk.radii[best])
