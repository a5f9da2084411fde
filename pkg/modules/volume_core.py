"""
Voxel-grid data model, physical/voxel coordinate mapping, binary-mask
operations and NIfTI-1 file I/O.

Physical coordinates are RAS millimetres. Arrays are indexed [i, j, k] with
i running along the first NIfTI axis; the linear voxel order used for every
tie-break is x-fastest (Fortran order), the order voxels sit in on disk.
"""
from __future__ import annotations

import gzip
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import nibabel as nib
import numpy as np
import pandas as pd
from nibabel.filebasedimages import ImageFileError
from nibabel.spatialimages import HeaderDataError
from scipy import ndimage

from utils import VERSION, GeometryError, NiftiError, RunConfig, ShapeMismatchError, VolumeError

logger = logging.getLogger(__name__)

# NIfTI-1 datatype codes accepted on read and produced on write.
DATATYPE_CODES: Dict[int, np.dtype] = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    16: np.dtype(np.float32),
}
SUPPORTED_DTYPES = tuple(DATATYPE_CODES.values())
DTYPE_TAGS = {np.dtype(np.uint8): "uint8", np.dtype(np.int16): "int16", np.dtype(np.float32): "float32"}

CATALOG_FILE = Path(__file__).resolve().parent.parent / "landmarks.json"

_CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}


# -----------------------------
# Data model
# -----------------------------
@dataclass(frozen=True, eq=False)
class Volume:
    """A 3D scalar grid with an affine mapping voxel indices to physical mm.

    Immutable: the voxel array is copied and flagged read-only on construction.
    Spacing is derived from the affine's column norms, so the two never disagree.
    """

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        affine = np.array(self.affine, dtype=np.float64, copy=True)
        if data.ndim != 3 or min(data.shape) < 1:
            raise VolumeError(f"Volume data must be a non-empty 3D array, got shape {data.shape}.")
        if data.dtype not in SUPPORTED_DTYPES:
            raise VolumeError(f"Unsupported voxel dtype {data.dtype}; expected uint8, int16 or float32.")
        if affine.shape != (4, 4) or not np.all(np.isfinite(affine)):
            raise VolumeError("Affine must be a finite 4x4 matrix.")
        spacing = np.linalg.norm(affine[:3, :3], axis=0)
        if np.any(spacing <= 0):
            raise VolumeError(f"Spacing must be positive, got {spacing}.")
        data.flags.writeable = False
        affine.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_array(
        cls,
        data: np.ndarray,
        spacing: Sequence[float] = (1.0, 1.0, 1.0),
        affine: Optional[np.ndarray] = None,
    ) -> "Volume":
        """Builds a Volume, coercing the array to the nearest supported dtype.

        Without an affine the grid is axis-aligned with origin at voxel 0.
        """
        if affine is None:
            affine = np.diag([float(s) for s in spacing] + [1.0])
        return cls(_coerce_dtype(np.asarray(data)), affine)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def spacing(self) -> Tuple[float, float, float]:
        return tuple(float(s) for s in np.linalg.norm(self.affine[:3, :3], axis=0))

    @property
    def dtype_tag(self) -> str:
        return DTYPE_TAGS[self.data.dtype]

    @property
    def size(self) -> int:
        return int(self.data.size)

    def voxels(self) -> np.ndarray:
        """Flat voxel array in x-fastest order."""
        return self.data.ravel(order="F")

    def with_data(self, data: np.ndarray) -> "Volume":
        """Same geometry, new voxels."""
        data = _coerce_dtype(np.asarray(data))
        if data.shape != self.data.shape:
            raise ShapeMismatchError(f"Expected shape {self.data.shape}, got {data.shape}.")
        return Volume(data, self.affine)


@dataclass(frozen=True, eq=False)
class BinaryMask(Volume):
    """A uint8 Volume with voxels in {0, 1}; 1 is gray-matter foreground."""

    def __post_init__(self):
        super().__post_init__()
        if self.data.dtype != np.uint8 or np.any(self.data > 1):
            raise VolumeError("Binary mask voxels must be uint8 values in {0, 1}.")

    @classmethod
    def from_bool(cls, fg: np.ndarray, like: Optional[Volume] = None,
                  spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> "BinaryMask":
        affine = like.affine if like is not None else np.diag([float(s) for s in spacing] + [1.0])
        return cls(np.asarray(fg).astype(bool).astype(np.uint8), affine)

    @classmethod
    def from_volume(cls, v: Volume) -> "BinaryMask":
        """Any non-zero voxel becomes foreground."""
        return cls((v.data != 0).astype(np.uint8), v.affine)

    @property
    def foreground(self) -> np.ndarray:
        return self.data.astype(bool)

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class Landmark:
    name: str
    point: Tuple[float, float, float]


@dataclass(frozen=True)
class LandmarkSet:
    landmarks: Tuple[Landmark, ...] = field(default_factory=tuple)

    def __post_init__(self):
        items = tuple(
            Landmark(str(lm.name), tuple(float(c) for c in lm.point)) for lm in self.landmarks
        )
        names = [lm.name for lm in items]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise VolumeError(f"Landmark names must be unique; duplicated: {dupes}")
        for lm in items:
            if len(lm.point) != 3 or not all(math.isfinite(c) for c in lm.point):
                raise VolumeError(f"Landmark '{lm.name}' has a non-finite or malformed point.")
        object.__setattr__(self, "landmarks", items)

    @classmethod
    def from_points(cls, points: Iterable[Tuple[str, Sequence[float]]]) -> "LandmarkSet":
        return cls(tuple(Landmark(name, tuple(p)) for name, p in points))

    def __iter__(self):
        return iter(self.landmarks)

    def __len__(self) -> int:
        return len(self.landmarks)

    @property
    def names(self) -> List[str]:
        return [lm.name for lm in self.landmarks]


def _coerce_dtype(data: np.ndarray) -> np.ndarray:
    if data.dtype in SUPPORTED_DTYPES:
        return data
    if data.dtype == np.bool_:
        return data.astype(np.uint8)
    if np.issubdtype(data.dtype, np.integer):
        lo, hi = (int(data.min()), int(data.max())) if data.size else (0, 0)
        if 0 <= lo and hi <= 255:
            return data.astype(np.uint8)
        if -32768 <= lo and hi <= 32767:
            return data.astype(np.int16)
    return data.astype(np.float32)


# -----------------------------
# Coordinates
# -----------------------------
def _inverse_affine(v: Volume) -> np.ndarray:
    try:
        inv = np.linalg.inv(v.affine)
    except np.linalg.LinAlgError as e:
        raise GeometryError("Affine is singular; cannot map physical points to voxels.") from e
    if not np.all(np.isfinite(inv)) or abs(np.linalg.det(v.affine[:3, :3])) < 1e-12:
        raise GeometryError("Affine is singular; cannot map physical points to voxels.")
    return inv


def phys_to_voxel(v: Volume, p: Sequence[float] | np.ndarray) -> np.ndarray:
    """Continuous voxel index of physical point(s) p; accepts (3,) or (N, 3)."""
    pts = np.asarray(p, dtype=np.float64)
    inv = _inverse_affine(v)
    return pts @ inv[:3, :3].T + inv[:3, 3]


def voxel_to_phys(v: Volume, ijk: Sequence[float] | np.ndarray) -> np.ndarray:
    idx = np.asarray(ijk, dtype=np.float64)
    return idx @ v.affine[:3, :3].T + v.affine[:3, 3]


def round_half_away(x: np.ndarray | float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def nearest_voxel(v: Volume, p: Sequence[float]) -> Tuple[Tuple[int, int, int], bool]:
    """Rounds phys_to_voxel(p) half-away-from-zero; reports whether it lies in bounds."""
    idx = tuple(int(c) for c in round_half_away(phys_to_voxel(v, p)))
    inside = all(0 <= c < d for c, d in zip(idx, v.dims))
    return idx, inside


def linear_index(dims: Sequence[int], ijk: np.ndarray) -> np.ndarray:
    """x-fastest linear index of (N, 3) voxel indices."""
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    return np.ravel_multi_index(tuple(ijk.T), tuple(dims), order="F")


def crop(v: Volume, lo: Sequence[int], hi: Sequence[int]) -> Volume:
    """Sub-volume [lo, hi) with the affine translated so physical positions are unchanged."""
    lo = np.asarray(lo, dtype=int)
    hi = np.asarray(hi, dtype=int)
    sub = v.data[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    affine = v.affine.copy()
    affine[:3, 3] = voxel_to_phys(v, lo)
    return type(v)(sub, affine)


# -----------------------------
# NIfTI-1 I/O
# -----------------------------
_READ_ERRORS = (ImageFileError, HeaderDataError, OSError, EOFError, ValueError, zlib.error, gzip.BadGzipFile)


def read_nifti(path: str | Path) -> Volume:
    """Reads a NIfTI-1 file (.nii or .nii.gz) into a Volume.

    The affine comes from the sform when sform_code > 0, else the qform when
    qform_code > 0, else diag(pixdim). Scaled data (scl_slope != 0) is returned
    as float32.
    """
    path = Path(path)
    if not path.exists():
        raise NiftiError(f"No such file: {path}")
    try:
        img = nib.load(str(path), mmap=False)
    except _READ_ERRORS as e:
        raise NiftiError(f"Cannot read NIfTI header from {path}: {e}") from e

    hdr = img.header
    if not isinstance(img, nib.Nifti1Pair) or isinstance(hdr, nib.Nifti2Header):
        raise NiftiError(f"{path} is not a NIfTI-1 file.")

    code = int(hdr["datatype"])
    if code not in DATATYPE_CODES:
        raise NiftiError(f"Unsupported NIfTI datatype code {code} in {path}; expected 2, 4 or 16.")

    shape = tuple(int(s) for s in img.shape)
    if len(shape) == 4 and shape[3] == 1:
        shape = shape[:3]
    elif len(shape) != 3:
        raise NiftiError(f"Expected a 3D volume (or 4D with one frame) in {path}, got shape {img.shape}.")

    try:
        raw = np.asarray(img.dataobj.get_unscaled()).reshape(shape, order="F")
    except _READ_ERRORS as e:
        raise NiftiError(f"Truncated or malformed voxel data in {path}: {e}") from e

    # nibabel moves scl_slope/scl_inter off the header onto the array proxy at load time.
    slope = float(getattr(img.dataobj, "slope", 1.0))
    inter = float(getattr(img.dataobj, "inter", 0.0))
    if (slope, inter) != (1.0, 0.0):
        data = (raw.astype(np.float64) * slope + inter).astype(np.float32)
    else:
        data = raw.astype(DATATYPE_CODES[code], copy=False)

    if int(hdr["sform_code"]) > 0:
        affine = hdr.get_sform()
    elif int(hdr["qform_code"]) > 0:
        affine = hdr.get_qform()
    else:
        affine = np.diag([float(z) for z in hdr.get_zooms()[:3]] + [1.0])

    try:
        volume = Volume(data, affine)
    except VolumeError as e:
        raise NiftiError(f"Invalid geometry in {path}: {e}") from e
    logger.debug("Read %s: dims=%s spacing=%s dtype=%s", path, volume.dims, volume.spacing, volume.dtype_tag)
    return volume


def write_nifti(v: Volume, path: str | Path, config: Optional[RunConfig] = None) -> None:
    """Writes a little-endian single-file NIfTI-1; gzipped when the name ends in .gz.

    With a config, descrip names the tool version and subcommand and the full run
    configuration rides along as a JSON comment extension.
    """
    path = Path(path)
    hdr = nib.Nifti1Header(endianness="<")
    hdr.set_data_dtype(v.data.dtype)
    img = nib.Nifti1Image(np.asarray(v.data), v.affine, header=hdr)
    img.set_sform(v.affine, code=1)
    img.set_qform(v.affine, code=1)
    img.header.set_xyzt_units("mm")
    if config is not None:
        img.header["descrip"] = f"cortexa {VERSION} {config.subcommand}"[:80].encode("ascii", "replace")
        payload = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
        img.header.extensions.append(nib.nifti1.Nifti1Extension("comment", payload))
    try:
        nib.save(img, str(path))
    except OSError as e:
        raise NiftiError(f"Cannot write {path}: {e}") from e
    logger.debug("Wrote %s (%s, dims=%s)", path, v.dtype_tag, v.dims)


# -----------------------------
# Landmarks
# -----------------------------
LANDMARK_COLUMNS = ["name", "x", "y", "z"]


def read_landmarks(path: str | Path) -> LandmarkSet:
    """Reads a `name,x,y,z` landmark CSV (physical RAS mm)."""
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"No such landmark file: {path}")
    df = pd.read_csv(path, encoding="utf-8", dtype={"name": str})
    missing = set(LANDMARK_COLUMNS) - set(df.columns)
    if missing:
        raise VolumeError(f"Landmark CSV {path} is missing columns: {sorted(missing)}")
    return LandmarkSet.from_points(
        (row["name"], (row["x"], row["y"], row["z"])) for row in df.to_dict(orient="records")
    )


def write_landmarks(landmarks: LandmarkSet, path: str | Path) -> None:
    rows = [{"name": lm.name, "x": lm.point[0], "y": lm.point[1], "z": lm.point[2]} for lm in landmarks]
    pd.DataFrame(rows, columns=LANDMARK_COLUMNS).to_csv(path, index=False, encoding="utf-8")


def load_landmark_catalog(path: str | Path = CATALOG_FILE) -> List[Dict[str, object]]:
    """The named cortical landmarks, each with a thickness_eligible flag."""
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def thickness_ineligible_names(path: str | Path = CATALOG_FILE) -> List[str]:
    """Landmarks whose thickness needs a segmentation this toolkit does not make (CA1, subiculum)."""
    return [entry["name"] for entry in load_landmark_catalog(path) if not entry.get("thickness_eligible", True)]


# -----------------------------
# Mask operations
# -----------------------------
def connected_components(m: BinaryMask, connectivity: int = 26) -> Tuple[Volume, List[int]]:
    """Labels components 1..K by decreasing size.

    Equal sizes are ordered by their smallest x-fastest linear voxel index, so
    the labelling does not depend on how the mask was built.
    """
    if connectivity not in _CONNECTIVITY_RANK:
        raise VolumeError(f"Connectivity must be 6, 18 or 26, got {connectivity}.")
    structure = ndimage.generate_binary_structure(3, _CONNECTIVITY_RANK[connectivity])
    raw, k = ndimage.label(m.foreground, structure=structure)
    if k == 0:
        return Volume(np.zeros(m.dims, dtype=np.int16), m.affine), []

    flat = raw.ravel(order="F")
    sizes = np.bincount(flat, minlength=k + 1)[1:]
    labels, first = np.unique(flat, return_index=True)
    first_index = np.empty(k, dtype=np.int64)
    first_index[labels[labels > 0] - 1] = first[labels > 0]

    order = np.lexsort((first_index, -sizes))
    remap = np.zeros(k + 1, dtype=np.int64)
    remap[order + 1] = np.arange(1, k + 1)
    relabelled = remap[raw]

    out_dtype = np.int16 if k <= np.iinfo(np.int16).max else np.float32
    logger.debug("Found %d components (connectivity %d)", k, connectivity)
    return Volume(relabelled.astype(out_dtype), m.affine), [int(s) for s in sizes[order]]


def keep_largest_component(m: BinaryMask, connectivity: int = 26) -> BinaryMask:
    labels, sizes = connected_components(m, connectivity)
    if not sizes:
        return m
    return BinaryMask.from_bool(labels.data == 1, like=m)


def require_same_grid(a: Volume, b: Volume, check_spacing: bool = True) -> None:
    if a.dims != b.dims:
        raise ShapeMismatchError(f"Shape mismatch: {a.dims} vs {b.dims}")
    if check_spacing and not np.allclose(a.spacing, b.spacing, rtol=1e-5, atol=0.0):
        raise ShapeMismatchError(f"Spacing mismatch: {a.spacing} vs {b.spacing}")
