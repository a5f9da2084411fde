"""
Landmark-anchored cortical thickness.

Around each landmark the local cortical ribbon is grown geodesically inside the
gray-matter mask, and thickness is the diameter of the largest inscribed ball
centred on the ribbon's medial axis.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.sparse.csgraph import dijkstra

import utils
from modules import geometry, stats
from modules.volume_core import (
    BinaryMask,
    Landmark,
    LandmarkSet,
    Volume,
    crop,
    linear_index,
    nearest_voxel,
    phys_to_voxel,
    thickness_ineligible_names,
    voxel_to_phys,
)
from utils import GeometryError, RunConfig, StatsError

logger = logging.getLogger(__name__)

STATUS_OK = "ok"
STATUS_SNAPPED = "snapped"
STATUS_FAILED = "failed"

THICKNESS_COLUMNS = [
    "name", "thickness_mm", "radius_mm", "cx", "cy", "cz", "ribbon_voxels", "snap_mm", "status",
]

# Geodesic growth uses the 13 "forward" offsets; edges are undirected.
_HALF_OFFSETS = tuple(o for o in geometry.NEIGHBOR_OFFSETS if o > (0, 0, 0))


# -----------------------------
# Data model
# -----------------------------
@dataclass(frozen=True, eq=False)
class RibbonExtraction:
    landmark: str
    seed: Optional[Tuple[int, int, int]]
    radius_mm: float
    voxels: np.ndarray  # (N, 3), x-fastest linear order
    snap_mm: float
    status: str

    @property
    def size(self) -> int:
        return int(self.voxels.shape[0])

    def as_mask(self, dims: Tuple[int, int, int]) -> np.ndarray:
        out = np.zeros(dims, dtype=bool)
        if self.size:
            out[tuple(self.voxels.T)] = True
        return out


@dataclass(frozen=True)
class LandmarkThickness:
    name: str
    thickness_mm: float
    radius_mm: float
    cx: float
    cy: float
    cz: float
    ribbon_voxels: int
    snap_mm: float
    status: str

    @classmethod
    def failed(cls, name: str, snap_mm: float = math.nan) -> "LandmarkThickness":
        return cls(name, math.nan, math.nan, math.nan, math.nan, math.nan, 0, snap_mm, STATUS_FAILED)


@dataclass(frozen=True)
class ThicknessReport:
    rows: Tuple[LandmarkThickness, ...]

    def __iter__(self):
        return iter(self.rows)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, name: str) -> LandmarkThickness:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    @property
    def failures(self) -> int:
        return sum(1 for row in self.rows if row.status == STATUS_FAILED)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(row) for row in self.rows], columns=THICKNESS_COLUMNS)

    def to_dict(self) -> Dict[str, object]:
        return {"landmarks": [_json_row(row) for row in self.rows]}


def _json_row(row: LandmarkThickness) -> Dict[str, object]:
    return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(row).items()}


# -----------------------------
# Ribbon extraction
# -----------------------------
def _window(m: BinaryMask, center: np.ndarray, radius_mm: float) -> Tuple[np.ndarray, np.ndarray]:
    """Voxel bounding box [lo, hi) holding every voxel within radius_mm of center."""
    inv = np.linalg.inv(m.affine[:3, :3])
    half = np.ceil(radius_mm * np.linalg.norm(inv, axis=1)).astype(int) + 1
    c = np.floor(center).astype(int)
    lo = np.clip(c - half, 0, m.dims)
    hi = np.clip(c + half + 2, 0, m.dims)
    return lo, hi


def _snap(m: BinaryMask, p: np.ndarray, snap_mm: float) -> Tuple[Optional[Tuple[int, int, int]], float]:
    """Nearest foreground voxel centre to p within snap_mm; ties to the smallest linear index."""
    lo, hi = _window(m, phys_to_voxel(m, p), snap_mm)
    if np.any(hi <= lo):
        return None, math.nan
    sub = m.foreground[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    idx = np.argwhere(sub) + lo
    if not len(idx):
        return None, math.nan
    dist = np.linalg.norm(voxel_to_phys(m, idx) - p, axis=1)
    order = np.lexsort((linear_index(m.dims, idx), dist))
    best = order[0]
    if dist[best] > snap_mm + 1e-9:
        return None, float(dist[best])
    return tuple(int(c) for c in idx[best]), float(dist[best])


def _geodesic_ball(m: BinaryMask, seed: Tuple[int, int, int], radius_mm: float) -> np.ndarray:
    """Foreground voxels reachable from seed through 26-connected foreground within radius_mm."""
    lo, hi = _window(m, np.asarray(seed, dtype=np.float64), radius_mm)
    sub = m.foreground[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    shape = sub.shape
    node_of = np.full(shape, -1, dtype=np.int64)
    coords = np.argwhere(sub)
    node_of[tuple(coords.T)] = np.arange(len(coords))

    rows, cols, weights = [], [], []
    for offset in _HALF_OFFSETS:
        src = tuple(slice(max(0, -o), s - max(0, o)) for o, s in zip(offset, shape))
        dst = tuple(slice(max(0, o), s - max(0, -o)) for o, s in zip(offset, shape))
        both = sub[src] & sub[dst]
        if not both.any():
            continue
        rows.append(node_of[src][both])
        cols.append(node_of[dst][both])
        step = float(np.linalg.norm(m.affine[:3, :3] @ np.asarray(offset, dtype=np.float64)))
        weights.append(np.full(int(both.sum()), step))

    n = len(coords)
    if rows:
        graph = sparse.coo_matrix(
            (np.concatenate(weights), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        ).tocsr()
    else:
        graph = sparse.csr_matrix((n, n))
    start = int(node_of[tuple(np.asarray(seed) - lo)])
    dist = dijkstra(graph, directed=False, indices=start, limit=radius_mm + 1e-9)
    reached = coords[np.isfinite(dist)] + lo
    order = np.argsort(linear_index(m.dims, reached), kind="stable")
    return reached[order]


def extract_ribbon(
    m: BinaryMask,
    p: Sequence[float],
    radius_mm: Optional[float] = None,
    snap_mm: Optional[float] = None,
    name: str = "",
) -> RibbonExtraction:
    """Local cortical ribbon around physical point p.

    The seed is the nearest foreground voxel within the snap cap; the ribbon is
    the geodesic dilation of the seed through the mask truncated at radius_mm.
    Geodesic growth does not jump across background, so neighbouring banks of a
    sulcus stay out of the ribbon.
    """
    radius_mm = utils.RIBBON_RADIUS_MM if radius_mm is None else float(radius_mm)
    snap_mm = utils.SNAP_MM if snap_mm is None else float(snap_mm)
    if radius_mm <= 0:
        raise utils.ConfigError("Ribbon radius must be positive.")
    p = np.asarray(p, dtype=np.float64)
    empty = np.zeros((0, 3), dtype=np.int64)

    seed, snap_dist = _snap(m, p, snap_mm)
    if seed is None:
        logger.warning("Landmark '%s': no foreground within %.2f mm", name, snap_mm)
        return RibbonExtraction(name, None, radius_mm, empty, snap_dist, STATUS_FAILED)

    own, inside = nearest_voxel(m, p)
    status = STATUS_OK if inside and m.data[own] else STATUS_SNAPPED
    if status == STATUS_SNAPPED:
        logger.info("Landmark '%s' snapped %.3f mm to voxel %s", name, snap_dist, seed)
    voxels = _geodesic_ball(m, seed, radius_mm)
    return RibbonExtraction(name, seed, radius_mm, voxels, snap_dist, status)


# -----------------------------
# Thickness
# -----------------------------
def _measure(
    m: BinaryMask,
    dm: Optional[geometry.DistanceMap],
    landmark: Landmark,
    radius_mm: float,
    snap_mm: float,
) -> LandmarkThickness:
    if dm is None:
        logger.warning("Landmark '%s': mask has no measurable foreground", landmark.name)
        return LandmarkThickness.failed(landmark.name)
    ribbon = extract_ribbon(m, landmark.point, radius_mm, snap_mm, name=landmark.name)
    if ribbon.status == STATUS_FAILED or not ribbon.size:
        return LandmarkThickness.failed(landmark.name, ribbon.snap_mm)

    # Cut faces of the ribbon are not background: the distance map comes from the
    # whole mask, and neighbours outside the ribbon still take part in the ball rule.
    lo = np.maximum(ribbon.voxels.min(axis=0) - 1, 0)
    hi = np.minimum(ribbon.voxels.max(axis=0) + 2, m.dims)
    sub_mask = crop(m, lo, hi)
    sub_dm = geometry.DistanceMap(crop(dm.volume, lo, hi))
    region = np.zeros(sub_mask.dims, dtype=bool)
    region[tuple((ribbon.voxels - lo).T)] = True

    try:
        sk = geometry.skeletonize(sub_mask, sub_dm, region=region)
        center, radius = geometry.max_inscribed_sphere(sk, region)
    except GeometryError as e:
        logger.warning("Landmark '%s': %s", landmark.name, e)
        return LandmarkThickness.failed(landmark.name, ribbon.snap_mm)

    cx, cy, cz = (float(c) for c in voxel_to_phys(m, np.asarray(center) + lo))
    return LandmarkThickness(
        name=landmark.name,
        thickness_mm=2.0 * radius,
        radius_mm=radius,
        cx=cx,
        cy=cy,
        cz=cz,
        ribbon_voxels=ribbon.size,
        snap_mm=ribbon.snap_mm,
        status=ribbon.status,
    )


def _bounded_distance_map(m: BinaryMask) -> geometry.DistanceMap:
    """Distance map of m with voxels outside the image counted as background."""
    padded = BinaryMask(np.pad(m.data, 1, mode="constant", constant_values=0), m.affine)
    dm, _ = geometry.distance_transform(padded)
    return geometry.DistanceMap(Volume(dm.values[1:-1, 1:-1, 1:-1], m.affine))


def thickness_at_landmarks(
    m: BinaryMask,
    landmarks: LandmarkSet,
    radius_mm: Optional[float] = None,
    snap_mm: Optional[float] = None,
    threads: int = 1,
    eligible_only: bool = False,
) -> ThicknessReport:
    """Thickness (maximal inscribed ball diameter) at every landmark, in landmark order.

    A landmark that cannot be measured is reported with status 'failed'; the
    batch always completes.
    """
    radius_mm = utils.RIBBON_RADIUS_MM if radius_mm is None else float(radius_mm)
    snap_mm = utils.SNAP_MM if snap_mm is None else float(snap_mm)

    ineligible = {n.lower() for n in thickness_ineligible_names()}
    selected = list(landmarks)
    if eligible_only:
        selected = [lm for lm in selected if lm.name.lower() not in ineligible]
    for lm in selected:
        if lm.name.lower() in ineligible:
            logger.warning("Landmark '%s' is not thickness-eligible; its value is unreliable", lm.name)

    dm = None
    if m.count:
        try:
            dm = _bounded_distance_map(m)
        except GeometryError as e:
            logger.warning("%s", e)

    def work(lm: Landmark) -> LandmarkThickness:
        return _measure(m, dm, lm, radius_mm, snap_mm)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(work, selected))
    else:
        rows = [work(lm) for lm in selected]
    report = ThicknessReport(tuple(rows))
    logger.info("Measured %d landmarks, %d failed", len(report), report.failures)
    return report


# -----------------------------
# Persistence
# -----------------------------
def write_thickness_report(
    report: ThicknessReport, csv_path: str | Path, json_path: str | Path, config: Optional[RunConfig] = None
) -> None:
    utils.write_csv(report.to_frame(), csv_path, config)
    utils.write_json(report.to_dict(), json_path, config)


def read_thickness_table(paths: Sequence[str | Path]) -> pd.DataFrame:
    """Long table (subject, name, thickness_mm, status) from one or more thickness CSVs.

    A CSV without a 'subject' column is one subject named after the file stem.
    """
    frames = []
    for path in paths:
        path = Path(path)
        df = utils.read_csv(path)
        missing = {"name", "thickness_mm"} - set(df.columns)
        if missing:
            raise utils.CortexaError(f"{path} is missing columns: {sorted(missing)}")
        if "subject" not in df.columns:
            df["subject"] = path.name.split(".")[0]
        if "status" not in df.columns:
            df["status"] = STATUS_OK
        frames.append(df[["subject", "name", "thickness_mm", "status"]])
    table = pd.concat(frames, ignore_index=True)
    table["subject"] = table["subject"].astype(str)
    table["name"] = table["name"].astype(str)
    return table


def reports_to_table(reports: Mapping[str, ThicknessReport]) -> pd.DataFrame:
    frames = []
    for subject, report in reports.items():
        df = report.to_frame()
        df.insert(0, "subject", str(subject))
        frames.append(df[["subject", "name", "thickness_mm", "status"]])
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["subject", "name", "thickness_mm", "status"]
    )


# -----------------------------
# Automated vs manual comparison
# -----------------------------
@dataclass(frozen=True, eq=False)
class LandmarkComparison:
    name: str
    subjects: Tuple[str, ...]
    manual: np.ndarray
    auto: np.ndarray
    r: float
    p: float
    icc: float
    icc_abs: float

    @property
    def n(self) -> int:
        return len(self.subjects)

    def to_dict(self) -> Dict[str, object]:
        def clean(x: float):
            return None if math.isnan(x) else float(x)

        return {
            "name": self.name, "n": self.n, "r": clean(self.r), "p": clean(self.p),
            "icc": clean(self.icc), "icc_abs": clean(self.icc_abs),
            "manual_mean": float(np.mean(self.manual)), "auto_mean": float(np.mean(self.auto)),
        }


@dataclass(frozen=True, eq=False)
class ComparisonTable:
    rows: Tuple[LandmarkComparison, ...]
    skipped: Tuple[str, ...]
    significance: float

    def __iter__(self):
        return iter(self.rows)

    def __getitem__(self, name: str) -> LandmarkComparison:
        for row in self.rows:
            if row.name == name:
                return row
        raise KeyError(name)

    @property
    def strong(self) -> int:
        """Regions with r > 0.6."""
        return sum(1 for row in self.rows if not math.isnan(row.r) and row.r > 0.6)

    @property
    def significant(self) -> int:
        return sum(1 for row in self.rows if not math.isnan(row.p) and row.p < self.significance)

    @property
    def reliable(self) -> int:
        """Regions with consistency ICC > 0.7."""
        return sum(1 for row in self.rows if not math.isnan(row.icc) and row.icc > 0.7)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.to_dict() for row in self.rows],
                            columns=["name", "n", "r", "p", "icc", "icc_abs", "manual_mean", "auto_mean"])

    def pairs_frame(self) -> pd.DataFrame:
        """Plot-ready long table: one row per (landmark, subject)."""
        rows = []
        for row in self.rows:
            for subject, x, y in zip(row.subjects, row.manual, row.auto):
                rows.append({"name": row.name, "subject": subject, "manual_mm": float(x), "auto_mm": float(y)})
        return pd.DataFrame(rows, columns=["name", "subject", "manual_mm", "auto_mm"])

    def to_dict(self) -> Dict[str, object]:
        return {
            "landmarks": [row.to_dict() for row in self.rows],
            "skipped": list(self.skipped),
            "regions_r_above_0_6": self.strong,
            "regions_significant": self.significant,
            "regions_icc_above_0_7": self.reliable,
            "significance": self.significance,
        }


ThicknessInput = Union[pd.DataFrame, Mapping[str, ThicknessReport]]


def _as_table(data: ThicknessInput) -> pd.DataFrame:
    table = data if isinstance(data, pd.DataFrame) else reports_to_table(data)
    if "status" in table.columns:
        table = table[table["status"] != STATUS_FAILED]
    return table.dropna(subset=["thickness_mm"])


def compare_thickness(
    auto: ThicknessInput,
    manual: ThicknessInput,
    min_subjects: int = 3,
    significance: Optional[float] = None,
) -> ComparisonTable:
    """Pairs automated and manual thickness per landmark across subjects.

    Landmarks with fewer than `min_subjects` paired subjects are skipped with a
    warning. r and p come from `stats.pearson(manual, auto)`; icc is the
    consistency ICC (blind to a fixed offset between methods) and icc_abs the
    absolute-agreement ICC (penalises it).
    """
    significance = utils.SIGNIFICANCE if significance is None else significance
    a = _as_table(auto).rename(columns={"thickness_mm": "auto"})
    b = _as_table(manual).rename(columns={"thickness_mm": "manual"})
    merged = a[["subject", "name", "auto"]].merge(b[["subject", "name", "manual"]], on=["subject", "name"])

    names = list(dict.fromkeys(list(a["name"]) + list(b["name"])))
    rows: List[LandmarkComparison] = []
    skipped: List[str] = []
    for name in names:
        group = merged[merged["name"] == name].sort_values("subject", kind="stable")
        if len(group) < min_subjects:
            logger.warning("Landmark '%s': only %d paired subjects, skipped", name, len(group))
            skipped.append(name)
            continue
        x = group["manual"].to_numpy(dtype=np.float64)
        y = group["auto"].to_numpy(dtype=np.float64)
        r = p = icc = icc_abs = math.nan
        try:
            r, p = stats.pearson(x, y)
        except StatsError as e:
            logger.warning("Landmark '%s': correlation undefined (%s)", name, e)
        try:
            table = np.column_stack([x, y])
            icc = stats.icc_avg_fixed(table)
            icc_abs = stats.icc_avg_absolute(table)
        except StatsError as e:
            logger.warning("Landmark '%s': ICC undefined (%s)", name, e)
        rows.append(LandmarkComparison(name, tuple(group["subject"]), x, y, r, p, icc, icc_abs))
    return ComparisonTable(tuple(rows), tuple(skipped), significance)
