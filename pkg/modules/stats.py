"""
Evaluation statistics: Dice, 95th-percentile Hausdorff distance, Pearson
correlation with a t-test p-value, and intraclass correlation.

ICC conventions (Shrout & Fleiss numbering):
  icc_avg_fixed     ICC(3,k)  two-way mixed, consistency, average measures.
                    This is the "average fixed raters" ICC. It ignores a constant
                    offset between raters.
  icc_avg_absolute  ICC(2,k)  two-way, absolute agreement, average measures.
                    A constant offset between raters lowers it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, special

from modules.volume_core import BinaryMask, require_same_grid
from utils import PERCENTILE_METHOD, StatsError

logger = logging.getLogger(__name__)

_FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


@dataclass
class StatsReport:
    dsc: Optional[float] = None
    hd95: Optional[float] = None
    r: Optional[float] = None
    p: Optional[float] = None
    icc: Optional[float] = None
    n: int = 0
    both_empty: bool = False

    def __post_init__(self):
        if self.dsc is not None and not 0.0 <= self.dsc <= 100.0:
            raise StatsError(f"DSC out of range: {self.dsc}")
        if self.hd95 is not None and self.hd95 < 0:
            raise StatsError(f"HD95 must be non-negative: {self.hd95}")
        if self.p is not None and not 0.0 <= self.p <= 1.0:
            raise StatsError(f"p-value out of range: {self.p}")

    def to_dict(self) -> Dict[str, object]:
        return asdict(self)


# -----------------------------
# Overlap and surface distance
# -----------------------------
def dice(a: BinaryMask, b: BinaryMask) -> float:
    """Dice overlap in percent. Two empty masks score 100 (with a warning)."""
    require_same_grid(a, b, check_spacing=False)
    fa, fb = a.foreground, b.foreground
    total = int(fa.sum()) + int(fb.sum())
    if total == 0:
        logger.warning("Both masks are empty; Dice reported as 100")
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(fa, fb).sum()) / total


def surface(m: BinaryMask) -> np.ndarray:
    """Foreground voxels with a background face-neighbour; the image border counts as background."""
    fg = m.foreground
    return fg & ~ndimage.binary_erosion(fg, structure=_FACE_STRUCTURE, border_value=0)


def surface_distances(a: BinaryMask, b: BinaryMask) -> np.ndarray:
    """Distances (mm) from every surface voxel of a to the nearest surface voxel of b."""
    sa, sb = surface(a), surface(b)
    to_b = ndimage.distance_transform_edt(~sb, sampling=a.spacing)
    return np.sort(to_b[sa])


def hd95(a: BinaryMask, b: BinaryMask) -> float:
    """Symmetric 95th-percentile surface distance in mm (linear-interpolation percentile)."""
    require_same_grid(a, b)
    if not a.count or not b.count:
        raise StatsError("HD95 is undefined for an empty mask.")
    d_ab = surface_distances(a, b)
    d_ba = surface_distances(b, a)
    return float(max(
        np.percentile(d_ab, 95, method=PERCENTILE_METHOD),
        np.percentile(d_ba, 95, method=PERCENTILE_METHOD),
    ))


def evaluate_pair(pred: BinaryMask, ref: BinaryMask) -> StatsReport:
    """DSC and HD95 for one prediction/reference pair; HD95 is None when a mask is empty."""
    require_same_grid(pred, ref)
    report = StatsReport(dsc=dice(pred, ref), n=1, both_empty=not pred.count and not ref.count)
    if pred.count and ref.count:
        report.hd95 = hd95(pred, ref)
    else:
        logger.warning("HD95 undefined: prediction has %d and reference %d voxels", pred.count, ref.count)
    return report


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (n - 1); sd is 0 for fewer than two values."""
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if not arr.size:
        return math.nan, math.nan
    sd = float(np.std(arr, ddof=1)) if arr.size > 1 else 0.0
    return float(np.mean(arr)), sd


def evaluate_batch(pairs: Sequence[Tuple[BinaryMask, BinaryMask]]) -> Tuple[List[StatsReport], Dict[str, float]]:
    reports = [evaluate_pair(pred, ref) for pred, ref in pairs]
    dsc_mean, dsc_sd = summarize([r.dsc for r in reports])
    hd_mean, hd_sd = summarize([r.hd95 for r in reports])
    summary = {"n": len(reports), "dsc_mean": dsc_mean, "dsc_sd": dsc_sd, "hd95_mean": hd_mean, "hd95_sd": hd_sd}
    return reports, summary


# -----------------------------
# Correlation
# -----------------------------
def pearson(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Pearson r with a two-sided p-value from the t distribution on n - 2 degrees of freedom.

    With t = r * sqrt(df / (1 - r^2)), the two-sided tail probability is the
    regularized incomplete beta I_{df/(df+t^2)}(df/2, 1/2) = I_{1-r^2}(df/2, 1/2).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise StatsError("Pearson needs two 1D series of equal length.")
    n = x.size
    if n < 3:
        raise StatsError(f"Pearson needs at least 3 samples, got {n}.")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise StatsError("Pearson is undefined for a zero-variance series.")
    r = float(np.dot(dx, dy) / math.sqrt(sxx * syy))
    r = max(-1.0, min(1.0, r))
    if 1.0 - abs(r) < 1e-12:
        return math.copysign(1.0, r), 0.0
    df = n - 2
    p = float(special.betainc(0.5 * df, 0.5, 1.0 - r * r))
    return r, min(1.0, max(0.0, p))


# -----------------------------
# Intraclass correlation
# -----------------------------
def _anova(table: Sequence[Sequence[float]]) -> Tuple[float, float, float, int, int]:
    """Two-way ANOVA without interaction: (MS_rows, MS_cols, MS_error, n, k)."""
    x = np.asarray(table, dtype=np.float64)
    if x.ndim != 2:
        raise StatsError("ICC needs an n subjects x k raters table.")
    n, k = x.shape
    if n < 3 or k < 2:
        raise StatsError(f"ICC needs at least 3 subjects and 2 raters, got {n}x{k}.")
    if not np.all(np.isfinite(x)):
        raise StatsError("ICC table is incomplete (missing or non-finite values).")
    grand = x.mean()
    row_means = x.mean(axis=1, keepdims=True)
    col_means = x.mean(axis=0, keepdims=True)
    ss_rows = k * float(np.sum((row_means - grand) ** 2))
    ss_cols = n * float(np.sum((col_means - grand) ** 2))
    resid = x - row_means - col_means + grand
    ss_err = float(np.sum(resid ** 2))
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    if ms_rows <= 1e-300:
        raise StatsError("ICC is undefined: no between-subject variance.")
    return ms_rows, ms_cols, ms_err, n, k


def icc_avg_fixed(table: Sequence[Sequence[float]]) -> float:
    """ICC(3,k) = (MS_R - MS_E) / MS_R. May be negative; returned as is."""
    ms_rows, _, ms_err, _, _ = _anova(table)
    return (ms_rows - ms_err) / ms_rows


def icc_avg_absolute(table: Sequence[Sequence[float]]) -> float:
    """ICC(2,k) = (MS_R - MS_E) / (MS_R + (MS_C - MS_E) / n)."""
    ms_rows, ms_cols, ms_err, n, _ = _anova(table)
    denom = ms_rows + (ms_cols - ms_err) / n
    if denom <= 0:
        raise StatsError("Absolute-agreement ICC is undefined for this table.")
    return (ms_rows - ms_err) / denom
