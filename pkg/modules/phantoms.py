"""
Analytic ground-truth phantoms with known thickness.

A voxel is foreground iff its physical centre satisfies the shape's implicit
inequality (no anti-aliasing). The shape is centred at the volume centre,
(dims - 1) / 2 in voxel units, which sits on a voxel face along every even axis.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

import utils
from modules.volume_core import BinaryMask, LandmarkSet, Volume, write_landmarks, write_nifti
from utils import ConfigError, RunConfig

logger = logging.getLogger(__name__)

KINDS = ("slab", "hollow-sphere", "folded-sheet", "solid-ball")


# -----------------------------
# Data model
# -----------------------------
@dataclass(frozen=True)
class PhantomSpec:
    kind: str
    dims: Tuple[int, int, int] = (64, 64, 64)
    spacing: Tuple[float, float, float] = (0.3, 0.3, 0.3)
    thickness_mm: float = 2.4
    radius_mm: float = 5.0  # outer radius (hollow sphere) or radius (solid ball)
    amplitude_mm: float = 5.0
    wavelength_mm: float = 20.0
    rotation_deg: Tuple[float, float, float] = (0.0, 0.0, 0.0)  # extrinsic x, y, z Euler angles
    jitter: float = 0.0
    seed: int = 0
    n_landmarks: int = 10

    def validate(self) -> "PhantomSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"Unknown phantom kind '{self.kind}'; expected one of {KINDS}.")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"Phantom dims must be three positive integers, got {self.dims}.")
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"Phantom spacing must be positive, got {self.spacing}.")
        for name in ("thickness_mm", "radius_mm", "amplitude_mm", "wavelength_mm"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive.")
        if not 0.0 <= self.jitter < 1.0:
            raise ConfigError(f"Jitter probability must lie in [0, 1), got {self.jitter}.")
        if self.n_landmarks < 5:
            raise ConfigError("A phantom carries at least 5 landmarks.")

        half = min(self.half_extent)
        if self.kind == "slab" and self.thickness_mm >= 2 * half:
            raise ConfigError("Slab thickness must be smaller than the volume extent.")
        if self.kind == "hollow-sphere":
            if self.thickness_mm >= self.radius_mm:
                raise ConfigError("Shell wall must be thinner than the outer radius.")
            if self.radius_mm + max(self.spacing) > half:
                raise ConfigError(f"Shell of radius {self.radius_mm} mm exceeds the volume bounds.")
        if self.kind == "solid-ball" and self.radius_mm + max(self.spacing) > half:
            raise ConfigError(f"Ball of radius {self.radius_mm} mm exceeds the volume bounds.")
        if self.kind == "folded-sheet" and self.amplitude_mm + self.thickness_mm / 2 + max(self.spacing) > half:
            raise ConfigError("Folded sheet exceeds the volume bounds.")
        return self

    @property
    def half_extent(self) -> Tuple[float, float, float]:
        """Distance (mm) from the volume centre to the outermost voxel centre, per axis."""
        return tuple((d - 1) / 2.0 * s for d, s in zip(self.dims, self.spacing))

    @property
    def center_mm(self) -> np.ndarray:
        return np.asarray(self.half_extent, dtype=np.float64)

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_euler("xyz", self.rotation_deg, degrees=True)


@dataclass(frozen=True, eq=False)
class Phantom:
    spec: PhantomSpec
    mask: BinaryMask
    thickness: Volume  # local analytic thickness (mm) on foreground voxels
    truth_mm: float
    landmarks: LandmarkSet

    def truth(self) -> Dict[str, object]:
        return {
            "spec": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.spec).items()},
            "truth_thickness_mm": self.truth_mm,
            "foreground_voxels": self.mask.count,
            "landmarks": self.landmarks.names,
        }


# -----------------------------
# Generation
# -----------------------------
def _local_coordinates(spec: PhantomSpec) -> np.ndarray:
    """Voxel centres in the shape's own frame: centred, then un-rotated. Shape (X, Y, Z, 3)."""
    grid = np.indices(spec.dims, dtype=np.float64)
    phys = np.stack([grid[a] * spec.spacing[a] for a in range(3)], axis=-1) - spec.center_mm
    return phys @ spec.rotation.as_matrix()


def _to_world(spec: PhantomSpec, local: np.ndarray) -> np.ndarray:
    return local @ spec.rotation.as_matrix().T + spec.center_mm


def _fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n, dtype=np.float64) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = math.pi * (1.0 + math.sqrt(5.0)) * i
    return np.stack([np.sin(polar) * np.cos(azimuth), np.sin(polar) * np.sin(azimuth), np.cos(polar)], axis=1)


def _in_plane_offsets(n: int, reach: float) -> np.ndarray:
    """Deterministic sunflower layout of n points within a disc of radius reach, centre included."""
    i = np.arange(n, dtype=np.float64)
    radius = reach * np.sqrt(i / max(n - 1, 1))
    angle = i * math.pi * (3.0 - math.sqrt(5.0))
    return np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)


def _shape(spec: PhantomSpec, local: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float, np.ndarray]:
    """Foreground, local thickness field, nominal thickness and landmark points (local frame)."""
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    t = spec.thickness_mm
    n = spec.n_landmarks
    half = min(spec.half_extent)

    if spec.kind == "slab":
        fg = np.abs(z) <= t / 2
        field = np.full(fg.shape, t)
        in_plane = min(spec.half_extent[:2]) if not any(spec.rotation_deg) else half
        uv = _in_plane_offsets(n, 0.25 * in_plane)
        points = np.column_stack([uv, np.zeros(n)])
        return fg, field, t, points

    if spec.kind == "hollow-sphere":
        rho = np.sqrt(x * x + y * y + z * z)
        outer = spec.radius_mm
        fg = (rho >= outer - t) & (rho <= outer)
        field = np.full(fg.shape, t)
        points = _fibonacci_directions(n) * (outer - t / 2)
        return fg, field, t, points

    if spec.kind == "solid-ball":
        rho = np.sqrt(x * x + y * y + z * z)
        fg = rho <= spec.radius_mm
        field = np.full(fg.shape, 2 * spec.radius_mm)
        points = np.vstack([np.zeros((1, 3)), _fibonacci_directions(n - 1) * 0.5 * spec.radius_mm])
        return fg, field, 2 * spec.radius_mm, points

    k = 2 * math.pi / spec.wavelength_mm
    a = spec.amplitude_mm
    fg = np.abs(z - a * np.sin(k * x)) <= t / 2
    # Normal thickness of a vertically offset sheet: t over the slope's secant.
    field = t / np.sqrt(1.0 + (a * k * np.cos(k * x)) ** 2)
    reach = 0.3 * (spec.half_extent[0] if not any(spec.rotation_deg) else half)
    xs = np.linspace(-reach, reach, n)
    ys = np.tile([-0.25, 0.0, 0.25], n // 3 + 1)[:n] * half
    points = np.column_stack([xs, ys, a * np.sin(k * xs)])
    return fg, field, t, points


def _apply_jitter(fg: np.ndarray, probability: float, seed: int) -> np.ndarray:
    """Flips boundary voxels (either side of the surface) with the given probability."""
    if probability <= 0:
        return fg
    rng = np.random.default_rng(seed)
    structure = ndimage.generate_binary_structure(3, 1)
    boundary = fg ^ ndimage.binary_erosion(fg, structure) | (ndimage.binary_dilation(fg, structure) & ~fg)
    flips = boundary & (rng.random(fg.shape) < probability)
    return fg ^ flips


def generate(spec: PhantomSpec) -> Phantom:
    """Builds the phantom mask, its analytic thickness field and mid-surface landmarks."""
    spec.validate()
    local = _local_coordinates(spec)
    fg, field, truth, points = _shape(spec, local)
    fg = _apply_jitter(fg, spec.jitter, spec.seed)

    affine = np.diag(list(spec.spacing) + [1.0])
    mask = BinaryMask.from_bool(fg, spacing=spec.spacing)
    thickness = Volume.from_array(np.where(fg, field, 0.0).astype(np.float32), affine=affine)
    world = _to_world(spec, points)
    prefix = spec.kind.split("-")[0]
    landmarks = LandmarkSet.from_points((f"{prefix}_{i + 1:02d}", p) for i, p in enumerate(world))
    logger.info("Generated %s phantom: %d foreground voxels, truth %.3f mm", spec.kind, int(fg.sum()), truth)
    return Phantom(spec, mask, thickness, float(truth), landmarks)


def write_phantom(phantom: Phantom, out_dir: str | Path, config: Optional[RunConfig] = None) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "mask": out_dir / "mask.nii.gz",
        "thickness": out_dir / "thickness_field.nii.gz",
        "landmarks": out_dir / "landmarks.csv",
        "truth": out_dir / "truth.json",
    }
    write_nifti(phantom.mask, paths["mask"], config)
    write_nifti(phantom.thickness, paths["thickness"], config)
    write_landmarks(phantom.landmarks, paths["landmarks"])
    utils.write_json(phantom.truth(), paths["truth"], config)
    return paths
