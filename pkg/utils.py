from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import pandas as pd

VERSION = "0.1.0"

# -----------------------------
# Configuration
# -----------------------------
RIBBON_RADIUS_MM = float(os.getenv("CORTEXA_RIBBON_RADIUS_MM", "15.0"))
SNAP_MM = float(os.getenv("CORTEXA_SNAP_MM", "2.0"))
STRIDE = int(os.getenv("CORTEXA_STRIDE", "32"))
THRESHOLD = float(os.getenv("CORTEXA_THRESHOLD", "0.5"))
CONNECTIVITY = int(os.getenv("CORTEXA_CONNECTIVITY", "26"))
THREADS = int(os.getenv("CORTEXA_THREADS", "1"))
SEED = int(os.getenv("CORTEXA_SEED", "0"))
SIGNIFICANCE = float(os.getenv("CORTEXA_SIGNIFICANCE", "0.05"))
LOG_LEVEL = os.getenv("CORTEXA_LOG", "WARNING")

PATCH_SIZE = 64
PERCENTILE_METHOD = "linear"


# -----------------------------
# Errors
# -----------------------------
class CortexaError(RuntimeError):
    """Root of every error the toolkit raises on purpose."""


class ConfigError(CortexaError, ValueError):
    pass


class VolumeError(CortexaError, ValueError):
    pass


class NiftiError(CortexaError):
    pass


class GeometryError(CortexaError):
    pass


class ShapeMismatchError(CortexaError, ValueError):
    pass


class PredictorError(CortexaError):
    pass


class StatsError(CortexaError, ValueError):
    pass


# -----------------------------
# Logging
# -----------------------------
def setup_logging(level: Optional[str] = None) -> None:
    """Configures the root logger from CORTEXA_LOG (a level name or number)."""
    raw = (level or os.getenv("CORTEXA_LOG") or LOG_LEVEL).strip()
    resolved = int(raw) if raw.isdigit() else logging.getLevelName(raw.upper())
    if not isinstance(resolved, int):
        resolved = logging.WARNING
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", level=resolved, force=True)


# -----------------------------
# Run configuration
# -----------------------------
SUBCOMMANDS = ("thickness", "evaluate", "corr", "stitch", "patches", "phantom", "components", "interrater")


@dataclass
class RunConfig:
    subcommand: str
    inputs: Dict[str, str] = field(default_factory=dict)
    output: Optional[str] = None
    ribbon_radius_mm: float = RIBBON_RADIUS_MM
    snap_mm: float = SNAP_MM
    stride: int = STRIDE
    threshold: float = THRESHOLD
    connectivity: int = CONNECTIVITY
    percentile_method: str = PERCENTILE_METHOD
    threads: int = THREADS
    seed: int = SEED

    def validate(self) -> "RunConfig":
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"Unknown subcommand: {self.subcommand}")
        if self.ribbon_radius_mm <= 0:
            raise ConfigError("Ribbon radius must be positive.")
        if self.snap_mm < 0:
            raise ConfigError("Snap cap must be non-negative.")
        if not 1 <= self.stride <= PATCH_SIZE:
            raise ConfigError(f"Stride must lie in [1, {PATCH_SIZE}], got {self.stride}.")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"Threshold must lie in (0, 1), got {self.threshold}.")
        if self.connectivity not in (6, 18, 26):
            raise ConfigError(f"Connectivity must be 6, 18 or 26, got {self.connectivity}.")
        if self.percentile_method != PERCENTILE_METHOD:
            raise ConfigError(f"Only the '{PERCENTILE_METHOD}' percentile method is supported.")
        if self.threads < 1:
            raise ConfigError("Thread count must be at least 1.")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {"version": VERSION, **asdict(self)}


# -----------------------------
# Report persistence
# -----------------------------
def write_json(payload: Dict[str, Any], path: str | Path, config: Optional[RunConfig] = None) -> None:
    """Writes a JSON report, embedding the run configuration when one is given."""
    record = dict(payload)
    if config is not None:
        record["config"] = config.to_dict()
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, ensure_ascii=False, indent=2, sort_keys=False)


def write_csv(df: pd.DataFrame, path: str | Path, config: Optional[RunConfig] = None) -> None:
    """Writes a CSV report. The run configuration goes on a leading '#' comment line."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        if config is not None:
            f.write("# " + json.dumps(config.to_dict(), sort_keys=True) + "\n")
        df.to_csv(f, index=False, float_format="%.6f")


def read_csv(path: str | Path) -> pd.DataFrame:
    return pd.read_csv(path, comment="#", encoding="utf-8")
