"""
cortexa: cortical thickness and segmentation evaluation from the command line.

    python cortexa.py thickness --mask gm.nii.gz --landmarks lm.csv --output out/
    python cortexa.py evaluate --pred a.nii.gz --ref b.nii.gz --output out/
    python cortexa.py corr --auto auto.csv --manual manual.csv --plot --output out/

Exit codes: 0 success, 2 some landmarks failed (see the status column), 1 fatal.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

import utils
from modules import patch_pipeline, phantoms, stats, thickness
from modules.volume_core import (
    BinaryMask,
    connected_components,
    keep_largest_component,
    read_landmarks,
    read_nifti,
    write_nifti,
)
from utils import CortexaError, RunConfig

logger = logging.getLogger("cortexa")

EXIT_OK = 0
EXIT_FATAL = 1
EXIT_PARTIAL = 2


# -----------------------------
# Helpers
# -----------------------------
def _read_mask(path: str | Path) -> BinaryMask:
    return BinaryMask.from_volume(read_nifti(path))


def _out(config: RunConfig, name: str) -> Path:
    return Path(config.output) / name


def _triple(values: Sequence[float], flag: str) -> tuple:
    if len(values) == 1:
        return tuple(values) * 3
    if len(values) != 3:
        raise utils.ConfigError(f"{flag} takes one or three values.")
    return tuple(values)


# -----------------------------
# Subcommands
# -----------------------------
def cmd_thickness(args: argparse.Namespace, config: RunConfig) -> int:
    mask = _read_mask(args.mask)
    landmarks = read_landmarks(args.landmarks)
    report = thickness.thickness_at_landmarks(
        mask,
        landmarks,
        radius_mm=config.ribbon_radius_mm,
        snap_mm=config.snap_mm,
        threads=config.threads,
        eligible_only=args.eligible_only,
    )
    thickness.write_thickness_report(report, _out(config, "thickness.csv"), _out(config, "thickness.json"), config)
    if report.failures:
        logger.warning("%d of %d landmarks failed", report.failures, len(report))
        return EXIT_PARTIAL
    return EXIT_OK


def _batch_pairs(path: Path) -> List[Dict[str, str]]:
    df = utils.read_csv(path)
    missing = {"pred", "ref"} - set(df.columns)
    if missing:
        raise CortexaError(f"{path} is missing columns: {sorted(missing)}")

    def resolve(p: str) -> str:
        p = Path(p)
        return str(p if p.is_absolute() else path.parent / p)

    return [{"pred": resolve(row["pred"]), "ref": resolve(row["ref"])} for row in df.to_dict(orient="records")]


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    if args.batch:
        pairs = _batch_pairs(Path(args.batch))
        reports, summary = stats.evaluate_batch([(_read_mask(p["pred"]), _read_mask(p["ref"])) for p in pairs])
        rows = [{**p, **r.to_dict()} for p, r in zip(pairs, reports)]
        utils.write_csv(pd.DataFrame(rows), _out(config, "evaluate.csv"), config)
        utils.write_json({"pairs": rows, "summary": summary}, _out(config, "evaluate.json"), config)
        return EXIT_OK

    if not (args.pred and args.ref):
        raise utils.ConfigError("evaluate needs --pred and --ref, or --batch.")
    report = stats.evaluate_pair(_read_mask(args.pred), _read_mask(args.ref))
    row = {"pred": str(args.pred), "ref": str(args.ref), **report.to_dict()}
    utils.write_csv(pd.DataFrame([row]), _out(config, "evaluate.csv"), config)
    utils.write_json(report.to_dict(), _out(config, "evaluate.json"), config)
    return EXIT_OK


def cmd_corr(args: argparse.Namespace, config: RunConfig) -> int:
    auto = thickness.read_thickness_table(args.auto)
    manual = thickness.read_thickness_table(args.manual)
    table = thickness.compare_thickness(auto, manual, min_subjects=args.min_subjects)
    logger.info("%d regions with r > 0.6, %d significant, %d with ICC > 0.7",
                table.strong, table.significant, table.reliable)
    utils.write_json(table.to_dict(), _out(config, "corr.json"), config)
    utils.write_csv(table.to_frame(), _out(config, "corr.csv"), config)
    utils.write_csv(table.pairs_frame(), _out(config, "pairs.csv"), config)
    if args.plot:
        from modules.plotting import plot_correlations

        plot_correlations(table, _out(config, "corr.png"))
    return EXIT_OK


def cmd_stitch(args: argparse.Namespace, config: RunConfig) -> int:
    image = read_nifti(args.image)
    if args.tiles_dir:
        predictor = patch_pipeline.TileDirectoryPredictor(args.tiles_dir)
    else:
        predictor = patch_pipeline.ThresholdPredictor(args.predictor_level)
    mask = patch_pipeline.stitch(
        image,
        predictor,
        stride=config.stride,
        threshold=config.threshold,
        gaussian=args.gaussian,
        threads=config.threads,
    )
    write_nifti(mask, _out(config, "mask.nii.gz"), config)
    summary = {
        "dims": list(mask.dims),
        "tiles": len(patch_pipeline.tile_origins(image.dims, config.stride)),
        "foreground_voxels": mask.count,
        "gaussian": bool(args.gaussian),
    }
    utils.write_json(summary, _out(config, "stitch.json"), config)
    return EXIT_OK


def cmd_patches(args: argparse.Namespace, config: RunConfig) -> int:
    image = read_nifti(args.image)
    if args.landmarks:
        records = []
        for name, patch in patch_pipeline.sample_patches(image, read_landmarks(args.landmarks)):
            file_name = f"patch_{name}.nii.gz"
            write_nifti(patch_pipeline.patch_volume(image, patch), _out(config, file_name), config)
            records.append({"file": file_name, "landmark": name, "origin": list(patch.origin),
                            "padded_voxels": patch.padded_voxels, **asdict(patch.normalization)})
    else:
        records = patch_pipeline.write_tiles(image, _out(config, "tiles"), config.stride, config)
    utils.write_json({"patches": records}, _out(config, "patches.json"), config)
    return EXIT_OK


def cmd_phantom(args: argparse.Namespace, config: RunConfig) -> int:
    spec = phantoms.PhantomSpec(
        kind=args.kind,
        dims=tuple(int(d) for d in _triple(args.dims, "--dims")),
        spacing=_triple(args.spacing, "--spacing"),
        thickness_mm=args.thickness_mm,
        radius_mm=args.radius_mm,
        amplitude_mm=args.amplitude_mm,
        wavelength_mm=args.wavelength_mm,
        rotation_deg=_triple(args.rotation_deg, "--rotation-deg"),
        jitter=args.jitter,
        seed=config.seed,
        n_landmarks=args.n_landmarks,
    )
    phantoms.write_phantom(phantoms.generate(spec), config.output, config)
    return EXIT_OK


def cmd_components(args: argparse.Namespace, config: RunConfig) -> int:
    mask = _read_mask(args.mask)
    labels, sizes = connected_components(mask, config.connectivity)
    write_nifti(labels, _out(config, "labels.nii.gz"), config)
    frame = pd.DataFrame({"label": range(1, len(sizes) + 1), "voxels": sizes})
    utils.write_csv(frame, _out(config, "components.csv"), config)
    utils.write_json({"components": len(sizes), "sizes": sizes}, _out(config, "components.json"), config)
    if args.keep_largest:
        write_nifti(keep_largest_component(mask, config.connectivity), _out(config, "mask.nii.gz"), config)
    return EXIT_OK


def _rater_dirs(values: Sequence[str]) -> Dict[str, Path]:
    raters: Dict[str, Path] = {}
    for value in values:
        name, sep, directory = value.partition("=")
        if not sep or not name or not directory:
            raise utils.ConfigError(f"--rater expects NAME=DIR, got '{value}'.")
        raters[name] = Path(directory)
    return raters


def cmd_interrater(args: argparse.Namespace, config: RunConfig) -> int:
    masks = {}
    for name, directory in _rater_dirs(args.rater).items():
        if not directory.is_dir():
            raise CortexaError(f"Rater directory not found: {directory}")
        files = sorted(p for p in directory.iterdir() if p.name.endswith((".nii", ".nii.gz")))
        masks[name] = [_read_mask(p) for p in files]
    agreements = patch_pipeline.interrater_dsc(masks)
    rows = [a.to_dict() for a in agreements]
    frame = pd.DataFrame([{k: v for k, v in row.items() if k != "dsc"} for row in rows])
    utils.write_csv(frame, _out(config, "interrater.csv"), config)
    utils.write_json({"pairs": rows}, _out(config, "interrater.json"), config)
    for a in agreements:
        print(f"Raters {a.rater_a}&{a.rater_b}: {a.formatted}")
    return EXIT_OK


HANDLERS = {
    "thickness": cmd_thickness,
    "evaluate": cmd_evaluate,
    "corr": cmd_corr,
    "stitch": cmd_stitch,
    "patches": cmd_patches,
    "phantom": cmd_phantom,
    "components": cmd_components,
    "interrater": cmd_interrater,
}


# -----------------------------
# Argument parsing
# -----------------------------
def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", "-o", required=True, help="Output directory")
    common.add_argument("--ribbon-radius-mm", type=float, default=utils.RIBBON_RADIUS_MM)
    common.add_argument("--snap-mm", type=float, default=utils.SNAP_MM)
    common.add_argument("--stride", type=int, default=utils.STRIDE)
    common.add_argument("--threshold", type=float, default=utils.THRESHOLD)
    common.add_argument("--connectivity", type=int, default=utils.CONNECTIVITY)
    common.add_argument("--threads", type=int, default=utils.THREADS)
    common.add_argument("--seed", type=int, default=utils.SEED)
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cortexa", description="Cortical thickness and segmentation evaluation.")
    parser.add_argument("--version", action="version", version=f"cortexa {utils.VERSION}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    common = _common()

    p = sub.add_parser("thickness", parents=[common], help="Thickness at landmarks")
    p.add_argument("--mask", required=True)
    p.add_argument("--landmarks", required=True, help="CSV with name,x,y,z in mm")
    p.add_argument("--eligible-only", action="store_true", help="Skip landmarks flagged ineligible in the catalog")

    p = sub.add_parser("evaluate", parents=[common], help="Dice and HD95")
    p.add_argument("--pred")
    p.add_argument("--ref")
    p.add_argument("--batch", help="CSV with pred,ref columns")

    p = sub.add_parser("corr", parents=[common], help="Automated vs manual thickness correlation")
    p.add_argument("--auto", nargs="+", required=True)
    p.add_argument("--manual", nargs="+", required=True)
    p.add_argument("--min-subjects", type=int, default=3)
    p.add_argument("--plot", action="store_true", help="Also write corr.png")

    p = sub.add_parser("stitch", parents=[common], help="Sliding-window mask assembly")
    p.add_argument("--image", required=True)
    p.add_argument("--tiles-dir", help="Directory of tile_<x>_<y>_<z>.nii.gz probabilities")
    p.add_argument("--predictor-level", type=float, default=0.5)
    p.add_argument("--gaussian", action="store_true")

    p = sub.add_parser("patches", parents=[common], help="Export 64^3 patches")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", help="Landmark-centred patches instead of the tiling grid")

    p = sub.add_parser("phantom", parents=[common], help="Synthetic phantom with known thickness")
    p.add_argument("--kind", choices=phantoms.KINDS, default="slab")
    p.add_argument("--dims", type=int, nargs="+", default=[64])
    p.add_argument("--spacing", type=float, nargs="+", default=[0.3])
    p.add_argument("--thickness-mm", type=float, default=2.4)
    p.add_argument("--radius-mm", type=float, default=5.0)
    p.add_argument("--amplitude-mm", type=float, default=5.0)
    p.add_argument("--wavelength-mm", type=float, default=20.0)
    p.add_argument("--rotation-deg", type=float, nargs="+", default=[0.0])
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--n-landmarks", type=int, default=10)

    p = sub.add_parser("components", parents=[common], help="Connected components")
    p.add_argument("--mask", required=True)
    p.add_argument("--keep-largest", action="store_true")

    p = sub.add_parser("interrater", parents=[common], help="Pairwise Dice between raters")
    p.add_argument("--rater", action="append", required=True, help="NAME=DIR of mask files; repeat per rater")
    return parser


def _config_from_args(args: argparse.Namespace) -> RunConfig:
    input_keys = ("mask", "landmarks", "pred", "ref", "batch", "auto", "manual", "image", "tiles_dir", "rater")
    inputs = {}
    for key in input_keys:
        value = getattr(args, key, None)
        if value:
            inputs[key] = ",".join(value) if isinstance(value, list) else str(value)
    return RunConfig(
        subcommand=args.subcommand,
        inputs=inputs,
        output=str(args.output),
        ribbon_radius_mm=args.ribbon_radius_mm,
        snap_mm=args.snap_mm,
        stride=args.stride,
        threshold=args.threshold,
        connectivity=args.connectivity,
        threads=args.threads,
        seed=args.seed,
    ).validate()


def main(argv: Optional[Sequence[str]] = None) -> int:
    utils.setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_FATAL

    try:
        config = _config_from_args(args)
        Path(config.output).mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.subcommand](args, config)
    except (CortexaError, OSError, ValueError, KeyError) as e:
        logger.debug("Fatal error", exc_info=True)
        print(f"cortexa {args.subcommand}: error: {e}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
