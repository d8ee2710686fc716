"""
Command-line entry point.

    python -m src.main tables fit --out tables.abt [--fast]
    python -m src.main aggregate build scene.json --max-res 32 --out scene.agg
    python -m src.main render lod scene.agg lights.json camera.json --spp 16 --out img.pfm
    python -m src.main render ref scene.json camera.json --spp 64 --out ref.pfm
    python -m src.main validate absdf scene.agg --voxel 3,4,5 --out grid.png
    python -m src.main diff a.pfm b.pfm

Exit codes: 0 success, 2 usage or input errors, 3 validation threshold not
met, 1 anything else.
"""

import argparse
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Any, Optional

import numba
from colorama import Fore, Style, init as colorama_init

from src.aggregate.builder import build_aggregate
from src.aggregate.store import AggregateFormatError, SceneAggregate, load_aggregate, save_aggregate
from src.core.tables import TableFormatError, build_tables, check_tables, load_tables, save_tables
from src.render.lod import render
from src.tracer.camera import PinholeCamera
from src.tracer.reference import render_reference
from src.tracer.scene import SceneLoader, SceneSchemaError
from src.utils.config import (
    AggregateSettings,
    ReferenceSettings,
    RenderSettings,
    TableFitSettings,
    default_tables_path,
    load_environment,
    resolve_settings,
)
from src.utils.image_io import ImageFormatError, read_image, write_image
from src.utils.logging_setup import configure_logging
from src.utils.metrics import format_psnr, psnr, rmse
from src.utils.security import SecurityError, safe_write_bytes
from src.utils.validation import validate_abv, validate_absdf, validate_aiv

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_THRESHOLD = 3

_INPUT_ERRORS = (
    FileNotFoundError,
    SceneSchemaError,
    SecurityError,
    TableFormatError,
    AggregateFormatError,
    ImageFormatError,
)


class ThresholdError(Exception):
    """Raised when a validation metric misses its requested threshold."""


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(_plain(payload), indent=2, default=_json_default) if args.json else text)


def _plain(value):
    """JSON-safe copy; infinite floats become the string "inf"."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return value


def _json_default(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    return str(value)


def _write_sidecar(out: Path, payload: dict) -> Path:
    """<out>.json next to an artifact, holding the effective settings."""
    text = json.dumps(_plain(payload), indent=2, sort_keys=True, default=_json_default)
    return safe_write_bytes(Path(str(out) + ".json"), text.encode("utf-8"))


def _flags(args, mapping: dict[str, str]) -> dict[str, Any]:
    """Settings layer from the flags the user actually gave."""
    return {field: getattr(args, attr) for field, attr in mapping.items() if getattr(args, attr, None) is not None}


def _set_threads(workers: int) -> None:
    numba.set_num_threads(max(1, min(workers, numba.config.NUMBA_NUM_THREADS)))


def _parse_voxel(text: str) -> tuple[int, int, int]:
    try:
        coords = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"voxel must be i,j,k, got {text!r}")
    if len(coords) != 3:
        raise argparse.ArgumentTypeError(f"voxel must be i,j,k, got {text!r}")
    return coords


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}")
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError(f"grid must be positive, got {text!r}")
    return rows, cols


def resolve_tables(args, aggregate: Optional[SceneAggregate] = None):
    """--tables, then the file recorded in the aggregate, then AGGLOD_TABLES."""
    recorded = (aggregate.tables if aggregate is not None else {}) or {}
    path = args.tables or recorded.get("path") or default_tables_path()
    tables = load_tables(path)
    digest = recorded.get("sha256")
    if digest and hashlib.sha256(Path(path).read_bytes()).hexdigest() != digest:
        logging.warning(f"Tables {path} differ from the ones the aggregate was built with")
    return tables


def _load_scene_for(args, aggregate: SceneAggregate, loader: SceneLoader):
    path = args.scene or aggregate.scene_path
    if not path:
        raise FileNotFoundError("The aggregate records no scene path; pass --scene")
    scene = loader.load_scene(path)
    if aggregate.scene_hash and scene.scene_hash != aggregate.scene_hash:
        logging.warning(f"Scene {path} changed since the aggregate was built")
    return scene


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_tables_fit(args) -> int:
    overrides = _flags(args, {"seed": "seed", "workers": "workers"})
    settings = TableFitSettings.fast(**overrides) if args.fast else resolve_settings(TableFitSettings, overrides)
    started = time.perf_counter()
    tables = build_tables(settings)
    save_tables(tables, args.out)
    problems = check_tables(tables)
    for problem in problems:
        logging.warning(problem)
    _write_sidecar(Path(args.out), {"command": "tables fit", "settings": settings.model_dump(),
                                    "seconds": time.perf_counter() - started})
    flagged = {name: len(r.get("flagged", [])) for name, r in tables.report.items()}
    single_lobe = tables.report["beta_lobes"].get("single_lobe_nodes", 0)
    _emit(args, {"out": args.out, "flagged": flagged, "single_lobe_nodes": single_lobe, "problems": problems},
          f"Wrote {args.out}; flagged nodes: " + ", ".join(f"{k}={v}" for k, v in flagged.items())
          + f"; M2 single-lobe nodes={single_lobe}")
    return EXIT_OK


def cmd_tables_check(args) -> int:
    tables = load_tables(args.path or default_tables_path())
    problems = check_tables(tables)
    lines = []
    for name, report in tables.report.items():
        lines.append(
            f"{name:11s} nodes={report.get('nodes', 0):6d} median={report.get('median_residual', 0.0):.3e} "
            f"max={report.get('max_residual', 0.0):.3e} flagged={len(report.get('flagged', []))}"
        )
        if "single_lobe_nodes" in report:
            lines[-1] += f" single_lobe={report['single_lobe_nodes']}"
    lines.extend(f"PROBLEM: {p}" for p in problems)
    _emit(args, {"report": tables.report, "problems": problems}, "\n".join(lines))
    return EXIT_THRESHOLD if problems else EXIT_OK


_AGGREGATE_FLAGS = {
    "max_resolution": "max_res",
    "min_resolution": "min_res",
    "budget": "budget",
    "vis_rays": "vis_rays",
    "ndf_k": "ndf_k",
    "cpca_clusters": "cpca_clusters",
    "cpca_reps_aiv": "cpca_reps_aiv",
    "cpca_reps_abv": "cpca_reps_abv",
    "abv_rays_per_texel": "abv_rays",
    "seed": "seed",
    "workers": "workers",
}


def cmd_aggregate_build(args) -> int:
    loader = SceneLoader()
    doc = loader.load_scene_document(args.scene)
    flags = _flags(args, _AGGREGATE_FLAGS)
    if args.no_cpca:
        flags["cpca"] = False
    settings = resolve_settings(AggregateSettings, doc.aggregate, flags)
    _set_threads(settings.workers)
    scene = loader.load_scene(args.scene)
    started = time.perf_counter()
    aggregate = build_aggregate(scene, settings, tables_path=args.tables or default_tables_path())
    save_aggregate(aggregate, args.out)
    summary = aggregate.summary()
    _write_sidecar(Path(args.out), {"command": "aggregate build", "settings": settings.model_dump(),
                                    "summary": summary, "seconds": time.perf_counter() - started})
    lines = [f"Wrote {args.out}"] + [
        f"  {lvl['resolution']:4d}^3  voxels={lvl['voxels']:7d}  faces={lvl['faces']:7d}  "
        f"fraction={100.0 * lvl['fraction']:.2f}%  aiv={lvl['aiv']}  abv={lvl['abv']}"
        for lvl in summary["levels"]
    ]
    _emit(args, summary, "\n".join(lines))
    return EXIT_OK


def cmd_aggregate_info(args) -> int:
    aggregate = load_aggregate(args.path)
    summary = aggregate.summary()
    summary["params"] = aggregate.params
    summary["tables"] = aggregate.tables
    lines = [f"{args.path}: origin {summary['origin']} size {summary['size']:.4g}"] + [
        f"  {lvl['resolution']:4d}^3  voxels={lvl['voxels']}  faces={lvl['faces']}" for lvl in summary["levels"]
    ]
    _emit(args, summary, "\n".join(lines))
    return EXIT_OK


_RENDER_FLAGS = {
    "spp": "spp",
    "nee": "nee",
    "seed": "seed",
    "level": "level",
    "primitive": "primitive",
    "diffuse_mode": "diffuse_mode",
    "batch_cones": "batch_cones",
    "workers": "workers",
}


def _render_block(loader: SceneLoader, aggregate: SceneAggregate) -> Optional[dict]:
    """The ``render`` block of the scene the aggregate came from, when that file is still around."""
    if not aggregate.scene_path or not Path(aggregate.scene_path).is_file():
        return None
    return loader.load_scene_document(aggregate.scene_path).render


def cmd_render_lod(args) -> int:
    loader = SceneLoader()
    aggregate = load_aggregate(args.aggregate)
    lights = loader.load_lights(args.lights)
    camera = PinholeCamera.from_document(loader.load_camera(args.camera))
    settings = resolve_settings(RenderSettings, _render_block(loader, aggregate), _flags(args, _RENDER_FLAGS))
    _set_threads(settings.workers)
    tables = resolve_tables(args, aggregate)
    started = time.perf_counter()
    image = render(aggregate, lights, camera, tables, settings)
    write_image(args.out, image, args.exposure)
    seconds = time.perf_counter() - started
    _write_sidecar(Path(args.out), {"command": "render lod", "settings": settings.model_dump(exclude={"workers"}),
                                    "aggregate": str(args.aggregate), "seconds": seconds})
    _emit(args, {"out": args.out, "seconds": seconds}, f"Wrote {args.out} in {seconds:.1f} s")
    return EXIT_OK


def cmd_render_ref(args) -> int:
    loader = SceneLoader()
    scene = loader.load_scene(args.scene)
    if args.lights:
        scene = scene.with_lights(loader.load_lights(args.lights))
    camera = PinholeCamera.from_document(loader.load_camera(args.camera))
    settings = resolve_settings(ReferenceSettings, _flags(args, {"spp": "spp", "seed": "seed", "tile_size": "tile_size",
                                                                 "workers": "workers"}))
    _set_threads(settings.workers)
    started = time.perf_counter()
    image = render_reference(scene, camera, settings)
    write_image(args.out, image, args.exposure)
    seconds = time.perf_counter() - started
    _write_sidecar(Path(args.out), {"command": "render ref", "settings": settings.model_dump(exclude={"workers"}),
                                    "scene": str(args.scene), "seconds": seconds})
    _emit(args, {"out": args.out, "seconds": seconds}, f"Wrote {args.out} in {seconds:.1f} s")
    return EXIT_OK


def cmd_validate(args) -> int:
    loader = SceneLoader()
    aggregate = load_aggregate(args.aggregate)
    scene = _load_scene_for(args, aggregate, loader)
    seed = args.seed if args.seed is not None else int(aggregate.params.get("seed", 0))
    if args.kind == "absdf":
        report = validate_absdf(scene, aggregate, resolve_tables(args, aggregate), args.voxel, args.resolution,
                                slices=args.slices, texels=args.texels, samples=args.samples, seed=seed)
    elif args.kind == "aiv":
        report = validate_aiv(scene, aggregate, args.voxel, args.resolution,
                              rays_per_sample=args.rays or 256, seed=seed)
    else:
        report = validate_abv(scene, aggregate, args.voxel, args.resolution,
                              rays_per_texel=args.rays or 16, seed=seed)
    if args.out:
        write_image(args.out, report.mosaic)
    _emit(args, report.to_dict(), f"{report.kind} voxel {args.voxel}: PSNR {format_psnr(report.psnr)} dB")
    if args.min_psnr is not None and report.psnr < args.min_psnr:
        raise ThresholdError(f"PSNR {format_psnr(report.psnr)} dB below --min-psnr {args.min_psnr}")
    return EXIT_OK


def cmd_diff(args) -> int:
    a = read_image(args.a).pixels
    b = read_image(args.b).pixels
    if a.shape != b.shape:
        raise ValueError(f"Image sizes differ: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}")
    error = rmse(a, b)
    value = psnr(a, b)
    _emit(args, {"rmse": error, "psnr": value}, f"RMSE {error:.6g}  PSNR {format_psnr(value)} dB")
    if args.max_rmse is not None and error > args.max_rmse:
        raise ThresholdError(f"RMSE {error:.6g} above --max-rmse {args.max_rmse}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="Print results as one JSON object")
    common.add_argument("--quiet", action="store_true", help="Only warnings and errors")
    common.add_argument("--verbose", action="store_true", help="Debug logging")
    common.add_argument("--seed", type=int, default=None, help="Random seed (default AGGLOD_SEED or 0)")
    common.add_argument("--workers", type=int, default=None, help="Worker processes and numba threads (default AGGLOD_WORKERS)")
    common.add_argument("--tables", default=None, help="Precomputed table file (default AGGLOD_TABLES)")

    parser = argparse.ArgumentParser(prog="agglod", description="Scene aggregation and level-of-detail rendering")
    commands = parser.add_subparsers(dest="command", required=True)

    tables = commands.add_parser("tables", help="Fit or inspect the precomputed tables").add_subparsers(
        dest="action", required=True
    )
    fit = tables.add_parser("fit", parents=[common], help="Fit all tables")
    fit.add_argument("--out", required=True, help="Output .abt file")
    fit.add_argument("--fast", action="store_true", help="Coarse grids for tests and CI")
    fit.set_defaults(func=cmd_tables_fit)
    check = tables.add_parser("check", parents=[common], help="Print the fit report")
    check.add_argument("path", nargs="?", default=None, help="Table file (default AGGLOD_TABLES)")
    check.set_defaults(func=cmd_tables_check)

    aggregate = commands.add_parser("aggregate", help="Build or inspect aggregates").add_subparsers(
        dest="action", required=True
    )
    build = aggregate.add_parser("build", parents=[common], help="Precompute a scene aggregate")
    build.add_argument("scene", help="Scene JSON document")
    build.add_argument("--out", required=True, help="Output .agg file")
    build.add_argument("--max-res", type=int, default=None, help="Finest resolution (power of two)")
    build.add_argument("--min-res", type=int, default=None, help="Coarsest resolution (power of two)")
    build.add_argument("--budget", type=int, default=None, help="Sample budget constant C")
    build.add_argument("--vis-rays", type=int, default=None, help="AIV rays per surface sample")
    build.add_argument("--ndf-k", type=int, default=None, help="Maximum SGGX lobes")
    build.add_argument("--cpca-clusters", type=int, default=None)
    build.add_argument("--cpca-reps-aiv", type=int, default=None)
    build.add_argument("--cpca-reps-abv", type=int, default=None)
    build.add_argument("--abv-rays", type=int, default=None, help="ABV rays per texel")
    build.add_argument("--no-cpca", action="store_true", help="Wavelet truncation only")
    build.set_defaults(func=cmd_aggregate_build)
    info = aggregate.add_parser("info", parents=[common], help="Summarize an aggregate file")
    info.add_argument("path")
    info.set_defaults(func=cmd_aggregate_info)

    render_cmd = commands.add_parser("render", help="Render images").add_subparsers(dest="action", required=True)
    lod = render_cmd.add_parser("lod", parents=[common], help="Render an aggregate")
    lod.add_argument("aggregate")
    lod.add_argument("lights")
    lod.add_argument("camera")
    lod.add_argument("--out", required=True, help="Output .pfm or .png")
    lod.add_argument("--spp", type=int, default=None)
    lod.add_argument("--nee", type=int, default=None, help="Light samples per voxel")
    lod.add_argument("--level", type=int, default=None, help="Force a level (0 = finest)")
    lod.add_argument("--primitive", choices=["ellipsoid", "cube"], default=None)
    lod.add_argument("--diffuse-mode", choices=["quadrature", "sg"], default=None)
    lod.add_argument("--batch-cones", type=int, default=None)
    lod.add_argument("--exposure", type=float, default=0.0, help="Stops applied to PNG output")
    lod.set_defaults(func=cmd_render_lod)
    ref = render_cmd.add_parser("ref", parents=[common], help="Render the triangle scene directly")
    ref.add_argument("scene")
    ref.add_argument("camera")
    ref.add_argument("--out", required=True)
    ref.add_argument("--lights", default=None, help="Replace the scene lights")
    ref.add_argument("--spp", type=int, default=None)
    ref.add_argument("--tile-size", type=int, default=None)
    ref.add_argument("--exposure", type=float, default=0.0)
    ref.set_defaults(func=cmd_render_ref)

    validate = commands.add_parser("validate", parents=[common], help="Compare stored data against oracles")
    validate.add_argument("kind", choices=["absdf", "aiv", "abv"])
    validate.add_argument("aggregate")
    validate.add_argument("--voxel", type=_parse_voxel, required=True, help="Voxel coordinates i,j,k")
    validate.add_argument("--resolution", type=int, default=None, help="Level resolution (default finest)")
    validate.add_argument("--scene", default=None, help="Scene document (default: the recorded one)")
    validate.add_argument("--slices", type=_parse_grid, default=(8, 8), help="w_o slice grid, e.g. 8x8")
    validate.add_argument("--texels", type=_parse_grid, default=(8, 16), help="w_i texels per slice")
    validate.add_argument("--samples", type=int, default=8192, help="Oracle surface samples")
    validate.add_argument("--rays", type=int, default=None, help="Reference rays (per sample or per texel)")
    validate.add_argument("--min-psnr", type=float, default=None, help="Exit 3 below this PSNR")
    validate.add_argument("--out", default=None, help="Mosaic PNG")
    validate.set_defaults(func=cmd_validate)

    diff = commands.add_parser("diff", parents=[common], help="RMSE and PSNR of two images")
    diff.add_argument("a")
    diff.add_argument("b")
    diff.add_argument("--max-rmse", type=float, default=None, help="Exit 3 above this RMSE")
    diff.set_defaults(func=cmd_diff)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    load_environment()
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging("DEBUG" if args.verbose else "WARNING" if args.quiet else None)
    colorama_init()
    try:
        return args.func(args)
    except ThresholdError as e:
        print(f"{Fore.RED}ERROR: {e}{Style.RESET_ALL}", file=sys.stderr)
        return EXIT_THRESHOLD
    except _INPUT_ERRORS as e:
        print(f"{Fore.RED}ERROR: {e}{Style.RESET_ALL}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:
        print(f"{Fore.RED}ERROR: {e}{Style.RESET_ALL}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logging.debug("Unhandled failure", exc_info=True)
        print(f"{Fore.RED}ERROR: {e}{Style.RESET_ALL}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
