"""Command-line pipeline: build-tiles, gen-queries, index, localize, evaluate.

Exit codes: 0 success, 2 I/O failure, 3 malformed input, 4 internal
invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .evaluation import EvalConfig, dump_report, per_query_csv, report
from .geodata import (GeoPoint, OSMParseError, ProjectionRangeError, landmark_city, load_map,
                      read_trajectory_local, synth_city, write_trajectory_local)
from .localizer import TextToMapLocalizer
from .matching import IndexFormatError, build_index, load_index, save_index
from .textgen import (DEFAULT_OFFSET_FRAC, HintParseError, RecordValidationError, derive_seed,
                      generate_query, rarity_weights, read_dataset, write_dataset)
from .tiler import (Cropper, RasterFormatError, TileSpec, load_tiles, rasterize, save_debug_png,
                    save_tiles)
from .visibility import PolarSpec
from .vocab import UnknownClassError

EXIT_OK, EXIT_IO, EXIT_FORMAT, EXIT_INTERNAL = 0, 2, 3, 4
MANIFEST = "manifest.json"

log = logging.getLogger("textmaploc")


class InvariantViolation(RuntimeError):
    """An internal consistency check failed."""


class InputFormatError(ValueError):
    pass


_FORMAT_ERRORS = (OSMParseError, ProjectionRangeError, RasterFormatError, IndexFormatError,
                  HintParseError, RecordValidationError, UnknownClassError, InputFormatError,
                  json.JSONDecodeError, UnicodeDecodeError, KeyError, ValueError)


@dataclass
class RunConfig:
    H: float = 50.0
    delta: float = 0.25
    U: int = 25
    V: int = 360
    sigma: float = 3.0
    offset_frac: float = DEFAULT_OFFSET_FRAC
    stride: float = 1.0
    seed: int = 0
    order: str = "TNSWE"
    paths: dict = field(default_factory=dict)

    def tile_spec(self) -> TileSpec:
        return TileSpec(self.H, self.delta)

    def polar(self) -> PolarSpec:
        return PolarSpec(self.H, self.U, self.V, self.sigma)

    def to_dict(self) -> dict:
        return asdict(self)


def resolve_seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("TOL_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise InputFormatError(f"TOL_SEED must be an integer, got {env!r}") from None


def _config(args, **paths) -> RunConfig:
    cfg = RunConfig()
    for name in ("H", "delta", "U", "V", "sigma", "offset_frac", "stride", "order"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    if getattr(args, "H", None) is not None and getattr(args, "U", None) is None:
        cfg.U = max(1, int(round(cfg.H / 2)))
    cfg.seed = resolve_seed(getattr(args, "seed", None))
    cfg.paths = {k: str(v) for k, v in paths.items() if v is not None}
    return cfg


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _read_manifest(tiles_dir: Path) -> dict:
    path = tiles_dir / MANIFEST
    if not path.exists():
        return {}
    return json.loads(path.read_text(encoding="utf-8"))


def _tiles_config(args, tiles_dir: Path, **paths) -> RunConfig:
    """Run config whose tile geometry comes from the tiles manifest when present."""
    cfg = _config(args, tiles=tiles_dir, **paths)
    built = _read_manifest(tiles_dir).get("config", {})
    for name in ("H", "delta"):
        if name in built and getattr(args, name, None) is None:
            setattr(cfg, name, built[name])
    if getattr(args, "U", None) is None:
        cfg.U = built.get("U", max(1, int(round(cfg.H / 2))))
    return cfg


def _load_tiles(tiles_dir: Path):
    if not tiles_dir.is_dir():
        raise FileNotFoundError(f"tiles directory not found: {tiles_dir}")
    tiles = load_tiles(tiles_dir)
    if not tiles:
        raise InputFormatError(f"no tiles listed in {tiles_dir}")
    return tiles


# -- subcommands -------------------------------------------------------------

def cmd_synth_city(args) -> int:
    cfg = _config(args, map=args.map, trajectory=args.trajectory)
    if args.kind == "landmark":
        elements, centers = landmark_city(args.sites, cfg.seed, args.spacing)
    else:
        elements = synth_city(cfg.seed, args.extent)
        step = cfg.H / 2
        half = args.extent / 2 - cfg.H / 2
        n = max(1, int(2 * half // step) + 1)
        centers = [(-half + i * step, -half + j * step) for j in range(n) for i in range(n)]
    Path(args.map).write_text(elements.to_jsonl(), encoding="utf-8")
    write_trajectory_local(args.trajectory, centers)
    log.info("wrote %d elements and %d frames", len(elements.elements), len(centers))
    return EXIT_OK


def cmd_build_tiles(args) -> int:
    out = Path(args.out)
    cfg = _config(args, map=args.map, trajectory=args.trajectory, out=out)
    spec = cfg.tile_spec()
    origin = GeoPoint(*args.origin) if args.origin else None
    elements = load_map(args.map, origin)
    frames, xy = read_trajectory_local(args.trajectory, elements.origin)
    cropper = Cropper(elements)
    bounds = elements.bounds()
    half = spec.half

    def build(i: int):
        cx, cy = float(xy[i, 0]), float(xy[i, 1])
        tile_id = f"tile_{i:06d}"
        outside = bounds is None or (cx + half < bounds[0] or cx - half > bounds[2]
                                     or cy + half < bounds[1] or cy - half > bounds[3])
        if outside:
            log.warning("frame %d at (%.1f, %.1f) lies outside the map extent; empty tile", i, cx, cy)
            local = []
        else:
            local = cropper.crop((cx, cy), spec)
        raster = rasterize(local, spec, center=frames[i], center_xy=(cx, cy), tile_id=tile_id)
        if not raster.check_channel_purity():
            raise InvariantViolation(f"{tile_id}: class ids in the wrong channel")
        return raster

    jobs = max(1, args.jobs)
    if jobs == 1:
        rasters = [build(i) for i in range(len(frames))]
    else:
        with ThreadPoolExecutor(jobs) as pool:
            rasters = list(pool.map(build, range(len(frames))))
    save_tiles(out, rasters)
    _write_json(out / MANIFEST, {"n_tiles": len(rasters), "config": cfg.to_dict()})
    if args.render:
        for r in rasters:
            save_debug_png(r, out / f"{r.tile_id}.png")
    log.info("wrote %d tiles to %s", len(rasters), out)
    return EXIT_OK


def cmd_gen_queries(args) -> int:
    tiles_dir = Path(args.tiles)
    cfg = _tiles_config(args, tiles_dir, out=args.out)
    tiles = _load_tiles(tiles_dir)
    polar = cfg.polar()
    rarity = rarity_weights(tiles)
    records = [
        generate_query(t, rarity, derive_seed(cfg.seed, i), polar=polar,
                       offset_frac=cfg.offset_frac, query_id=f"q_{t.tile_id}")
        for i, t in enumerate(tiles)
    ]
    write_dataset(args.out, records)
    _write_json(Path(str(args.out) + ".config.json"), {"n_queries": len(records), "config": cfg.to_dict()})
    log.info("wrote %d queries to %s", len(records), args.out)
    return EXIT_OK


def cmd_index(args) -> int:
    tiles_dir = Path(args.tiles)
    cfg = _tiles_config(args, tiles_dir, out=args.out)
    tiles = _load_tiles(tiles_dir)
    index = build_index(tiles, cfg.polar(), cfg.order, {"run": cfg.to_dict()})
    if len(index) != len(tiles):
        raise InvariantViolation("index row count differs from tile count")
    save_index(index, args.out)
    log.info("indexed %d tiles into %s", len(index), args.out)
    return EXIT_OK


def _localizer(args, cfg: RunConfig):
    index = load_index(args.index)
    tiles = _load_tiles(Path(args.tiles))
    est = TextToMapLocalizer.from_index(index, tiles, n_candidates=args.K, stride=cfg.stride,
                                        offset_frac=cfg.offset_frac)
    return est, index


def _sentences(args) -> list[str]:
    if args.text_file:
        lines = Path(args.text_file).read_text(encoding="utf-8").splitlines()
        return [ln.strip() for ln in lines if ln.strip()]
    if not args.text:
        raise InputFormatError("give five sentences with --text or a file with --text-file")
    return list(args.text)


def cmd_localize(args) -> int:
    cfg = _tiles_config(args, Path(args.tiles), index=args.index)
    est, _ = _localizer(args, cfg)
    sentences = _sentences(args)
    if len(sentences) != 5:
        raise InputFormatError(f"expected 5 sentences, got {len(sentences)}")
    loc = est.localize(sentences)
    doc = loc.to_dict()
    doc["config"] = cfg.to_dict()
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _tiles_config(args, Path(args.tiles), index=args.index, dataset=args.dataset,
                        report=args.report)
    est, _ = _localizer(args, cfg)
    records = read_dataset(args.dataset)
    if not records:
        raise InputFormatError(f"no records in {args.dataset}")
    results = est.evaluate(records)
    digest = hashlib.sha256(Path(args.index).read_bytes()).hexdigest()
    meta = {"seed": cfg.seed, "index_sha256": digest, "config": cfg.to_dict()}
    doc = report(results, EvalConfig(), meta, verbose=args.verbose)
    Path(args.report).write_text(dump_report(doc), encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(per_query_csv(results), encoding="utf-8")
    log.info("R@1 (eta=25) %.4f, median error %.2f m",
             doc["recall"].get("eta=25", {}).get("R@1", float("nan")), doc["median_error"])
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def _spec_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("geometry")
    g.add_argument("--H", type=float, help="tile side in meters (default 50)")
    g.add_argument("--delta", type=float, help="meters per pixel (default 0.25)")
    g.add_argument("--U", type=int, help="radial bins (default H/2)")
    g.add_argument("--V", type=int, help="angular bins (default 360)")
    g.add_argument("--sigma", type=float, help="top-region radius in meters (default 3)")
    g.add_argument("--order", help="descriptor fusion order (default TNSWE)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="textmaploc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose-log", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-city", help="write a synthetic map and trajectory")
    p.add_argument("--map", required=True, help="output element JSONL")
    p.add_argument("--trajectory", required=True, help="output trajectory JSONL")
    p.add_argument("--kind", choices=("landmark", "random"), default="landmark")
    p.add_argument("--sites", type=int, default=225, help="landmark sites (landmark kind)")
    p.add_argument("--spacing", type=float, default=60.0, help="site spacing in meters")
    p.add_argument("--extent", type=float, default=400.0, help="city side in meters (random kind)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth_city, H=None)

    p = sub.add_parser("build-tiles", help="crop and rasterize one tile per trajectory frame")
    p.add_argument("--map", required=True, help="OSM XML or element JSONL")
    p.add_argument("--trajectory", required=True, help="JSONL of {lat, lon} or {x, y} frames")
    p.add_argument("--out", required=True, help="output tiles directory")
    p.add_argument("--origin", type=float, nargs=2, metavar=("LAT", "LON"),
                   help="local origin for OSM input (default: first node)")
    p.add_argument("--render", action="store_true", help="also write palette PNGs")
    p.add_argument("--jobs", type=int, default=1)
    _spec_flags(p)
    p.set_defaults(func=cmd_build_tiles)

    p = sub.add_parser("gen-queries", help="generate one five-sentence query per tile")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True, help="dataset JSONL")
    p.add_argument("--seed", type=int, help="base seed (falls back to TOL_SEED, then 0)")
    p.add_argument("--offset-frac", dest="offset_frac", type=float)
    _spec_flags(p)
    p.set_defaults(func=cmd_gen_queries)

    p = sub.add_parser("index", help="encode tiles into a retrieval index")
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True, help="index file (.toli)")
    _spec_flags(p)
    p.set_defaults(func=cmd_index)

    for name, func, hlp in (("localize", cmd_localize, "localize one description"),
                            ("evaluate", cmd_evaluate, "localize a dataset and report metrics")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--index", required=True)
        p.add_argument("--tiles", required=True)
        p.add_argument("-K", type=int, default=10, help="tiles to retrieve")
        p.add_argument("--stride", type=float, help="pose grid stride in meters (default 1)")
        p.add_argument("--offset-frac", dest="offset_frac", type=float)
        p.add_argument("--seed", type=int)
        p.set_defaults(func=func)
    localize = sub.choices["localize"]
    localize.add_argument("--text", nargs="+", help="the five sentences")
    localize.add_argument("--text-file", help="file with one sentence per line")
    localize.add_argument("--out", help="write the JSON result here instead of stdout")
    evaluate = sub.choices["evaluate"]
    evaluate.add_argument("--dataset", required=True)
    evaluate.add_argument("--report", required=True, help="report JSON path")
    evaluate.add_argument("--csv", help="per-query CSV path")
    evaluate.add_argument("--verbose", action="store_true", help="include per-query errors")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose_log else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"error: internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except _FORMAT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except Exception as exc:  # anything else is a bug
        print(f"error: internal failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
