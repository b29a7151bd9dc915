"""Tile cropping, rasterization and the ``TOLR`` binary raster format."""
from __future__ import annotations

import colorsys
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import shapely

from . import vocab
from .geodata import ElementSet, GeoPoint, MapElement

STROKE_WIDTH = 0.5  # meters
NODE_RADIUS = 0.5  # meters

MAGIC = b"TOLR"
VERSION = 1
_HEADER = struct.Struct("<4sBHfdd")
HEADER_SIZE = _HEADER.size  # 27 bytes

TILE_SUFFIX = ".tolr"
SIDECAR = "tiles.jsonl"


class RasterFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class TileSpec:
    H: float = 50.0
    delta: float = 0.25

    def __post_init__(self):
        if not (self.H > 0 and self.delta > 0):
            raise ValueError("tile side H and pixel size delta must be positive")
        ratio = self.H / self.delta
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            raise ValueError(f"H/delta must be an integer, got {ratio}")

    @property
    def P(self) -> int:
        return int(round(self.H / self.delta))

    @property
    def half(self) -> float:
        return self.H / 2.0

    def pixel_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """x of column centers and y of row centers (row 0 is the north edge)."""
        idx = np.arange(self.P) + 0.5
        return -self.half + idx * self.delta, self.half - idx * self.delta

    def to_pixel(self, x, y):
        """Tile-local meters to (row, col) integer pixel indices (unbounded)."""
        col = np.floor((np.asarray(x) + self.half) / self.delta).astype(np.int64)
        row = np.floor((self.half - np.asarray(y)) / self.delta).astype(np.int64)
        return row, col


@dataclass(eq=False)
class TileRaster:
    spec: TileSpec
    channels: np.ndarray  # (3, P, P) uint8 class ids; node, way, area
    center: GeoPoint = GeoPoint(0.0, 0.0)
    center_xy: tuple[float, float] = (0.0, 0.0)
    tile_id: str = ""

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels, dtype=np.uint8)
        P = self.spec.P
        if self.channels.shape != (3, P, P):
            raise ValueError(f"channels must have shape (3, {P}, {P}), got {self.channels.shape}")

    @property
    def node(self) -> np.ndarray:
        return self.channels[0]

    @property
    def way(self) -> np.ndarray:
        return self.channels[1]

    @property
    def area(self) -> np.ndarray:
        return self.channels[2]

    def metadata(self) -> dict:
        return {
            "tile_id": self.tile_id,
            "center_latlon": [self.center.lat, self.center.lon],
            "center_xy": [float(self.center_xy[0]), float(self.center_xy[1])],
        }

    def check_channel_purity(self) -> bool:
        kind_of = np.zeros(vocab.N_IDS, dtype=np.int8) - 1
        for c in vocab.CLASSES:
            kind_of[c.id] = vocab.CHANNEL_OF_KIND[c.kind]
        for k in range(3):
            ids = self.channels[k][self.channels[k] > 0]
            if ids.size and (ids.max() >= vocab.N_IDS or np.any(kind_of[ids] != k)):
                return False
        return True


# -- cropping ----------------------------------------------------------------

class Cropper:
    """Crops many tiles out of one element set; element bounding boxes are cached."""

    def __init__(self, elements: ElementSet | Sequence[MapElement]):
        self.elements = list(elements.elements if isinstance(elements, ElementSet) else elements)
        if self.elements:
            self._bbox = np.array(
                [np.r_[e.coords.min(axis=0), e.coords.max(axis=0)] for e in self.elements])
        else:
            self._bbox = np.zeros((0, 4))

    def crop(self, center_xy, spec: TileSpec) -> list[MapElement]:
        cx, cy = float(center_xy[0]), float(center_xy[1])
        h = spec.half
        b = self._bbox
        hit = (b[:, 0] <= cx + h) & (b[:, 2] >= cx - h) & (b[:, 1] <= cy + h) & (b[:, 3] >= cy - h)
        inside = (b[:, 0] >= cx - h) & (b[:, 2] <= cx + h) & (b[:, 1] >= cy - h) & (b[:, 3] <= cy + h)
        shift = np.array([cx, cy])
        out: list[MapElement] = []
        for i in np.flatnonzero(hit):
            el = self.elements[i]
            local = el.coords - shift
            if inside[i] or el.kind == "node":
                # nodes reach here only when inside the closed square
                out.append(MapElement(el.cls, local))
                continue
            out.extend(_clip(el.cls, local, h))
        return out


def crop_tile(elements: ElementSet | Sequence[MapElement], center_xy, spec: TileSpec) -> list[MapElement]:
    """Clip elements to the H x H square around ``center_xy``, in tile-local coordinates."""
    return Cropper(elements).crop(center_xy, spec)


def _clip(cls, local: np.ndarray, h: float) -> list[MapElement]:
    if cls.kind == "way":
        geom = shapely.clip_by_rect(shapely.LineString(local), -h, -h, h, h)
        parts = [g for g in getattr(geom, "geoms", [geom]) if g.geom_type == "LineString"]
        return [MapElement(cls, np.asarray(g.coords)) for g in parts if not g.is_empty and len(g.coords) >= 2]
    poly = shapely.Polygon(local)
    if not poly.is_valid:
        poly = shapely.make_valid(poly)
    geom = shapely.clip_by_rect(poly, -h, -h, h, h)
    out = []
    for g in getattr(geom, "geoms", [geom]):
        if g.geom_type != "Polygon" or g.is_empty:
            continue
        ring = np.asarray(g.exterior.coords)[:-1]
        if len(ring) >= 3:
            out.append(MapElement(cls, ring))
    return out


# -- rasterization -----------------------------------------------------------

def _fill_polygon(grid: np.ndarray, poly: np.ndarray, spec: TileSpec, value: int) -> None:
    # even-odd rule at pixel centers
    P, d, h = spec.P, spec.delta, spec.half
    r0 = max(0, int(math.floor((h - poly[:, 1].max()) / d)))
    r1 = min(P - 1, int(math.floor((h - poly[:, 1].min()) / d)))
    c0 = max(0, int(math.floor((poly[:, 0].min() + h) / d)))
    c1 = min(P - 1, int(math.floor((poly[:, 0].max() + h) / d)))
    if r0 > r1 or c0 > c1:
        return
    ys = h - (np.arange(r0, r1 + 1) + 0.5) * d
    xs = -h + (np.arange(c0, c1 + 1) + 0.5) * d
    ax, ay = poly[:, 0], poly[:, 1]
    bx, by = np.roll(ax, -1), np.roll(ay, -1)
    yy = ys[:, None]
    crosses = (ay > yy) != (by > yy)  # (R, E)
    dy = np.where(by == ay, 1.0, by - ay)
    xi = ax + (yy - ay) * (bx - ax) / dy
    count = np.count_nonzero(crosses[:, :, None] & (xs[None, None, :] < xi[:, :, None]), axis=1)
    mask = (count & 1).astype(bool)
    grid[r0:r1 + 1, c0:c1 + 1][mask] = value


def _stamp_near(grid: np.ndarray, pts: np.ndarray, radius: float, spec: TileSpec, value: int) -> None:
    """Set pixels whose centers lie within ``radius`` of the polyline ``pts``."""
    P, d, h = spec.P, spec.delta, spec.half
    lo = pts.min(axis=0) - radius
    hi = pts.max(axis=0) + radius
    r0 = max(0, int(math.floor((h - hi[1]) / d)))
    r1 = min(P - 1, int(math.floor((h - lo[1]) / d)))
    c0 = max(0, int(math.floor((lo[0] + h) / d)))
    c1 = min(P - 1, int(math.floor((hi[0] + h) / d)))
    if r0 > r1 or c0 > c1:
        return
    ys = h - (np.arange(r0, r1 + 1) + 0.5) * d
    xs = -h + (np.arange(c0, c1 + 1) + 0.5) * d
    X, Y = np.meshgrid(xs, ys)
    px, py = X.ravel()[:, None], Y.ravel()[:, None]
    if len(pts) == 1:
        d2 = (px[:, 0] - pts[0, 0]) ** 2 + (py[:, 0] - pts[0, 1]) ** 2
    else:
        a, b = pts[:-1], pts[1:]
        vx, vy = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
        L2 = vx * vx + vy * vy
        t = ((px - a[:, 0]) * vx + (py - a[:, 1]) * vy) / np.where(L2 > 0, L2, 1.0)
        t = np.clip(t, 0.0, 1.0)
        qx = a[:, 0] + t * vx - px
        qy = a[:, 1] + t * vy - py
        d2 = (qx * qx + qy * qy).min(axis=1)
    mask = (d2 <= radius * radius).reshape(X.shape)
    grid[r0:r1 + 1, c0:c1 + 1][mask] = value


def rasterize(
    elements: Iterable[MapElement],
    spec: TileSpec = TileSpec(),
    *,
    center: GeoPoint = GeoPoint(0.0, 0.0),
    center_xy=(0.0, 0.0),
    tile_id: str = "",
) -> TileRaster:
    """Rasterize tile-local elements into node/way/area class-id channels.

    Areas are filled at pixel centers, ways are stroked ``STROKE_WIDTH`` wide
    and nodes are stamped as disks of ``NODE_RADIUS``. Within a channel later
    elements overwrite earlier ones.
    """
    channels = np.zeros((3, spec.P, spec.P), dtype=np.uint8)
    for el in elements:
        grid = channels[vocab.CHANNEL_OF_KIND[el.kind]]
        if el.kind == "area":
            _fill_polygon(grid, el.coords, spec, el.cls.id)
        elif el.kind == "way":
            _stamp_near(grid, el.coords, STROKE_WIDTH / 2.0, spec, el.cls.id)
        else:
            _stamp_near(grid, el.coords, NODE_RADIUS, spec, el.cls.id)
    return TileRaster(spec, channels, center, (float(center_xy[0]), float(center_xy[1])), tile_id)


# -- binary format -----------------------------------------------------------

def encode_raster(raster: TileRaster) -> bytes:
    P = raster.spec.P
    header = _HEADER.pack(MAGIC, VERSION, P, raster.spec.delta, raster.center.lat, raster.center.lon)
    return header + raster.channels.tobytes(order="C")


def decode_raster(data: bytes, *, tile_id: str = "", center_xy=(0.0, 0.0)) -> TileRaster:
    if len(data) < HEADER_SIZE:
        raise RasterFormatError(f"truncated header: expected {HEADER_SIZE} bytes, got {len(data)}", len(data))
    magic, version, P, delta, lat, lon = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise RasterFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise RasterFormatError(f"unsupported version {version}", 4)
    if P == 0 or not delta > 0:
        raise RasterFormatError(f"invalid grid size P={P}, delta={delta}", 5)
    expected = HEADER_SIZE + 3 * P * P
    if len(data) != expected:
        raise RasterFormatError(
            f"payload length mismatch: expected {expected} bytes, got {len(data)}",
            min(len(data), expected))
    channels = np.frombuffer(data, dtype=np.uint8, offset=HEADER_SIZE).reshape(3, P, P).copy()
    spec = TileSpec(P * float(delta), float(delta))
    return TileRaster(spec, channels, GeoPoint(lat, lon), tuple(center_xy), tile_id)


# -- debug render ------------------------------------------------------------

BACKGROUND = (250, 250, 250)


def _palette() -> np.ndarray:
    # golden-ratio hue walk per class id; areas pale, ways mid, nodes saturated
    sat_val = {"area": (0.35, 0.85), "way": (0.6, 0.55), "node": (0.95, 0.9)}
    pal = np.zeros((vocab.N_IDS, 3), dtype=np.uint8)
    pal[0] = BACKGROUND
    for c in vocab.CLASSES:
        s, v = sat_val[c.kind]
        r, g, b = colorsys.hsv_to_rgb((c.id * 0.618033988749895) % 1.0, s, v)
        pal[c.id] = (round(r * 255), round(g * 255), round(b * 255))
    pal[vocab.BUILDING.id] = (150, 150, 160)
    pal[vocab.by_name("road").id] = (60, 60, 60)
    return pal


PALETTE = _palette()


def render_debug(raster: TileRaster) -> np.ndarray:
    """RGB uint8 image: areas first, then ways, then nodes on top."""
    img = np.empty((raster.spec.P, raster.spec.P, 3), dtype=np.uint8)
    img[:] = BACKGROUND
    for k in (2, 1, 0):
        ch = raster.channels[k]
        mask = ch > 0
        img[mask] = PALETTE[ch[mask]]
    return img


def save_debug_png(raster: TileRaster, path: str | Path) -> None:
    from PIL import Image

    Image.fromarray(render_debug(raster), mode="RGB").save(path, format="PNG")


# -- tile directories --------------------------------------------------------

def save_tiles(directory: str | Path, rasters: Sequence[TileRaster]) -> None:
    """Write one ``<tile_id>.tolr`` per raster plus the ``tiles.jsonl`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / SIDECAR, "w", encoding="utf-8") as fh:
        for r in rasters:
            (directory / f"{r.tile_id}{TILE_SUFFIX}").write_bytes(encode_raster(r))
            fh.write(json.dumps(r.metadata()) + "\n")


def load_tiles(directory: str | Path) -> list[TileRaster]:
    directory = Path(directory)
    out = []
    with open(directory / SIDECAR, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            meta = json.loads(line)
            data = (directory / f"{meta['tile_id']}{TILE_SUFFIX}").read_bytes()
            out.append(decode_raster(data, tile_id=meta["tile_id"], center_xy=tuple(meta["center_xy"])))
    return out
