"""OSM ingestion, local projection and synthetic test cities."""
from __future__ import annotations

import io
import json
import logging
import math
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import vocab
from .vocab import SemanticClass

logger = logging.getLogger(__name__)

EARTH_RADIUS = 6378137.0
MAX_PROJECTION_SPAN_DEG = 1.0

GEOMETRY_OF_KIND = {"node": "point", "way": "polyline", "area": "polygon"}
_MIN_VERTICES = {"node": 1, "way": 2, "area": 3}


class OSMParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ProjectionRangeError(ValueError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"invalid WGS84 coordinate ({self.lat}, {self.lon})")


@dataclass(eq=False)
class MapElement:
    cls: SemanticClass
    coords: np.ndarray  # (n, 2) meters, local frame

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.validate()

    @property
    def kind(self) -> str:
        return self.cls.kind

    @property
    def geometry(self) -> str:
        return GEOMETRY_OF_KIND[self.cls.kind]

    def validate(self) -> None:
        n = len(self.coords)
        need = _MIN_VERTICES[self.kind]
        if self.kind == "node" and n != 1:
            raise ValueError(f"{self.cls.name}: point geometry needs exactly 1 vertex, got {n}")
        if n < need:
            raise ValueError(f"{self.cls.name}: {self.geometry} needs >= {need} vertices, got {n}")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError(f"{self.cls.name}: non-finite coordinates")

    def to_json(self) -> dict:
        return {
            "class": self.cls.name,
            "kind": self.kind,
            "coords": [[float(x), float(y)] for x, y in self.coords],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "MapElement":
        sem = vocab.by_name(obj["class"])
        if obj.get("kind", sem.kind) != sem.kind:
            raise ValueError(f"kind {obj['kind']!r} does not match class {sem.name!r}")
        return cls(sem, np.asarray(obj["coords"], dtype=np.float64))


@dataclass(eq=False)
class ElementSet:
    origin: GeoPoint
    elements: list[MapElement] = field(default_factory=list)

    def validate(self) -> None:
        for el in self.elements:
            el.validate()

    def bounds(self) -> tuple[float, float, float, float] | None:
        if not self.elements:
            return None
        pts = np.concatenate([e.coords for e in self.elements])
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))

    def to_jsonl(self) -> str:
        buf = io.StringIO()
        buf.write(json.dumps({"origin": [self.origin.lat, self.origin.lon]}) + "\n")
        for el in self.elements:
            buf.write(json.dumps(el.to_json()) + "\n")
        return buf.getvalue()

    @classmethod
    def from_jsonl(cls, text: str, origin: GeoPoint | None = None) -> "ElementSet":
        elements = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise OSMParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if "origin" in obj and "class" not in obj:
                origin = GeoPoint(*obj["origin"])
                continue
            try:
                elements.append(MapElement.from_json(obj))
            except (KeyError, ValueError) as exc:
                raise OSMParseError(str(exc), lineno) from None
        return cls(origin if origin is not None else GeoPoint(0.0, 0.0), elements)


# -- projection --------------------------------------------------------------

def _latlon_array(points) -> np.ndarray:
    if isinstance(points, GeoPoint):
        points = [points]
    if len(points) and isinstance(points[0], GeoPoint):
        return np.array([[p.lat, p.lon] for p in points], dtype=np.float64)
    return np.asarray(points, dtype=np.float64).reshape(-1, 2)


def project_local(points, origin: GeoPoint) -> np.ndarray:
    """Equirectangular projection of (lat, lon) points about ``origin``.

    Returns an (n, 2) array of (east, north) meters.
    """
    ll = _latlon_array(points)
    dlat = ll[:, 0] - origin.lat
    dlon = ll[:, 1] - origin.lon
    if ll.size and (np.abs(dlat).max() > MAX_PROJECTION_SPAN_DEG
                    or np.abs(dlon).max() > MAX_PROJECTION_SPAN_DEG):
        raise ProjectionRangeError(
            f"point farther than {MAX_PROJECTION_SPAN_DEG} deg from origin "
            f"({origin.lat}, {origin.lon})")
    x = EARTH_RADIUS * np.radians(dlon) * math.cos(math.radians(origin.lat))
    y = EARTH_RADIUS * np.radians(dlat)
    return np.stack([x, y], axis=1)


def unproject_local(xy, origin: GeoPoint) -> np.ndarray:
    """Inverse of :func:`project_local`; returns (n, 2) (lat, lon)."""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    lat = origin.lat + np.degrees(xy[:, 1] / EARTH_RADIUS)
    lon = origin.lon + np.degrees(xy[:, 0] / (EARTH_RADIUS * math.cos(math.radians(origin.lat))))
    return np.stack([lat, lon], axis=1)


def to_geopoint(xy, origin: GeoPoint) -> GeoPoint:
    lat, lon = unproject_local(xy, origin)[0]
    return GeoPoint(float(lat), float(lon))


# -- OSM XML -----------------------------------------------------------------

@dataclass
class RawElement:
    osm_id: str
    type: str  # "node" | "way"
    tags: dict[str, str]
    coords: list[tuple[float, float]]  # (lat, lon)

    @property
    def closed(self) -> bool:
        return self.type == "way" and len(self.coords) >= 4 and self.coords[0] == self.coords[-1]


@dataclass
class ParsedOSM:
    elements: list[RawElement]
    dropped_ways: int = 0


def parse_osm(document: str | bytes) -> ParsedOSM:
    """Parse an OSM XML document into raw nodes and ways.

    Ways referencing nodes absent from the document are dropped and counted
    in ``dropped_ways``.
    """
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise OSMParseError(f"malformed XML: {exc.msg}", exc.position[0]) from None

    def tags_of(el) -> dict[str, str]:
        return {t.get("k"): t.get("v") for t in el.findall("tag")}

    nodes: dict[str, tuple[float, float]] = {}
    out: list[RawElement] = []
    for el in root.iter("node"):
        nid = el.get("id")
        try:
            latlon = (float(el.get("lat")), float(el.get("lon")))
        except (TypeError, ValueError):
            raise OSMParseError(f"node {nid} has no valid lat/lon") from None
        nodes[nid] = latlon
        out.append(RawElement(nid, "node", tags_of(el), [latlon]))

    dropped = 0
    for el in root.iter("way"):
        refs = [nd.get("ref") for nd in el.findall("nd")]
        if any(r not in nodes for r in refs):
            dropped += 1
            continue
        out.append(RawElement(el.get("id"), "way", tags_of(el), [nodes[r] for r in refs]))
    if dropped:
        logger.warning("dropped %d way(s) with unresolved node references", dropped)
    return ParsedOSM(out, dropped)


def to_element_set(raw: Iterable[RawElement], origin: GeoPoint) -> ElementSet:
    """Classify raw OSM elements and project the recognised ones to ``origin``."""
    elements = []
    for r in raw:
        is_node = r.type == "node"
        cls = vocab.classify(r.tags, closed=r.closed, node=is_node)
        if cls is None:
            continue
        coords = r.coords[:-1] if cls.kind == "area" else r.coords
        if len(coords) < _MIN_VERTICES[cls.kind]:
            continue
        elements.append(MapElement(cls, project_local(coords, origin)))
    return ElementSet(origin, elements)


def load_map(path: str | Path, origin: GeoPoint | None = None) -> ElementSet:
    """Load a map from OSM XML (``.osm``/``.xml``) or element JSON lines.

    OSM input is projected about ``origin`` (default: the first node).
    JSON-lines input carries its own origin header.
    """
    path = Path(path)
    data = path.read_bytes()
    if path.suffix.lower() in (".osm", ".xml") or data.lstrip().startswith(b"<"):
        parsed = parse_osm(data)
        if origin is None:
            first = next((e for e in parsed.elements if e.type == "node"), None)
            origin = GeoPoint(*first.coords[0]) if first else GeoPoint(0.0, 0.0)
        return to_element_set(parsed.elements, origin)
    return ElementSet.from_jsonl(data.decode("utf-8"), origin)


# -- synthetic cities --------------------------------------------------------

DEFAULT_DENSITIES = {"buildings": 20, "areas": 4, "roads": 4, "ways": 6, "nodes": 40}


def synth_city(
    seed: int,
    extent: float,
    densities: Mapping[str, int] | None = None,
    origin: GeoPoint = GeoPoint(1.3, 103.8),
) -> ElementSet:
    """Generate a deterministic synthetic city on ``[-extent/2, extent/2]^2``.

    ``densities`` gives element counts for the keys ``buildings``, ``areas``
    (non-building areas), ``roads``, ``ways`` (non-road ways) and ``nodes``.
    Buildings are axis-aligned and never overlap each other.
    """
    if extent <= 0:
        raise ValueError("extent must be positive")
    dens = dict(DEFAULT_DENSITIES)
    if densities is not None:
        dens.update(densities)
    rng = np.random.Generator(np.random.Philox(seed))
    half = extent / 2.0
    elements: list[MapElement] = []

    other_areas = [c for c in vocab.classes_of_kind("area") if c is not vocab.BUILDING]
    for _ in range(dens["areas"]):
        cls = other_areas[rng.integers(len(other_areas))]
        w, h = rng.uniform(0.05, 0.2, size=2) * extent
        x0 = rng.uniform(-half, half - w)
        y0 = rng.uniform(-half, half - h)
        elements.append(MapElement(cls, _rect(x0, y0, w, h)))

    n_build = dens["buildings"]
    if n_build:
        per_side = max(1, math.ceil(math.sqrt(n_build)))
        lot = extent / per_side
        lots = rng.permutation(per_side * per_side)[:n_build]
        for k in np.sort(lots):
            i, j = divmod(int(k), per_side)
            w, h = rng.uniform(0.3, 0.7, size=2) * lot
            x0 = -half + i * lot + rng.uniform(0.1 * lot, 0.9 * lot - w)
            y0 = -half + j * lot + rng.uniform(0.1 * lot, 0.9 * lot - h)
            elements.append(MapElement(vocab.BUILDING, _rect(x0, y0, w, h)))

    road = vocab.by_name("road")
    for k in range(dens["roads"]):
        c = rng.uniform(-half, half)
        ts = np.linspace(-half, half, 3)
        wiggle = rng.uniform(-0.02, 0.02, size=3) * extent
        line = np.stack([ts, c + wiggle], axis=1)
        elements.append(MapElement(road, line if k % 2 == 0 else line[:, ::-1]))

    other_ways = [c for c in vocab.classes_of_kind("way") if c is not road]
    for _ in range(dens["ways"]):
        cls = other_ways[rng.integers(len(other_ways))]
        start = rng.uniform(-half, half, size=2)
        steps = rng.normal(0.0, 0.05 * extent, size=(2, 2))
        pts = np.clip(np.vstack([start, start + np.cumsum(steps, axis=0)]), -half, half)
        elements.append(MapElement(cls, pts))

    node_classes = vocab.classes_of_kind("node")
    for _ in range(dens["nodes"]):
        cls = node_classes[rng.integers(len(node_classes))]
        elements.append(MapElement(cls, rng.uniform(-half, half, size=(1, 2))))

    return ElementSet(origin, elements)


# arm layout of one landmark site, relative to its anchor node: two arms
# straddle the diagonals of the side facing away from the tile center, two
# sit squarely on the axis
_SITE_ARMS = (
    ("pinch_north", (16.0, 17.0)),
    ("pinch_south", (16.0, -17.0)),
    ("ahead", (20.0, 0.0)),
    ("behind", (-20.0, 0.0)),
)


def landmark_city(
    n_sites: int,
    seed: int = 0,
    spacing: float = 60.0,
    origin: GeoPoint = GeoPoint(1.3, 103.8),
) -> tuple[ElementSet, np.ndarray]:
    """Benchmark city of isolated landmark sites, one per tile.

    Each site has an anchor node 2 m off its tile center and four arm nodes
    20-23 m from the anchor, all on integer coordinates. Anchor, ``ahead`` and
    ``behind`` classes come from disjoint 7-class alphabets and are unique per
    site (up to 343 sites); each layout is rotated by a random quarter turn.
    Returns the elements and the (n_sites, 2) tile centers.
    """
    nodes = vocab.classes_of_kind("node")
    alphabets = {"anchor": nodes[0:7], "ahead": nodes[7:14], "behind": nodes[14:21],
                 "pinch_north": nodes[21:27], "pinch_south": nodes[27:33]}
    if not 1 <= n_sites <= 7 ** 3:
        raise ValueError("n_sites must lie in [1, 343]")
    rng = np.random.Generator(np.random.Philox(seed))
    side = math.ceil(math.sqrt(n_sites))
    codes = rng.permutation(7 ** 3)[:n_sites]
    elements: list[MapElement] = []
    centers = np.zeros((n_sites, 2))
    for k in range(n_sites):
        i, j = divmod(k, side)
        center = np.array([j * spacing, -i * spacing])
        centers[k] = center
        a, b, c = int(codes[k]) % 7, (int(codes[k]) // 7) % 7, int(codes[k]) // 49
        turn = int(rng.integers(4))
        R = np.linalg.matrix_power(np.array([[0, -1], [1, 0]]), turn)
        anchor = center + R @ np.array([2.0, 0.0])
        elements.append(MapElement(alphabets["anchor"][a], anchor[None, :]))
        picks = {"ahead": alphabets["ahead"][b], "behind": alphabets["behind"][c]}
        for role in ("pinch_north", "pinch_south"):
            pool = alphabets[role]
            picks[role] = pool[int(rng.integers(len(pool)))]
        for role, arm in _SITE_ARMS:
            elements.append(MapElement(picks[role], (anchor + R @ np.array(arm))[None, :]))
    return ElementSet(origin, elements), centers


def _rect(x0: float, y0: float, w: float, h: float) -> np.ndarray:
    return np.array([[x0, y0], [x0 + w, y0], [x0 + w, y0 + h], [x0, y0 + h]], dtype=np.float64)


def write_trajectory(path: str | Path, points: Sequence[GeoPoint]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in points:
            fh.write(json.dumps({"lat": p.lat, "lon": p.lon}) + "\n")


def write_trajectory_local(path: str | Path, xy) -> None:
    """Write local ``{x, y}`` frames; readers need the map origin."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in np.asarray(xy, dtype=np.float64).reshape(-1, 2):
            fh.write(json.dumps({"x": float(x), "y": float(y)}) + "\n")


def read_trajectory(path: str | Path, origin: GeoPoint | None = None) -> list[GeoPoint]:
    """Read a JSON-lines trajectory of ``{lat, lon}`` or ``{x, y}`` frames.

    Local ``{x, y}`` frames require ``origin``.
    """
    return [g for g, _ in _trajectory_frames(path, origin)]


def read_trajectory_local(path: str | Path, origin: GeoPoint) -> tuple[list[GeoPoint], np.ndarray]:
    """Frames as lat/lon plus their (n, 2) positions in the frame of ``origin``.

    Local ``{x, y}`` frames keep their exact coordinates.
    """
    frames = _trajectory_frames(path, origin)
    xy = np.zeros((len(frames), 2))
    for i, (g, local) in enumerate(frames):
        xy[i] = local if local is not None else project_local([(g.lat, g.lon)], origin)[0]
    return [g for g, _ in frames], xy


def _trajectory_frames(path, origin):
    frames = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise OSMParseError(f"invalid JSON: {exc.msg}", lineno) from None
            if "lat" in obj and "lon" in obj:
                frames.append((GeoPoint(float(obj["lat"]), float(obj["lon"])), None))
            elif "x" in obj and "y" in obj:
                if origin is None:
                    raise OSMParseError("local {x, y} frames need an origin", lineno)
                local = (float(obj["x"]), float(obj["y"]))
                frames.append((to_geopoint(local, origin), local))
            else:
                raise OSMParseError("frame needs {lat, lon} or {x, y}", lineno)
    return frames
