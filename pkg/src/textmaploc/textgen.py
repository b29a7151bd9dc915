"""Query sampling, hint selection and the five-sentence template grammar."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import vocab
from .geodata import GeoPoint, to_geopoint
from .tiler import TileRaster
from .visibility import DIRECTIONS, Direction, PolarSpec, visible_objects
from .vocab import SemanticClass, UnknownClassError

SAMPLE_CELL = 1.0  # meters
DEFAULT_OFFSET_FRAC = 0.25


class HintParseError(ValueError):
    def __init__(self, sentence: str, span: tuple[int, int], reason: str):
        super().__init__(f"{reason}: {sentence[span[0]:span[1]]!r} at [{span[0]}:{span[1]}]")
        self.sentence = sentence
        self.span = span


class RecordValidationError(ValueError):
    def __init__(self, field: str, reason: str):
        super().__init__(f"{field}: {reason}")
        self.field = field


@dataclass(frozen=True)
class Hint:
    direction: Direction
    semantic: SemanticClass | None = None

    def render(self) -> str:
        name = "None" if self.semantic is None else self.semantic.name
        if self.direction is Direction.TOP:
            return f"The pose is on top of {name}."
        return f"The pose is {self.direction.value} of {name}."


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based 64-bit generator used for all sampling (Philox 4x64)."""
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(base_seed: int, index: int) -> int:
    """Per-record seed, stable across runs and platforms."""
    return int(np.random.SeedSequence(int(base_seed), spawn_key=(int(index),)).generate_state(1, np.uint64)[0])


def square_grid(side: float, step: float) -> np.ndarray:
    """Cell-center offsets of a centered square of ``side`` cut into ``step`` cells."""
    n = max(1, int(math.floor(side / step + 1e-9)))
    return (np.arange(n) + 0.5) * step - n * step / 2.0


def sampling_side(H: float, offset_frac: float) -> float:
    if not 0 < offset_frac <= 0.5:
        raise ValueError("offset_frac must lie in (0, 1/2]")
    return offset_frac * 2.0 * H


def sample_query_position(
    raster: TileRaster,
    offset_frac: float = DEFAULT_OFFSET_FRAC,
    seed: int = 0,
    cell: float = SAMPLE_CELL,
) -> tuple[float, float]:
    """Pick a query position in the sampling square around the tile center.

    Cells holding any non-empty pixel are preferred; with none, all cells
    are equally likely. Returns the chosen cell center in tile-local meters.
    """
    spec = raster.spec
    centers = square_grid(sampling_side(spec.H, offset_frac), cell)
    n = len(centers)
    lo = centers[0] - cell / 2.0
    occupied = np.zeros((n, n), dtype=bool)  # [iy, ix], iy north-to-south
    rows, cols = np.nonzero(raster.channels.any(axis=0))
    if rows.size:
        xs, ys = spec.pixel_centers()
        ix = np.floor((xs[cols] - lo) / cell).astype(np.int64)
        iy = np.floor((-ys[rows] - lo) / cell).astype(np.int64)
        ok = (ix >= 0) & (ix < n) & (iy >= 0) & (iy < n)
        occupied[iy[ok], ix[ok]] = True
    candidates = np.flatnonzero(occupied) if occupied.any() else np.arange(n * n)
    pick = int(candidates[make_rng(seed).integers(len(candidates))])
    iy, ix = divmod(pick, n)
    return float(centers[ix]) + 0.0, float(-centers[iy]) + 0.0


def rarity_weights(rasters: Sequence[TileRaster]) -> np.ndarray:
    """IDF weight per class id: ``max(0, log(Z / (1 + n_c)))``; slot 0 unused."""
    Z = len(rasters)
    df = np.zeros(vocab.N_IDS, dtype=np.int64)
    for r in rasters:
        present = np.zeros(vocab.N_IDS, dtype=bool)
        present[np.unique(r.channels)] = True
        df += present
    with np.errstate(divide="ignore"):
        w = np.log(Z / (1.0 + df)) if Z else np.zeros(vocab.N_IDS)
    w = np.maximum(w, 0.0)
    w[0] = 0.0
    return w


def select_semantics(
    buckets: Mapping[Direction, Mapping[int, float]],
    rarity,
) -> list[Hint]:
    """Per direction, the rarest visible class (then nearer, then lower id)."""
    hints = []
    for d in DIRECTIONS:
        bucket = buckets.get(d, {})
        if not bucket:
            hints.append(Hint(d, None))
            continue
        cid = min(bucket, key=lambda c: (-float(rarity[c]), bucket[c], c))
        hints.append(Hint(d, vocab.by_id(cid)))
    return hints


def render_hints(hints: Sequence[Hint]) -> list[str]:
    by_dir = {h.direction: h for h in hints}
    if set(by_dir) != set(DIRECTIONS):
        raise ValueError("need exactly one hint per direction")
    return [by_dir[d].render() for d in DIRECTIONS]


_TOP_RE = re.compile(r"The pose is on top of (?P<sem>[^.]+)\.")
_DIR_RE = re.compile(r"The pose is (?P<dir>north|south|west|east) of (?P<sem>[^.]+)\.")
_PREFIX = "The pose is "


def parse_hint(sentence: str) -> Hint:
    m = _TOP_RE.fullmatch(sentence)
    direction = Direction.TOP
    if m is None:
        m = _DIR_RE.fullmatch(sentence)
        if m is None:
            raise HintParseError(sentence, _bad_span(sentence), "sentence does not match a hint template")
        direction = Direction(m.group("dir"))
    token = m.group("sem")
    if token == "None":
        return Hint(direction, None)
    try:
        return Hint(direction, vocab.by_name(token))
    except UnknownClassError:
        raise UnknownClassError(token) from None


def _bad_span(sentence: str) -> tuple[int, int]:
    # first character where the sentence stops following either template
    i = 0
    while i < len(sentence) and i < len(_PREFIX) and sentence[i] == _PREFIX[i]:
        i += 1
    if i < len(_PREFIX):
        return i, len(sentence)
    rest = sentence[i:]
    for head in ("on top of ", "north of ", "south of ", "west of ", "east of "):
        if rest.startswith(head):
            if not sentence.endswith("."):
                return len(sentence), len(sentence)
            return i + len(head), len(sentence)
    return i, len(sentence)


def parse_hints(sentences: Sequence[str]) -> list[Hint]:
    """Parse a full description; returns hints in TNSWE order."""
    hints = [parse_hint(s) for s in sentences]
    dirs = [h.direction for h in hints]
    if len(hints) != len(DIRECTIONS) or set(dirs) != set(DIRECTIONS):
        raise RecordValidationError("hints", "description needs exactly one sentence per direction")
    order = {d: h for d, h in zip(dirs, hints)}
    return [order[d] for d in DIRECTIONS]


@dataclass(frozen=True)
class QueryRecord:
    query_id: str
    tile_id: str
    position_local: tuple[float, float]
    position_global: tuple[float, float]
    hints: tuple[Hint, ...]
    seed: int

    def to_json(self) -> str:
        return json.dumps({
            "query_id": self.query_id,
            "tile_id": self.tile_id,
            "position_local": [self.position_local[0], self.position_local[1]],
            "position_global": [self.position_global[0], self.position_global[1]],
            "hints": render_hints(self.hints),
            "seed": self.seed,
        })

    @classmethod
    def from_json(cls, line: str) -> "QueryRecord":
        obj = json.loads(line)
        return cls(
            obj["query_id"], obj["tile_id"],
            tuple(obj["position_local"]), tuple(obj["position_global"]),
            tuple(parse_hints(obj["hints"])), int(obj["seed"]),
        )


def make_record(
    tile: TileRaster,
    position,
    hints: Sequence[Hint],
    seed: int,
    *,
    query_id: str | None = None,
    offset_frac: float = 0.5,
) -> QueryRecord:
    """Assemble and validate a :class:`QueryRecord` for ``tile``."""
    hints = tuple(hints)
    if len(hints) != len(DIRECTIONS):
        raise RecordValidationError("hints", f"expected {len(DIRECTIONS)} hints, got {len(hints)}")
    dirs = [h.direction for h in hints]
    if len(set(dirs)) != len(dirs):
        raise RecordValidationError("hints", "duplicate direction")
    if tuple(dirs) != DIRECTIONS:
        raise RecordValidationError("hints", "hints must be in top, north, south, west, east order")
    x, y = float(position[0]), float(position[1])
    limit = sampling_side(tile.spec.H, offset_frac) / 2.0
    if not (abs(x) <= limit and abs(y) <= limit):
        raise RecordValidationError("position_local", f"({x}, {y}) outside the +/-{limit} m sampling square")
    g = to_geopoint([x, y], tile.center)
    return QueryRecord(
        query_id if query_id is not None else tile.tile_id,
        tile.tile_id, (x, y), (g.lat, g.lon), hints, int(seed))


def generate_query(
    tile: TileRaster,
    rarity,
    seed: int,
    *,
    polar: PolarSpec | None = None,
    offset_frac: float = DEFAULT_OFFSET_FRAC,
    query_id: str | None = None,
) -> QueryRecord:
    """Sample a position in ``tile`` and describe what is visible from it."""
    polar = polar or PolarSpec.for_tile(tile.spec)
    pos = sample_query_position(tile, offset_frac, seed)
    hints = select_semantics(visible_objects(tile, pos, polar), rarity)
    return make_record(tile, pos, hints, seed, query_id=query_id, offset_frac=offset_frac)


def write_dataset(path, records: Sequence[QueryRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_dataset(path) -> list[QueryRecord]:
    with open(path, encoding="utf-8") as fh:
        return [QueryRecord.from_json(line) for line in fh if line.strip()]
