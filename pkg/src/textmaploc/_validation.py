"""Input validation helpers shared by the estimators."""
from __future__ import annotations

from typing import Sequence

from .textgen import Hint, QueryRecord, parse_hints
from .tiler import TileRaster
from .visibility import DIRECTIONS


def check_tiles(tiles) -> list[TileRaster]:
    tiles = list(tiles)
    if not tiles:
        raise ValueError("at least one tile is required")
    for t in tiles:
        if not isinstance(t, TileRaster):
            raise TypeError(f"expected TileRaster, got {type(t).__name__}")
    spec = tiles[0].spec
    if any(t.spec != spec for t in tiles):
        raise ValueError("all tiles must share one TileSpec")
    return tiles


def check_hints(query) -> list[Hint]:
    """Normalise one query to five hints in TNSWE order.

    Accepts a :class:`QueryRecord`, a sequence of :class:`Hint`, or the five
    template sentences.
    """
    if isinstance(query, QueryRecord):
        return list(query.hints)
    if isinstance(query, str):
        raise TypeError("a query is five sentences, not one string")
    query = list(query)
    if query and all(isinstance(s, str) for s in query):
        return parse_hints(query)
    if len(query) != len(DIRECTIONS) or not all(isinstance(h, Hint) for h in query):
        raise ValueError("a query needs five hints, one per direction")
    by_dir = {h.direction: h for h in query}
    if set(by_dir) != set(DIRECTIONS):
        raise ValueError("a query needs exactly one hint per direction")
    return [by_dir[d] for d in DIRECTIONS]


def check_queries(X) -> list[list[Hint]]:
    if isinstance(X, (QueryRecord, str)):
        X = [X]
    return [check_hints(q) for q in X]


def check_order(order: str) -> tuple[int, ...]:
    """Block permutation for a fusion order string such as ``"TNSWE"``."""
    letters = "TNSWE"
    order = order.upper()
    if sorted(order) != sorted(letters):
        raise ValueError(f"fusion order must be a permutation of {letters}, got {order!r}")
    return tuple(letters.index(ch) for ch in order)


def as_float_pairs(values: Sequence) -> list[tuple[float, float]]:
    return [(float(a), float(b)) for a, b in values]
