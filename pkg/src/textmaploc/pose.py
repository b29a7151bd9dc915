"""In-tile 2-DoF position search by inverting the hint generation model.

Every candidate on a regular grid over the query sampling square is scored by
how well the hints agree with what is visible from it; the best candidate is
the offset from the tile center.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import vocab
from ._validation import check_hints, check_tiles
from .geodata import GeoPoint, to_geopoint
from .textgen import DEFAULT_OFFSET_FRAC, Hint, rarity_weights, sampling_side, square_grid
from .tiler import TileRaster
from .visibility import PolarSpec, hint_presence

DEFAULT_PENALTY = 0.25
DEFAULT_STRIDE = 1.0
_TIE_ATOL = 1e-9


@dataclass(frozen=True)
class PoseEstimate:
    offset: tuple[float, float]  # meters from the tile center
    score: float
    candidate_count: int


def candidate_grid(H: float, offset_frac: float, stride: float) -> np.ndarray:
    """Candidate offsets in row-major order: north row first, west to east."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    c = square_grid(sampling_side(H, offset_frac), stride)
    X, Y = np.meshgrid(c, c[::-1])
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def _hint_terms(hints: Sequence[Hint], idf) -> list[tuple[int, int, float]]:
    terms = []
    for d, h in enumerate(hints):
        if h.semantic is not None:
            terms.append((d, h.semantic.id, float(idf[h.semantic.id])))
    return terms


def _scores(raster: TileRaster, hints: Sequence[Hint], xy: np.ndarray, polar: PolarSpec, idf,
            penalty: float) -> np.ndarray:
    terms = _hint_terms(hints, idf)
    scores = np.zeros(len(xy))
    if not terms:
        return scores
    present = hint_presence(raster, xy, [(d, c) for d, c, _ in terms], polar)
    for j, (_, _, w) in enumerate(terms):
        scores += np.where(present[:, j], w, -penalty * w)
    return scores


def score_position(
    raster: TileRaster,
    hints: Sequence[Hint],
    xy,
    polar: PolarSpec,
    idf,
    *,
    offset_frac: float = DEFAULT_OFFSET_FRAC,
    penalty: float = DEFAULT_PENALTY,
) -> float:
    """+idf for each hint confirmed by visibility at ``xy``, -penalty*idf otherwise."""
    hints = check_hints(hints)
    limit = sampling_side(raster.spec.H, offset_frac) / 2.0
    x, y = float(xy[0]), float(xy[1])
    if abs(x) > limit or abs(y) > limit:
        raise ValueError(f"({x}, {y}) lies outside the +/-{limit} m sampling square")
    return float(_scores(raster, hints, np.array([[x, y]]), polar, idf, penalty)[0])


def estimate_pose(
    raster: TileRaster,
    hints: Sequence[Hint],
    polar: PolarSpec,
    idf,
    *,
    stride: float = DEFAULT_STRIDE,
    offset_frac: float = DEFAULT_OFFSET_FRAC,
    penalty: float = DEFAULT_PENALTY,
) -> PoseEstimate:
    """Exhaustive grid search over the sampling square.

    Ties on the best score go to the candidate nearest the tile center, then
    to the first in row-major order.
    """
    hints = check_hints(hints)
    cands = candidate_grid(raster.spec.H, offset_frac, stride)
    scores = _scores(raster, hints, cands, polar, idf, penalty)
    best = scores.max()
    tied = np.flatnonzero(scores >= best - _TIE_ATOL)
    dist = np.hypot(cands[tied, 0], cands[tied, 1])
    pick = tied[np.lexsort((tied, dist))[0]]
    return PoseEstimate((float(cands[pick, 0]), float(cands[pick, 1])), float(scores[pick]), len(cands))


def compose(tile_center_xy, offset) -> tuple[float, float]:
    """Global metric position: tile center plus in-tile offset."""
    return float(tile_center_xy[0]) + float(offset[0]), float(tile_center_xy[1]) + float(offset[1])


def compose_latlon(tile_center: GeoPoint, offset) -> GeoPoint:
    """Lat/lon of an in-tile offset, projected about the tile center."""
    return to_geopoint([float(offset[0]), float(offset[1])], tile_center)


class GridPoseEstimator(BaseEstimator):
    """Fine localization inside a known tile.

    ``fit`` learns the class rarity weights from the tile database (or takes
    them from ``idf``); ``predict`` maps (tile, query) pairs to offsets.
    """

    def __init__(self, stride: float = DEFAULT_STRIDE, penalty: float = DEFAULT_PENALTY,
                 offset_frac: float = DEFAULT_OFFSET_FRAC, V: int = 360, sigma: float = 3.0):
        self.stride = stride
        self.penalty = penalty
        self.offset_frac = offset_frac
        self.V = V
        self.sigma = sigma

    def fit(self, tiles, y=None, idf=None):
        tiles = check_tiles(tiles)
        sampling_side(tiles[0].spec.H, self.offset_frac)
        if self.stride <= 0:
            raise ValueError("stride must be positive")
        self.polar_ = PolarSpec.for_tile(tiles[0].spec, self.V, self.sigma)
        self.idf_ = np.asarray(idf, dtype=np.float64) if idf is not None else rarity_weights(tiles)
        if self.idf_.shape != (vocab.N_IDS,):
            raise ValueError(f"idf must have {vocab.N_IDS} entries")
        return self

    def estimate(self, tile: TileRaster, query) -> PoseEstimate:
        check_is_fitted(self, "idf_")
        return estimate_pose(tile, check_hints(query), self.polar_, self.idf_, stride=self.stride,
                             offset_frac=self.offset_frac, penalty=self.penalty)

    def predict(self, X) -> np.ndarray:
        """``X`` is a sequence of ``(tile, query)`` pairs; returns (n, 2) offsets."""
        return np.array([self.estimate(t, q).offset for t, q in X], dtype=np.float64).reshape(-1, 2)

