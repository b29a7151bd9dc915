"""Two-stage text-to-map localization: tile retrieval, then in-tile pose search."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_hints, check_queries, check_tiles
from .evaluation import LocalizationResult, RankedTile, recall_at_k
from .geodata import GeoPoint
from .matching import TileIndex, TileRetriever
from .pose import DEFAULT_PENALTY, DEFAULT_STRIDE, GridPoseEstimator, compose, compose_latlon
from .textgen import DEFAULT_OFFSET_FRAC, QueryRecord
from .tiler import TileRaster


@dataclass(frozen=True)
class Localization:
    ranked: list[tuple[str, float]]
    offset: tuple[float, float]
    position_xy: tuple[float, float]
    position_latlon: tuple[float, float]
    pose_score: float

    def to_dict(self) -> dict:
        return {
            "ranked": [{"tile_id": t, "score": s} for t, s in self.ranked],
            "offset": list(self.offset),
            "position_xy": list(self.position_xy),
            "position_latlon": list(self.position_latlon),
            "pose_score": self.pose_score,
        }


class TextToMapLocalizer(BaseEstimator):
    """Rank tiles for a five-sentence query and refine the position in the best one.

    >>> loc = TextToMapLocalizer(n_candidates=5).fit(tiles)   # doctest: +SKIP
    >>> loc.predict(records)                                  # doctest: +SKIP
    """

    def __init__(self, n_candidates: int = 10, stride: float = DEFAULT_STRIDE,
                 penalty: float = DEFAULT_PENALTY, offset_frac: float = DEFAULT_OFFSET_FRAC,
                 V: int = 360, sigma: float = 3.0, order: str = "TNSWE"):
        self.n_candidates = n_candidates
        self.stride = stride
        self.penalty = penalty
        self.offset_frac = offset_frac
        self.V = V
        self.sigma = sigma
        self.order = order

    def fit(self, tiles, y=None):
        tiles = check_tiles(tiles)
        self.retriever_ = TileRetriever(self.n_candidates, self.V, self.sigma, self.order).fit(tiles)
        self._fit_pose(tiles, self.retriever_.index_)
        return self

    @classmethod
    def from_index(cls, index: TileIndex, tiles: Sequence[TileRaster], **params) -> "TextToMapLocalizer":
        """Wrap a prebuilt index; ``tiles`` must cover the indexed tile ids."""
        est = cls(V=int(index.config.get("V", 360)), sigma=float(index.config.get("sigma", 3.0)),
                  order=index.config.get("order", "TNSWE"), **params)
        tiles = check_tiles(tiles)
        est.retriever_ = TileRetriever.from_index(index, est.n_candidates)
        est._fit_pose(tiles, index)
        return est

    def _fit_pose(self, tiles: list[TileRaster], index: TileIndex) -> None:
        self.tiles_ = {t.tile_id: t for t in tiles}
        missing = [t for t in index.tile_ids if t not in self.tiles_]
        if missing:
            raise ValueError(f"no raster for indexed tile(s): {', '.join(missing[:5])}")
        self.pose_ = GridPoseEstimator(self.stride, self.penalty, self.offset_frac, self.V, self.sigma)
        self.pose_.fit(tiles, idf=index.idf)

    @property
    def index_(self) -> TileIndex:
        return self.retriever_.index_

    def localize(self, query, n_candidates: int | None = None) -> Localization:
        check_is_fitted(self, "retriever_")
        hints = check_hints(query)
        ranked = self.retriever_.kneighbors([hints], n_candidates)[0]
        best = self.tiles_[ranked[0][0]]
        est = self.pose_.estimate(best, hints)
        row = self.index_.row_of(best.tile_id)
        center_xy = self.index_.centers_xy[row]
        lat, lon = self.index_.centers_latlon[row]
        g = compose_latlon(GeoPoint(float(lat), float(lon)), est.offset)
        return Localization(ranked, est.offset, compose(center_xy, est.offset), (g.lat, g.lon), est.score)

    def predict(self, X) -> np.ndarray:
        """Global metric positions, shape (n, 2)."""
        return np.array([self.localize(q).position_xy for q in check_queries(X)]).reshape(-1, 2)

    def evaluate(self, records: Sequence[QueryRecord]) -> list[LocalizationResult]:
        """Localize dataset records and pair each with its ground truth."""
        out = []
        for rec in records:
            if rec.tile_id not in self.tiles_:
                raise ValueError(f"{rec.query_id}: unknown tile {rec.tile_id}")
            truth = compose(self.tiles_[rec.tile_id].center_xy, rec.position_local)
            loc = self.localize(rec)
            ranked = [RankedTile(t, tuple(self.index_.centers_xy[self.index_.row_of(t)]), s)
                      for t, s in loc.ranked]
            out.append(LocalizationResult(rec.query_id, ranked, loc.position_xy, truth,
                                          loc.position_latlon, tuple(rec.position_global)))
        return out

    def score(self, X, y=None, eta: float = 25.0) -> float:
        """Recall@1 at ``eta`` meters over dataset records."""
        return recall_at_k(self.evaluate(X), 1, eta)
