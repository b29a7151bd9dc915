"""Direction-aware symbolic descriptors and exhaustive cosine retrieval.

A descriptor is five vocabulary-wide blocks (TNSWE order by default). Text
blocks are one-hot on the hinted class; map blocks mark, with IDF weights,
every class present under the corresponding direction mask of the tile.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import vocab
from ._validation import check_order, check_queries, check_tiles
from .textgen import Hint, rarity_weights
from .tiler import TileRaster
from .visibility import DIRECTIONS, PolarSpec, direction_masks

N_BLOCKS = len(DIRECTIONS)
BLOCK = vocab.VOCAB_SIZE
DIM = N_BLOCKS * BLOCK  # 245

INDEX_MAGIC = b"TOLI"
INDEX_VERSION = 1
_INDEX_HEADER = struct.Struct("<4sBII")


class IndexFormatError(ValueError):
    pass


def _block_slots(order: str) -> tuple[int, ...]:
    # slot position of each TNSWE direction in the fused vector
    perm = check_order(order)
    slots = [0] * N_BLOCKS
    for pos, d in enumerate(perm):
        slots[d] = pos
    return tuple(slots)


def encode_text(hints: Sequence[Hint], order: str = "TNSWE") -> np.ndarray:
    """One-hot per direction block; ``None`` hints leave their block zero."""
    slots = _block_slots(order)
    out = np.zeros(DIM, dtype=np.float32)
    seen = set()
    for h in hints:
        d = DIRECTIONS.index(h.direction)
        if d in seen:
            raise ValueError(f"duplicate hint for direction {h.direction}")
        seen.add(d)
        if h.semantic is None:
            continue
        cls = vocab.by_id(h.semantic.id)
        out[slots[d] * BLOCK + cls.id - 1] = 1.0
    return out


@lru_cache(maxsize=8)
def _mask_labels(P: int, polar: PolarSpec) -> np.ndarray:
    masks = direction_masks(P, polar)
    labels = np.full((P, P), -1, dtype=np.int64)
    for i in range(N_BLOCKS):
        labels[masks[i].astype(bool)] = i
    labels.setflags(write=False)
    return labels


def encode_tile(raster: TileRaster, polar: PolarSpec, idf, order: str = "TNSWE") -> np.ndarray:
    """IDF-weighted class presence per direction mask, each block L2-normalised."""
    idf = np.asarray(idf, dtype=np.float64)
    labels = _mask_labels(raster.spec.P, polar)
    counts = np.zeros(N_BLOCKS * vocab.N_IDS, dtype=np.int64)
    for k in range(3):
        ids = raster.channels[k].astype(np.int64)
        sel = (ids > 0) & (labels >= 0)
        counts += np.bincount(labels[sel] * vocab.N_IDS + ids[sel], minlength=counts.size)
    present = counts.reshape(N_BLOCKS, vocab.N_IDS)[:, 1:] > 0
    blocks = np.where(present, idf[1:][None, :], 0.0)
    norms = np.linalg.norm(blocks, axis=1, keepdims=True)
    blocks = np.divide(blocks, norms, out=np.zeros_like(blocks), where=norms > 0)
    slots = _block_slots(order)
    out = np.zeros((N_BLOCKS, BLOCK), dtype=np.float64)
    for d in range(N_BLOCKS):
        out[slots[d]] = blocks[d]
    return out.reshape(-1).astype(np.float32)


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass(eq=False)
class TileIndex:
    descriptors: np.ndarray  # (Z, DIM) float32, rows sorted by tile_id
    tile_ids: list[str]
    centers_latlon: np.ndarray  # (Z, 2)
    centers_xy: np.ndarray  # (Z, 2)
    idf: np.ndarray  # (N_IDS,)
    config: dict = field(default_factory=dict)
    tiles_dir: str | None = None

    def __post_init__(self):
        if len(self.descriptors) != len(self.tile_ids):
            raise ValueError("descriptor rows and metadata rows differ")
        d = self.descriptors.astype(np.float64)
        self._unit = d / np.where((n := np.linalg.norm(d, axis=1, keepdims=True)) > 0, n, 1.0)
        self._row = {t: i for i, t in enumerate(self.tile_ids)}

    def __len__(self) -> int:
        return len(self.tile_ids)

    def row_of(self, tile_id: str) -> int:
        return self._row[tile_id]

    def scores(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).ravel()
        if q.shape[0] != self.descriptors.shape[1]:
            raise ValueError(f"dimension mismatch: {q.shape[0]} vs {self.descriptors.shape[1]}")
        n = np.linalg.norm(q)
        if n == 0:
            return np.zeros(len(self))
        return self._unit @ (q / n)


def build_index(
    rasters: Sequence[TileRaster],
    polar: PolarSpec | None = None,
    order: str = "TNSWE",
    config: dict | None = None,
) -> TileIndex:
    """Compute IDF over ``rasters`` and encode every tile."""
    rasters = check_tiles(rasters)
    ids = [r.tile_id for r in rasters]
    dup = sorted({t for t in ids if ids.count(t) > 1}) if len(set(ids)) != len(ids) else []
    if dup:
        raise ValueError(f"duplicate tile_id(s): {', '.join(dup)}")
    polar = polar or PolarSpec.for_tile(rasters[0].spec)
    idf = rarity_weights(rasters)
    rasters = sorted(rasters, key=lambda r: r.tile_id)
    desc = np.stack([encode_tile(r, polar, idf, order) for r in rasters])
    cfg = {"H": polar.H, "delta": rasters[0].spec.delta, "U": polar.U, "V": polar.V,
           "sigma": polar.sigma, "order": order.upper()}
    cfg.update(config or {})
    return TileIndex(
        desc, [r.tile_id for r in rasters],
        np.array([[r.center.lat, r.center.lon] for r in rasters], dtype=np.float64),
        np.array([r.center_xy for r in rasters], dtype=np.float64),
        idf, cfg)


def retrieve(index: TileIndex, query, K: int) -> list[tuple[str, float]]:
    """Top-``min(K, Z)`` tiles by cosine score; ties go to the smaller tile_id."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if len(index) == 0:
        raise ValueError("cannot retrieve from an empty index")
    s = index.scores(query)
    # rows are sorted by tile_id, so a stable sort settles ties
    order = np.argsort(-s, kind="stable")[:K]
    return [(index.tile_ids[i], float(s[i])) for i in order]


# -- file format -------------------------------------------------------------

def encode_index(index: TileIndex) -> bytes:
    Z, dim = index.descriptors.shape
    parts = [_INDEX_HEADER.pack(INDEX_MAGIC, INDEX_VERSION, Z, dim),
             index.descriptors.astype("<f4").tobytes(order="C")]
    for i, t in enumerate(index.tile_ids):
        meta = {"tile_id": t,
                "center_latlon": [float(v) for v in index.centers_latlon[i]],
                "center_xy": [float(v) for v in index.centers_xy[i]]}
        parts.append((json.dumps(meta) + "\n").encode("utf-8"))
    trailer = {"idf": {c.name: float(index.idf[c.id]) for c in vocab.CLASSES},
               "config": index.config}
    parts.append((json.dumps(trailer) + "\n").encode("utf-8"))
    return b"".join(parts)


def decode_index(data: bytes) -> TileIndex:
    if len(data) < _INDEX_HEADER.size:
        raise IndexFormatError("truncated index header")
    magic, version, Z, dim = _INDEX_HEADER.unpack_from(data, 0)
    if magic != INDEX_MAGIC:
        raise IndexFormatError(f"bad magic {magic!r}")
    if version != INDEX_VERSION:
        raise IndexFormatError(f"unsupported index version {version}")
    if dim != DIM:
        raise IndexFormatError(f"descriptor dimension {dim}, expected {DIM}")
    start = _INDEX_HEADER.size
    end = start + 4 * Z * dim
    if len(data) < end:
        raise IndexFormatError(f"truncated descriptor block: expected {end} bytes, got {len(data)}")
    desc = np.frombuffer(data, dtype="<f4", count=Z * dim, offset=start).reshape(Z, dim).astype(np.float32)
    lines = data[end:].decode("utf-8").splitlines()
    if len(lines) != Z + 1:
        raise IndexFormatError(f"expected {Z} metadata lines plus trailer, got {len(lines)} lines")
    metas = [json.loads(line) for line in lines[:Z]]
    trailer = json.loads(lines[Z])
    idf = np.zeros(vocab.N_IDS)
    missing = [c.name for c in vocab.CLASSES if c.name not in trailer["idf"]]
    if missing:
        raise IndexFormatError(f"idf table misses classes: {missing}")
    for c in vocab.CLASSES:
        idf[c.id] = trailer["idf"][c.name]
    return TileIndex(
        desc, [m["tile_id"] for m in metas],
        np.array([m["center_latlon"] for m in metas], dtype=np.float64).reshape(Z, 2),
        np.array([m["center_xy"] for m in metas], dtype=np.float64).reshape(Z, 2),
        idf, trailer.get("config", {}))


def save_index(index: TileIndex, path) -> None:
    Path(path).write_bytes(encode_index(index))


def load_index(path) -> TileIndex:
    return decode_index(Path(path).read_bytes())


# -- estimator ---------------------------------------------------------------

class TileRetriever(BaseEstimator):
    """Place recognition: rank database tiles for five-sentence queries.

    ``fit`` takes the tile database; queries may be :class:`QueryRecord`
    objects, hint lists or raw sentence lists.
    """

    def __init__(self, n_candidates: int = 10, V: int = 360, sigma: float = 3.0, order: str = "TNSWE"):
        self.n_candidates = n_candidates
        self.V = V
        self.sigma = sigma
        self.order = order

    def fit(self, tiles, y=None):
        tiles = check_tiles(tiles)
        check_order(self.order)
        self.polar_ = PolarSpec.for_tile(tiles[0].spec, self.V, self.sigma)
        self.index_ = build_index(tiles, self.polar_, self.order)
        return self

    @classmethod
    def from_index(cls, index: TileIndex, n_candidates: int = 10) -> "TileRetriever":
        cfg = index.config
        est = cls(n_candidates, int(cfg.get("V", 360)), float(cfg.get("sigma", 3.0)), cfg.get("order", "TNSWE"))
        est.polar_ = PolarSpec(float(cfg.get("H", 50.0)), int(cfg.get("U", 25)), est.V, est.sigma)
        est.index_ = index
        return est

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "index_")
        return np.stack([encode_text(h, self.order) for h in check_queries(X)])

    def decision_function(self, X) -> np.ndarray:
        """Cosine score of every query against every indexed tile."""
        return np.stack([self.index_.scores(q) for q in self.transform(X)])

    def kneighbors(self, X, n_candidates: int | None = None) -> list[list[tuple[str, float]]]:
        K = self.n_candidates if n_candidates is None else n_candidates
        return [retrieve(self.index_, q, K) for q in self.transform(X)]

    def predict(self, X) -> np.ndarray:
        return np.array([ranked[0][0] for ranked in self.kneighbors(X, 1)], dtype=object)
