"""Polar-grid visibility around a query point and directional grouping.

Angles are counter-clockwise from +x (east), so north is pi/2. Polar cells are
sampled at the single raster pixel containing the cell center; only
``building`` pixels in the area channel occlude.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

from . import vocab
from .tiler import TileRaster, TileSpec


class Direction(str, Enum):
    TOP = "top"
    NORTH = "north"
    SOUTH = "south"
    WEST = "west"
    EAST = "east"

    def __str__(self) -> str:
        return self.value


# fusion order of descriptor blocks and hint sentences
DIRECTIONS: tuple[Direction, ...] = (
    Direction.TOP, Direction.NORTH, Direction.SOUTH, Direction.WEST, Direction.EAST)
DIRECTION_INDEX = {d: i for i, d in enumerate(DIRECTIONS)}


@dataclass(frozen=True)
class PolarSpec:
    H: float = 50.0
    U: int = 25
    V: int = 360
    sigma: float = 3.0

    def __post_init__(self):
        if self.U < 1 or self.V < 1:
            raise ValueError("U and V must be >= 1")
        if not 0 <= self.sigma < self.H / 2:
            raise ValueError("sigma must lie in [0, H/2)")

    @classmethod
    def for_tile(cls, tile: TileSpec, V: int = 360, sigma: float = 3.0) -> "PolarSpec":
        return cls(tile.H, max(1, int(round(tile.H / 2))), V, sigma)

    @property
    def radius(self) -> float:
        return self.H / 2.0

    @property
    def dr(self) -> float:
        return self.H / (2.0 * self.U)

    @property
    def da(self) -> float:
        return 2.0 * math.pi / self.V


@dataclass(eq=False)
class VisibilityMask:
    grid: np.ndarray  # (U, V) bool
    origin: tuple[float, float]

    def is_suffix_occluded(self) -> bool:
        # once False along a sector, stays False
        g = self.grid
        return bool(np.all(g[1:] <= g[:-1]))


def polar_cell(u: int, v: int, spec: PolarSpec = PolarSpec()) -> tuple[float, float]:
    """Center (r meters, phi radians) of polar cell ``(u, v)``."""
    if not (0 <= u < spec.U and 0 <= v < spec.V):
        raise IndexError(f"polar cell ({u}, {v}) outside {spec.U}x{spec.V} grid")
    return (u + 0.5) * spec.dr, (v + 0.5) * spec.da


def _label(r: float, phi: float, sigma: float) -> Direction:
    if r <= sigma:
        return Direction.TOP
    q = math.pi / 4
    if phi < q or phi >= 7 * q:
        return Direction.EAST
    if phi < 3 * q:
        return Direction.NORTH
    if phi < 5 * q:
        return Direction.WEST
    return Direction.SOUTH


def direction_of(u: int, v: int, spec: PolarSpec = PolarSpec()) -> Direction:
    r, phi = polar_cell(u, v, spec)
    return _label(r, phi, spec.sigma)


@lru_cache(maxsize=16)
def direction_table(spec: PolarSpec) -> np.ndarray:
    """(U, V) int array of direction indices in TNSWE order."""
    table = np.empty((spec.U, spec.V), dtype=np.int64)
    for u in range(spec.U):
        for v in range(spec.V):
            table[u, v] = DIRECTION_INDEX[direction_of(u, v, spec)]
    table.setflags(write=False)
    return table


@lru_cache(maxsize=16)
def _ray_offsets(spec: PolarSpec) -> tuple[np.ndarray, np.ndarray]:
    r = (np.arange(spec.U) + 0.5) * spec.dr
    phi = (np.arange(spec.V) + 0.5) * spec.da
    dx = r[:, None] * np.cos(phi)[None, :]
    dy = r[:, None] * np.sin(phi)[None, :]
    dx.setflags(write=False)
    dy.setflags(write=False)
    return dx, dy


def _check_origin(raster: TileRaster, origin) -> tuple[float, float]:
    x, y = float(origin[0]), float(origin[1])
    h = raster.spec.half
    if not (-h <= x <= h and -h <= y <= h):
        raise ValueError(f"origin ({x}, {y}) lies outside the {raster.spec.H} m tile")
    return x, y


@lru_cache(maxsize=16)
def _ray_pixel_offsets(spec: PolarSpec, delta: float) -> tuple[np.ndarray, np.ndarray]:
    dx, dy = _ray_offsets(spec)
    bx, by = (dx / delta).ravel(), (dy / delta).ravel()
    bx.setflags(write=False)
    by.setflags(write=False)
    return bx, by


def _packed(raster: TileRaster) -> np.ndarray:
    ch = raster.channels.astype(np.uint32)
    return (ch[0] | (ch[1] << 8) | (ch[2] << 16)).ravel()


def _sample(raster: TileRaster, origins: np.ndarray, spec: PolarSpec, packed: np.ndarray | None = None):
    """Sample the raster at every polar cell for each origin.

    Returns ``(samples, visible)``: samples is (N, U*V) uint32 with the node,
    way and area ids packed into bytes 0, 1 and 2 (0 outside the tile);
    visible is (N, U*V) bool. Cells are flattened u-major.
    """
    ts = raster.spec
    bx, by = _ray_pixel_offsets(spec, ts.delta)
    ax = (origins[:, 0] + ts.half) / ts.delta
    ay = (ts.half - origins[:, 1]) / ts.delta
    col = np.floor(ax[:, None] + bx[None, :]).astype(np.int32)
    row = np.floor(ay[:, None] - by[None, :]).astype(np.int32)
    P = ts.P
    inside = (row >= 0) & (row < P) & (col >= 0) & (col < P)
    flat = np.where(inside, row * P + col, 0)
    if packed is None:
        packed = _packed(raster)
    samples = np.where(inside, packed[flat], 0)
    n = len(origins)
    building = ((samples >> 16) == vocab.BUILDING.id).reshape(n, spec.U, spec.V)
    # first occluding bin per sector; U when unoccluded
    first = np.where(building.any(axis=1), building.argmax(axis=1), spec.U)
    u_idx = np.arange(spec.U)[None, :, None]
    visible = inside & (u_idx <= first[:, None, :]).reshape(n, -1)
    return samples, visible


def cast_visibility(raster: TileRaster, origin, spec: PolarSpec = PolarSpec()) -> VisibilityMask:
    x, y = _check_origin(raster, origin)
    _, visible = _sample(raster, np.array([[x, y]]), spec)
    return VisibilityMask(visible[0].reshape(spec.U, spec.V), (x, y))


def visible_objects(raster: TileRaster, origin, spec: PolarSpec = PolarSpec()) -> dict[Direction, dict[int, float]]:
    """Visible classes per direction, each with the smallest radius it was seen at."""
    x, y = _check_origin(raster, origin)
    samples, visible = _sample(raster, np.array([[x, y]]), spec)
    samples, visible = samples[0], visible[0]
    labels = direction_table(spec).ravel()
    r = np.repeat((np.arange(spec.U) + 0.5) * spec.dr, spec.V)
    best = np.full(len(DIRECTIONS) * vocab.N_IDS, np.inf)
    for k in range(3):
        ids = ((samples >> (8 * k)) & 0xFF).astype(np.int64)
        sel = visible & (ids > 0)
        np.minimum.at(best, labels[sel] * vocab.N_IDS + ids[sel], r[sel])
    best = best.reshape(len(DIRECTIONS), vocab.N_IDS)
    out: dict[Direction, dict[int, float]] = {}
    for d, row in zip(DIRECTIONS, best):
        seen = np.flatnonzero(np.isfinite(row))
        out[d] = {int(c): float(row[c]) for c in seen}
    return out


def visible_presence(raster: TileRaster, origins, spec: PolarSpec = PolarSpec(), chunk: int = 128) -> np.ndarray:
    """Boolean (N, 5, N_IDS) table: class visible in direction, per origin."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 2)
    labels = direction_table(spec).ravel()
    n_dir = len(DIRECTIONS)
    packed = _packed(raster)
    out = np.zeros((len(origins), n_dir, vocab.N_IDS), dtype=bool)
    for s in range(0, len(origins), chunk):
        block = origins[s:s + chunk]
        samples, visible = _sample(raster, block, spec, packed)
        n = len(block)
        base = (np.arange(n)[:, None] * n_dir + labels[None]) * vocab.N_IDS
        counts = np.zeros(n * n_dir * vocab.N_IDS, dtype=np.int64)
        for k in range(3):
            ids = ((samples >> (8 * k)) & 0xFF).astype(np.int64)
            sel = visible & (ids > 0)
            counts += np.bincount((base + ids)[sel], minlength=counts.size)
        out[s:s + n] = (counts > 0).reshape(n, n_dir, vocab.N_IDS)
    return out


def hint_presence(raster: TileRaster, origins, pairs, spec: PolarSpec = PolarSpec(), chunk: int = 128) -> np.ndarray:
    """For each origin and each ``(direction_index, class_id)`` pair, whether
    that class is visible in that direction. Returns (N, len(pairs)) bool."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 2)
    labels = direction_table(spec).ravel()
    packed = _packed(raster)
    out = np.zeros((len(origins), len(pairs)), dtype=bool)
    for s in range(0, len(origins), chunk):
        block = origins[s:s + chunk]
        samples, visible = _sample(raster, block, spec, packed)
        for j, (d, cid) in enumerate(pairs):
            shift = 8 * vocab.CHANNEL_OF_KIND[vocab.by_id(cid).kind]
            cells = labels == d
            hit = (((samples[:, cells] >> shift) & 0xFF) == cid) & visible[:, cells]
            out[s:s + len(block), j] = hit.any(axis=1)
    return out


def direction_masks(P: int, spec: PolarSpec = PolarSpec()) -> np.ndarray:
    """Five (P, P) binary masks, TNSWE order, over a P x P grid spanning H.

    Each grid cell is labelled through the polar cell containing its center;
    cells farther than H/2 from the grid center belong to no mask.
    """
    if P < 1:
        raise ValueError("P must be >= 1")
    cell = spec.H / P
    idx = np.arange(P) + 0.5
    x = -spec.radius + idx * cell
    y = spec.radius - idx * cell
    X, Y = np.meshgrid(x, y)
    r = np.hypot(X, Y)
    phi = np.mod(np.arctan2(Y, X), 2 * math.pi)
    u = np.minimum((r / spec.dr).astype(np.int64), spec.U - 1)
    v = np.minimum((phi / spec.da).astype(np.int64), spec.V - 1)
    labels = direction_table(spec)[u, v]
    in_disk = r <= spec.radius
    masks = np.zeros((len(DIRECTIONS), P, P), dtype=np.uint8)
    for i in range(len(DIRECTIONS)):
        masks[i] = (labels == i) & in_disk
    return masks
