"""Place-recognition and localization metrics, and the JSON/CSV reports."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class EvalConfig:
    recall_K: tuple[int, ...] = (1, 5, 10)
    revisit_eta: tuple[float, ...] = (10.0, 25.0)
    sr_thresholds: tuple[float, ...] = (5.0, 10.0, 25.0)
    le_percentiles: tuple[float, ...] = (5.0, 10.0, 25.0)

    def __post_init__(self):
        for name in ("recall_K", "revisit_eta", "sr_thresholds", "le_percentiles"):
            values = getattr(self, name)
            if not values or any(v <= 0 for v in values):
                raise ValueError(f"{name} must be a non-empty list of positive values")
        if any(p > 100 for p in self.le_percentiles):
            raise ValueError("percentiles must lie in (0, 100]")


@dataclass
class RankedTile:
    tile_id: str
    center_xy: tuple[float, float]
    score: float


@dataclass
class LocalizationResult:
    query_id: str
    ranked: list[RankedTile]
    predicted_xy: tuple[float, float]
    truth_xy: tuple[float, float]
    predicted_latlon: tuple[float, float] | None = None
    truth_latlon: tuple[float, float] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        scores = [r.score for r in self.ranked]
        if any(b > a for a, b in zip(scores, scores[1:])):
            raise ValueError(f"{self.query_id}: ranked tiles must be non-increasing in score")

    @property
    def error(self) -> float:
        return math.hypot(self.predicted_xy[0] - self.truth_xy[0], self.predicted_xy[1] - self.truth_xy[1])

    def tile_distance(self, rank: int = 0) -> float:
        c = self.ranked[rank].center_xy
        return math.hypot(c[0] - self.truth_xy[0], c[1] - self.truth_xy[1])


def recall_at_k(results: Sequence[LocalizationResult], K: int, eta: float) -> float:
    """Fraction of queries with a top-``K`` tile center within ``eta`` meters."""
    if not results:
        raise ValueError("recall is undefined for an empty result list")
    hits = 0
    for res in results:
        if not res.ranked:
            raise ValueError(f"{res.query_id}: no retrieved tiles")
        top = res.ranked[:K]
        centers = np.array([t.center_xy for t in top], dtype=np.float64)
        d = np.hypot(centers[:, 0] - res.truth_xy[0], centers[:, 1] - res.truth_xy[1])
        hits += bool(d.min() <= eta)
    return hits / len(results)


def success_rate(errors: Sequence[float], threshold: float) -> float:
    """Fraction of errors strictly below ``threshold``."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise ValueError("success rate is undefined for an empty error list")
    return float(np.count_nonzero(errors < threshold)) / errors.size


def loc_error_percentiles(errors: Sequence[float], pcts: Sequence[float]) -> list[float]:
    """Nearest-rank percentiles: the ceil(p*n/100)-th smallest error."""
    values = np.sort(np.asarray(errors, dtype=np.float64))
    n = values.size
    if n == 0:
        raise ValueError("percentiles are undefined for an empty error list")
    out = []
    for p in pcts:
        if not 0 < p <= 100:
            raise ValueError(f"percentile {p} outside (0, 100]")
        rank = math.ceil(Fraction(str(p)) * n / 100)
        out.append(float(values[max(rank, 1) - 1]))
    return out


def _key(v: float) -> str:
    return f"{v:g}"


def report(
    results: Sequence[LocalizationResult],
    config: EvalConfig = EvalConfig(),
    metadata: dict | None = None,
    verbose: bool = False,
) -> dict:
    """Metric report with a fixed key order; serialise with :func:`dump_report`."""
    errors = [r.error for r in results]
    out: dict = {"n_queries": len(results)}
    out["recall"] = {
        f"eta={_key(eta)}": {f"R@{k}": recall_at_k(results, k, eta) for k in config.recall_K}
        for eta in config.revisit_eta
    }
    out["success_rate"] = {f"SR@{_key(t)}m": success_rate(errors, t) for t in config.sr_thresholds}
    out["loc_error_percentiles"] = {
        f"LE@{_key(p)}%": v
        for p, v in zip(config.le_percentiles, loc_error_percentiles(errors, config.le_percentiles))
    }
    out["median_error"] = float(np.median(errors))
    out["metadata"] = metadata or {}
    if verbose:
        out["per_query"] = [
            {"query_id": r.query_id, "error": r.error, "top1_distance": r.tile_distance(0),
             "top1_tile": r.ranked[0].tile_id,
             "predicted_xy": list(r.predicted_xy), "truth_xy": list(r.truth_xy)}
            for r in results
        ]
    return out


def dump_report(doc: dict) -> str:
    return json.dumps(doc, indent=2) + "\n"


def per_query_csv(results: Sequence[LocalizationResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "error", "top1_distance"])
    for r in results:
        w.writerow([r.query_id, repr(r.error), repr(r.tile_distance(0))])
    return buf.getvalue()
