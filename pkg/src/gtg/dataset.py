"""Offline dataset loading, score/design normalization and neighbor queries."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

logger = logging.getLogger(__name__)

SPACE_KINDS = ("continuous", "discrete")

# Dense storage above this size is refused unless explicitly requested.
DENSE_MAX_N = 50_000


class DatasetError(ValueError):
    """Raised for malformed or degenerate dataset input."""


@dataclass(frozen=True)
class OfflineDataset:
    designs: np.ndarray
    scores: np.ndarray
    x_min: np.ndarray
    x_max: np.ndarray
    y_min: float
    y_max: float
    space_kind: str = "continuous"

    @property
    def n(self) -> int:
        return int(self.scores.shape[0])

    @property
    def dim(self) -> int:
        return int(self.designs.shape[1])

    @property
    def normalized_scores(self) -> np.ndarray:
        return normalize_score(self, self.scores)

    def subset(self, rows) -> "OfflineDataset":
        """Rows selected by index, with normalization stats recomputed."""
        rows = np.asarray(rows)
        return make_dataset(self.designs[rows], self.scores[rows], self.space_kind)


def make_dataset(designs, scores, space_kind: str = "continuous") -> OfflineDataset:
    designs = np.array(designs, dtype=np.float64)
    scores = np.array(scores, dtype=np.float64).reshape(-1)
    if designs.ndim == 1:
        designs = designs[:, None]
    if designs.ndim != 2:
        raise DatasetError(f"designs must be 2-D, got shape {designs.shape}")
    if designs.shape[0] != scores.shape[0]:
        raise DatasetError(
            f"{designs.shape[0]} designs but {scores.shape[0]} scores"
        )
    if scores.shape[0] < 1:
        raise DatasetError("dataset is empty")
    if space_kind not in SPACE_KINDS:
        raise DatasetError(f"unknown space kind {space_kind!r}")
    if not (np.all(np.isfinite(designs)) and np.all(np.isfinite(scores))):
        raise DatasetError("dataset contains non-finite values")
    y_min, y_max = float(scores.min()), float(scores.max())
    if not y_min < y_max:
        raise DatasetError(f"constant scores (y_min == y_max == {y_min})")
    designs.setflags(write=False)
    scores.setflags(write=False)
    return OfflineDataset(
        designs=designs,
        scores=scores,
        x_min=designs.min(axis=0),
        x_max=designs.max(axis=0),
        y_min=y_min,
        y_max=y_max,
        space_kind=space_kind,
    )


def _parse_float(text: str, row: int) -> float:
    try:
        return float(text)
    except ValueError:
        raise DatasetError(f"row {row}: cannot parse {text!r} as a number") from None


def _load_csv(path: Path, space_kind: str | None):
    designs, scores = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r and any(c.strip() for c in r)]
    if not rows:
        raise DatasetError(f"{path}: no rows")
    header = [c.strip() for c in rows[0]]
    # A header is present when its first cell is not numeric.
    try:
        float(header[0])
        body, start = rows, 1
    except ValueError:
        body, start = rows[1:], 2
        if header and header[-1] != "y":
            raise DatasetError(f"{path}: last header column must be 'y', got {header[-1]!r}")
    width = None
    for offset, row in enumerate(body):
        row_no = start + offset
        values = [_parse_float(c.strip(), row_no) for c in row]
        if len(values) < 2:
            raise DatasetError(f"row {row_no}: need at least one design column and a score")
        if width is None:
            width = len(values)
        elif len(values) != width:
            raise DatasetError(
                f"row {row_no}: inconsistent dimensionality ({len(values) - 1} vs {width - 1})"
            )
        designs.append(values[:-1])
        scores.append(values[-1])
    return designs, scores, space_kind or "continuous"


def _load_json(path: Path, space_kind: str | None):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    try:
        designs = payload["designs"]
        scores = payload["scores"]
    except (KeyError, TypeError):
        raise DatasetError(f"{path}: expected keys 'designs' and 'scores'") from None
    if len(designs) != len(scores):
        raise DatasetError(f"{path}: {len(designs)} designs but {len(scores)} scores")
    width = None
    for i, row in enumerate(designs):
        if not isinstance(row, list):
            raise DatasetError(f"row {i}: design must be a list")
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise DatasetError(f"row {i}: inconsistent dimensionality ({len(row)} vs {width})")
        for v in row:
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise DatasetError(f"row {i}: non-numeric design entry {v!r}")
    for i, v in enumerate(scores):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise DatasetError(f"row {i}: non-numeric score {v!r}")
    return designs, scores, space_kind or payload.get("space", "continuous")


def load_dataset(path, format: str | None = None, space_kind: str | None = None) -> OfflineDataset:
    """Read a dataset from CSV (``x0,...,x{d-1},y``) or JSON.

    ``format`` defaults to the file suffix. ``space_kind`` overrides the
    JSON ``space`` flag; CSV files default to continuous.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        designs, scores, kind = _load_csv(path, space_kind)
    elif fmt == "json":
        designs, scores, kind = _load_json(path, space_kind)
    else:
        raise DatasetError(f"unsupported dataset format {fmt!r}")
    if len(scores) == 0:
        raise DatasetError(f"{path}: no data rows")
    return make_dataset(designs, scores, kind)


def save_dataset(ds: OfflineDataset, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "csv":
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"x{i}" for i in range(ds.dim)] + ["y"])
            for x, y in zip(ds.designs, ds.scores):
                writer.writerow([repr(float(v)) for v in x] + [repr(float(y))])
    elif fmt == "json":
        payload = {
            "designs": ds.designs.tolist(),
            "scores": ds.scores.tolist(),
            "space": ds.space_kind,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh)
    else:
        raise DatasetError(f"unsupported dataset format {fmt!r}")


def normalize_score(ds: OfflineDataset, y):
    return (np.asarray(y, dtype=np.float64) - ds.y_min) / (ds.y_max - ds.y_min)


def denormalize_score(ds: OfflineDataset, y_norm):
    return np.asarray(y_norm, dtype=np.float64) * (ds.y_max - ds.y_min) + ds.y_min


def normalize_designs(ds: OfflineDataset, x):
    """Min-max scale designs per dimension to [-1, 1]."""
    span = np.where(ds.x_max > ds.x_min, ds.x_max - ds.x_min, 1.0)
    return 2.0 * (np.asarray(x, dtype=np.float64) - ds.x_min) / span - 1.0


def denormalize_designs(ds: OfflineDataset, x_scaled):
    span = np.where(ds.x_max > ds.x_min, ds.x_max - ds.x_min, 1.0)
    return (np.asarray(x_scaled, dtype=np.float64) + 1.0) * 0.5 * span + ds.x_min


def percentile_value(scores, p: float) -> float:
    """Nearest-rank p-th percentile of ``scores``."""
    if not 0.0 < p <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {p}")
    ordered = np.sort(np.asarray(scores, dtype=np.float64))
    rank = max(1, math.ceil(p / 100.0 * ordered.shape[0]))
    return float(ordered[rank - 1])


def sample_low_percentile(ds: OfflineDataset, p: float, rng: np.random.Generator) -> int:
    """Index of a uniformly drawn point whose score is at most the p-th percentile."""
    cutoff = percentile_value(ds.scores, p)
    eligible = np.flatnonzero(ds.scores <= cutoff)
    return int(eligible[rng.integers(eligible.shape[0])])


def pairwise_distances(a: np.ndarray, b: np.ndarray, space_kind: str) -> np.ndarray:
    if space_kind == "discrete":
        # scipy returns the mismatch fraction; scale to a count.
        return cdist(a, b, metric="hamming") * a.shape[1]
    return cdist(a, b, metric="euclidean")


@dataclass
class NeighborIndex:
    """Pairwise design distances with per-row orderings.

    ``dense=True`` precomputes the full N x N matrix (float64, plus int32
    orderings: roughly 12 bytes * N^2). With ``dense=False`` rows are
    computed on demand and nothing is cached.
    """

    designs: np.ndarray
    space_kind: str = "continuous"
    dense: bool = True
    build_seconds: float = 0.0
    _distances: np.ndarray | None = field(default=None, repr=False)
    _order: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return int(self.designs.shape[0])

    def row(self, i: int) -> np.ndarray:
        if self._distances is not None:
            return self._distances[i]
        return pairwise_distances(self.designs[i : i + 1], self.designs, self.space_kind)[0]

    def order(self, i: int) -> np.ndarray:
        """Indices sorted by distance from ``i``; ties go to the smaller index."""
        if self._order is not None:
            return self._order[i]
        return np.argsort(self.row(i), kind="stable")

    @property
    def distances(self) -> np.ndarray:
        if self._distances is None:
            return pairwise_distances(self.designs, self.designs, self.space_kind)
        return self._distances


def build_neighbor_index(ds: OfflineDataset, dense: bool | None = None) -> NeighborIndex:
    if dense is None:
        dense = ds.n <= DENSE_MAX_N
    start = time.perf_counter()
    index = NeighborIndex(designs=ds.designs, space_kind=ds.space_kind, dense=dense)
    if dense:
        dist = pairwise_distances(ds.designs, ds.designs, ds.space_kind)
        np.fill_diagonal(dist, 0.0)
        # Symmetrize so floating-point asymmetry cannot reorder ties.
        dist = np.minimum(dist, dist.T)
        dist.setflags(write=False)
        order = np.argsort(dist, axis=1, kind="stable").astype(np.int32)
        order.setflags(write=False)
        index._distances = dist
        index._order = order
    index.build_seconds = time.perf_counter() - start
    logger.info(
        "neighbor index for N=%d (%s) built in %.3fs",
        ds.n,
        "dense" if dense else "on-the-fly",
        index.build_seconds,
    )
    return index


def knn_above_threshold(
    idx: NeighborIndex, ds: OfflineDataset, center: int, k: int, threshold: float
) -> np.ndarray:
    """Up to ``k`` nearest neighbors of ``center`` with raw score > ``threshold``.

    The center itself is never returned. Results are in non-decreasing
    distance order; an empty array means nothing qualifies.
    """
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    if not 0 <= center < ds.n:
        raise IndexError(f"center {center} out of range for N={ds.n}")
    order = idx.order(center)
    keep = (ds.scores[order] > threshold) & (order != center)
    return order[keep][:k].astype(np.int64)
