"""Black-box oracles, dataset generators/corrupters and candidate evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.spatial.distance import pdist

from .dataset import OfflineDataset, make_dataset, normalize_score, denormalize_score

logger = logging.getLogger(__name__)

BRANIN_BOUNDS = np.array([[-5.0, 10.0], [0.0, 15.0]])
BRANIN_MAXIMA = ((-math.pi, 12.275), (math.pi, 2.275), (9.42478, 2.475))
BRANIN_OPTIMUM = -5.0 / (4.0 * math.pi)


def branin(x1, x2):
    """Negated Branin; maximum -0.39789 at three points in [-5, 10] x [0, 15]."""
    a = 1.0
    b = 5.1 / (4.0 * math.pi**2)
    c = 5.0 / math.pi
    r = 6.0
    s = 10.0
    t = 1.0 / (8.0 * math.pi)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    return -a * (x2 - b * x1**2 + c * x1 - r) ** 2 - s * (1.0 - t) * np.cos(x1) - s


@dataclass(frozen=True)
class Oracle:
    name: str
    evaluate: Callable[[np.ndarray], np.ndarray]  # (n, d) -> (n,)
    bounds: np.ndarray  # (d, 2)
    known_optimum: float | None = None
    argmaxes: tuple = ()

    def __call__(self, designs) -> np.ndarray:
        designs = np.atleast_2d(np.asarray(designs, dtype=np.float64))
        return self.evaluate(designs)

    def clamp(self, designs) -> tuple[np.ndarray, int]:
        """Designs clipped into the box, and the number of rows that moved."""
        designs = np.atleast_2d(np.asarray(designs, dtype=np.float64))
        clipped = np.clip(designs, self.bounds[:, 0], self.bounds[:, 1])
        moved = int(np.any(clipped != designs, axis=1).sum())
        return clipped, moved


def branin_oracle() -> Oracle:
    return Oracle(
        name="branin",
        evaluate=lambda x: branin(x[:, 0], x[:, 1]),
        bounds=BRANIN_BOUNDS.copy(),
        known_optimum=BRANIN_OPTIMUM,
        argmaxes=BRANIN_MAXIMA,
    )


ORACLES = {"branin": branin_oracle}


def get_oracle(name: str) -> Oracle:
    try:
        return ORACLES[name]()
    except KeyError:
        raise ValueError(f"unknown task {name!r}; available: {sorted(ORACLES)}") from None


def make_oracle_dataset(oracle: Oracle, n_samples: int, trim_top_fraction: float,
                        rng: np.random.Generator) -> OfflineDataset:
    """Uniform samples over the oracle box with the top fraction by score removed."""
    if n_samples < 10:
        raise ValueError(f"n_samples must be >= 10, got {n_samples}")
    if not 0.0 <= trim_top_fraction < 1.0:
        raise ValueError(f"trim_top_fraction must be in [0, 1), got {trim_top_fraction}")
    lo, hi = oracle.bounds[:, 0], oracle.bounds[:, 1]
    designs = rng.uniform(lo, hi, size=(n_samples, lo.size))
    scores = oracle(designs)
    n_drop = int(round(n_samples * trim_top_fraction))
    keep = np.sort(np.argsort(scores, kind="stable")[: n_samples - n_drop])
    return make_dataset(designs[keep], scores[keep])


def make_branin_dataset(n_samples: int = 5000, trim_top_fraction: float = 0.10,
                        rng: np.random.Generator | None = None) -> OfflineDataset:
    rng = rng if rng is not None else np.random.default_rng()
    return make_oracle_dataset(branin_oracle(), n_samples, trim_top_fraction, rng)


MIN_ROWS = 10


def corrupt_dataset(ds: OfflineDataset, mode: str, level: float,
                    rng: np.random.Generator) -> OfflineDataset:
    """Sparse (keep floor(level * N) random rows) or noisy (level * N(0, 1) on normalized scores)."""
    if not 0.0 < level <= 1.0:
        raise ValueError(f"level must be in (0, 1], got {level}")
    if mode == "sparse":
        # Guard against 0.29 * 100 -> 28.999... style truncation.
        n_keep = math.floor(level * ds.n + 1e-9)
        if n_keep < MIN_ROWS:
            raise ValueError(f"sparse level {level} leaves {n_keep} rows (< {MIN_ROWS})")
        rows = np.sort(rng.choice(ds.n, size=n_keep, replace=False))
        return ds.subset(rows)
    if mode == "noisy":
        noisy = normalize_score(ds, ds.scores) + level * rng.standard_normal(ds.n)
        return make_dataset(ds.designs, denormalize_score(ds, noisy), ds.space_kind)
    raise ValueError(f"unknown corruption mode {mode!r}")


@dataclass
class CandidateSet:
    designs: np.ndarray  # (n, d) raw units
    proxy_scores: np.ndarray | None = None
    oracle_scores: np.ndarray | None = None
    provenance: np.ndarray | None = None  # (n, 2): trajectory index, 1-based step index
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.designs = np.atleast_2d(np.asarray(self.designs, dtype=np.float64))
        n = self.designs.shape[0]
        for name in ("proxy_scores", "oracle_scores", "provenance"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value)
                if value.shape[0] != n:
                    raise ValueError(f"{name} has {value.shape[0]} rows, designs have {n}")
                setattr(self, name, value)

    def __len__(self) -> int:
        return int(self.designs.shape[0])

    def take(self, rows) -> "CandidateSet":
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda a: None if a is None else a[rows]  # noqa: E731
        return CandidateSet(
            designs=self.designs[rows],
            proxy_scores=pick(self.proxy_scores),
            oracle_scores=pick(self.oracle_scores),
            provenance=pick(self.provenance),
            meta=dict(self.meta),
        )

    def to_json(self) -> dict:
        as_list = lambda a: None if a is None else a.tolist()  # noqa: E731
        return {
            "designs": self.designs.tolist(),
            "proxy_scores": as_list(self.proxy_scores),
            "oracle_scores": as_list(self.oracle_scores),
            "provenance": as_list(self.provenance),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "CandidateSet":
        opt = lambda k, dt: None if payload.get(k) is None else np.asarray(payload[k], dtype=dt)  # noqa: E731
        designs = payload["designs"]
        return cls(
            designs=np.asarray(designs, dtype=np.float64).reshape(len(designs), -1),
            proxy_scores=opt("proxy_scores", np.float64),
            oracle_scores=opt("oracle_scores", np.float64),
            provenance=opt("provenance", np.int64),
            meta=payload.get("meta", {}),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "CandidateSet":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


REPORT_PERCENTILES = (100, 80, 50)


def evaluate_candidates(cands: CandidateSet, oracle: Oracle, ds: OfflineDataset,
                        seed: int | None = None) -> tuple[CandidateSet, dict]:
    """Score every candidate once (after clamping into the box) and summarize.

    Normalization uses the dataset's y_min/y_max, so normalized values
    above 1.0 beat the dataset.
    """
    if len(cands) == 0:
        raise ValueError("cannot evaluate an empty candidate set")
    clipped, n_clamped = oracle.clamp(cands.designs)
    if n_clamped:
        logger.warning("%d of %d candidates clamped into the %s box", n_clamped, len(cands), oracle.name)
    raw = oracle(clipped)
    norm = normalize_score(ds, raw)
    scored = CandidateSet(
        designs=cands.designs,
        proxy_scores=cands.proxy_scores,
        oracle_scores=raw,
        provenance=cands.provenance,
        meta=dict(cands.meta),
    )
    best = int(np.argmax(raw))
    report = {
        "task": oracle.name,
        "seed": seed,
        "n_candidates": len(cands),
        "n_clamped": n_clamped,
        "best_raw": float(raw[best]),
        "best_normalized": float(norm[best]),
        "best_design": clipped[best].tolist(),
        "percentiles_normalized": {
            str(p): float(np.percentile(norm, p)) for p in REPORT_PERCENTILES
        },
        "percentiles_raw": {str(p): float(np.percentile(raw, p)) for p in REPORT_PERCENTILES},
        "dataset_best_raw": float(ds.y_max),
        "known_optimum": oracle.known_optimum,
    }
    return scored, report


def diversity(designs, metric: str = "euclidean") -> float:
    """Mean distance over all ordered pairs of distinct candidates."""
    designs = np.atleast_2d(np.asarray(designs, dtype=np.float64))
    n = designs.shape[0]
    if n < 2:
        raise ValueError(f"diversity needs at least 2 designs, got {n}")
    if metric == "euclidean":
        d = pdist(designs, metric="euclidean")
    elif metric == "hamming":
        d = pdist(designs, metric="hamming") * designs.shape[1]
    else:
        raise ValueError(f"unknown metric {metric!r}")
    # Each unordered pair appears twice among the n (n - 1) ordered pairs.
    return float(2.0 * d.sum() / (n * (n - 1)))
