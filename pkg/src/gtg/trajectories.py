"""Locality-biased improvement trajectories built from an offline dataset."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import (
    NeighborIndex,
    OfflineDataset,
    knn_above_threshold,
    normalize_score,
    sample_low_percentile,
)


@dataclass(frozen=True)
class ConstructionConfig:
    """Trajectory construction settings.

    ``epsilon`` is in normalized-score units; it is converted to raw units
    with the dataset score range before being compared against raw scores.
    """

    p: float = 20.0
    horizon: int = 64
    n_traj: int = 400
    k: int = 20
    epsilon: float = 0.05

    def validate(self) -> None:
        if self.horizon < 2:
            raise ValueError(f"horizon must be >= 2, got {self.horizon}")
        if self.k < 1:
            raise ValueError(f"K must be >= 1, got {self.k}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if not 0 < self.p <= 100:
            raise ValueError(f"p must be in (0, 100], got {self.p}")
        if self.n_traj < 1:
            raise ValueError(f"n_traj must be >= 1, got {self.n_traj}")


@dataclass(frozen=True)
class Trajectory:
    designs: np.ndarray  # (H, d), raw units
    raw_scores: np.ndarray  # (H,)
    normalized_scores: np.ndarray  # (H,)
    indices: np.ndarray | None = None  # dataset rows, None for generated trajectories

    @property
    def horizon(self) -> int:
        return int(self.raw_scores.shape[0])


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    config: ConstructionConfig
    fallback_steps: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> int:
        return self.trajectories[0].horizon

    def designs(self) -> np.ndarray:
        return np.stack([t.designs for t in self.trajectories])

    def normalized_scores(self) -> np.ndarray:
        return np.stack([t.normalized_scores for t in self.trajectories])

    def raw_scores(self) -> np.ndarray:
        return np.stack([t.raw_scores for t in self.trajectories])

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "fallback_steps": self.fallback_steps,
            "trajectories": [
                {
                    "designs": t.designs.tolist(),
                    "raw_scores": t.raw_scores.tolist(),
                    "normalized_scores": t.normalized_scores.tolist(),
                    **({"indices": t.indices.tolist()} if t.indices is not None else {}),
                }
                for t in self.trajectories
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "TrajectoryDataset":
        trajs = []
        for item in payload["trajectories"]:
            idx = item.get("indices")
            trajs.append(
                Trajectory(
                    designs=np.asarray(item["designs"], dtype=np.float64),
                    raw_scores=np.asarray(item["raw_scores"], dtype=np.float64),
                    normalized_scores=np.asarray(item["normalized_scores"], dtype=np.float64),
                    indices=None if idx is None else np.asarray(idx, dtype=np.int64),
                )
            )
        if not trajs:
            raise ValueError("trajectory dataset is empty")
        if len({t.horizon for t in trajs}) != 1:
            raise ValueError("trajectories have mixed horizons")
        return cls(
            trajectories=trajs,
            config=ConstructionConfig(**payload["config"]),
            fallback_steps=int(payload.get("fallback_steps", 0)),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        with open(Path(path), encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def raw_epsilon(ds: OfflineDataset, epsilon: float) -> float:
    if math.isinf(epsilon):
        return math.inf
    return epsilon * (ds.y_max - ds.y_min)


def _walk(
    ds: OfflineDataset,
    idx: NeighborIndex,
    cfg: ConstructionConfig,
    eps_raw: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    rows = np.empty(cfg.horizon, dtype=np.int64)
    rows[0] = sample_low_percentile(ds, cfg.p, rng)
    running_max = ds.scores[rows[0]]
    fallbacks = 0
    for h in range(cfg.horizon - 1):
        neighbors = knn_above_threshold(idx, ds, int(rows[h]), cfg.k, running_max - eps_raw)
        if neighbors.size == 0:
            # Nothing clears the threshold: drop it for this step only.
            neighbors = knn_above_threshold(idx, ds, int(rows[h]), cfg.k, -math.inf)
            fallbacks += 1
        rows[h + 1] = neighbors[rng.integers(neighbors.size)]
        running_max = max(running_max, ds.scores[rows[h + 1]])
    return rows, fallbacks


def build_trajectories(
    ds: OfflineDataset,
    idx: NeighborIndex,
    cfg: ConstructionConfig,
    seed: int | np.random.SeedSequence,
) -> TrajectoryDataset:
    """Construct ``cfg.n_traj`` trajectories by thresholded k-NN local search.

    Each trajectory gets its own child stream of ``seed`` so the result does
    not depend on construction order.
    """
    cfg.validate()
    if ds.n < 2:
        raise ValueError("need at least two dataset points to build trajectories")
    seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    eps_raw = raw_epsilon(ds, cfg.epsilon)
    trajs = []
    total_fallbacks = 0
    for child in seq.spawn(cfg.n_traj):
        rows, fallbacks = _walk(ds, idx, cfg, eps_raw, np.random.default_rng(child))
        total_fallbacks += fallbacks
        raw = ds.scores[rows]
        trajs.append(
            Trajectory(
                designs=ds.designs[rows].copy(),
                raw_scores=raw.copy(),
                normalized_scores=normalize_score(ds, raw),
                indices=rows,
            )
        )
    return TrajectoryDataset(trajectories=trajs, config=cfg, fallback_steps=total_fallbacks)


DECILES = tuple(range(10, 100, 10))


def _summary(values: np.ndarray) -> dict:
    return {
        "count": int(values.size),
        "mean": float(values.mean()),
        "std": float(values.std()),
        "deciles": [float(v) for v in np.percentile(values, DECILES)],
    }


def score_shift_stats(traj_ds: TrajectoryDataset, ds: OfflineDataset) -> dict:
    """Mean, std and deciles of trajectory scores next to the dataset's (raw units)."""
    if len(traj_ds) == 0 or ds.n == 0:
        raise ValueError("both datasets must be nonempty")
    traj = _summary(traj_ds.raw_scores().reshape(-1))
    data = _summary(np.asarray(ds.scores))
    return {
        "decile_levels": list(DECILES),
        "dataset": data,
        "trajectories": traj,
        "mean_shift": traj["mean"] - data["mean"],
    }
