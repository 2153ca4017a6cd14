import math

import numpy as np
import pytest
from scipy import stats

from gtg.dataset import build_neighbor_index, make_dataset, percentile_value
from gtg.trajectories import (
    ConstructionConfig,
    TrajectoryDataset,
    build_trajectories,
    raw_epsilon,
    score_shift_stats,
)
from gtg.tasks import make_branin_dataset


def check_walk_rules(ds, traj_ds, cfg):
    """Count steps that break the start, threshold or k-NN membership rules (brute force)."""
    eps = raw_epsilon(ds, cfg.epsilon)
    cutoff = percentile_value(ds.scores, cfg.p)
    violations = 0
    for traj in traj_ds.trajectories:
        rows = traj.indices
        if ds.scores[rows[0]] > cutoff:
            violations += 1
        running = ds.scores[rows[0]]
        for a, b in zip(rows[:-1], rows[1:]):
            dist = np.sqrt(((ds.designs - ds.designs[a]) ** 2).sum(axis=1))
            others = [j for j in range(ds.n) if j != a]
            qualifying = [j for j in others if ds.scores[j] > running - eps]
            pool = qualifying if qualifying else others
            pool.sort(key=lambda j: (dist[j], j))
            if b not in pool[: cfg.k]:
                violations += 1
            running = max(running, ds.scores[b])
    return violations


def test_branin_shape():
    ds = make_branin_dataset(1000, 0.1, np.random.default_rng(0))
    cfg = ConstructionConfig(p=20, horizon=64, n_traj=400, k=20, epsilon=0.01)
    traj_ds = build_trajectories(ds, build_neighbor_index(ds), cfg, 0)
    assert len(traj_ds) == 400
    assert traj_ds.designs().shape == (400, 64, 2)


def test_rules_hold_on_random_dataset():
    rng = np.random.default_rng(11)
    ds = make_dataset(rng.uniform(size=(200, 2)), rng.normal(size=200))
    cfg = ConstructionConfig(p=20, horizon=16, n_traj=100, k=5, epsilon=0.05)
    traj_ds = build_trajectories(ds, build_neighbor_index(ds), cfg, 3)
    assert check_walk_rules(ds, traj_ds, cfg) == 0


def test_greedy_lattice_walk():
    # Strictly increasing 1D lattice: with eps=0, K=1 the only legal walk
    # from i is i -> i+1 until the top, then back down to the nearest point.
    n = 30
    ds = make_dataset(np.arange(n, dtype=float)[:, None], np.arange(n, dtype=float))
    cfg = ConstructionConfig(p=10, horizon=8, n_traj=20, k=1, epsilon=0.0)
    traj_ds = build_trajectories(ds, build_neighbor_index(ds), cfg, 0)
    for traj in traj_ds.trajectories:
        start = int(traj.indices[0])
        expected = [start + h for h in range(cfg.horizon)]
        assert traj.indices.tolist() == expected
    assert traj_ds.fallback_steps == 0


def test_fallback_when_nothing_qualifies():
    ds = make_dataset(np.arange(5, dtype=float)[:, None], np.arange(5, dtype=float))
    cfg = ConstructionConfig(p=100, horizon=6, n_traj=5, k=1, epsilon=0.0)
    traj_ds = build_trajectories(ds, build_neighbor_index(ds), cfg, 0)
    assert traj_ds.fallback_steps > 0
    assert traj_ds.designs().shape == (5, 6, 1)


def test_uniform_steps_when_unconstrained():
    n = 10
    rng = np.random.default_rng(0)
    ds = make_dataset(rng.normal(size=(n, 2)), rng.normal(size=n))
    cfg = ConstructionConfig(p=100, horizon=101, n_traj=100, k=n - 1, epsilon=math.inf)
    traj_ds = build_trajectories(ds, build_neighbor_index(ds), cfg, 1)
    counts = np.zeros((n, n))
    for traj in traj_ds.trajectories:
        for a, b in zip(traj.indices[:-1], traj.indices[1:]):
            counts[a, b] += 1
    assert counts.sum() == 10_000
    assert np.all(np.diag(counts) == 0)
    # Conditional on the source, the destination is uniform over the other n - 1 points.
    chi2 = 0.0
    dof = 0
    for a in range(n):
        row = np.delete(counts[a], a)
        expected = row.sum() / (n - 1)
        chi2 += ((row - expected) ** 2 / expected).sum()
        dof += n - 2
    assert stats.chi2.sf(chi2, dof) > 0.001


def test_trajectories_seed_determinism_and_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    ds = make_dataset(rng.uniform(size=(80, 2)), rng.normal(size=80))
    cfg = ConstructionConfig(p=20, horizon=10, n_traj=12, k=4, epsilon=0.05)
    idx = build_neighbor_index(ds)
    a = build_trajectories(ds, idx, cfg, 7)
    b = build_trajectories(ds, idx, cfg, 7)
    assert np.array_equal(a.designs(), b.designs())
    a.save(tmp_path / "t.json")
    back = TrajectoryDataset.load(tmp_path / "t.json")
    assert np.array_equal(back.designs(), a.designs())
    assert np.array_equal(back.raw_scores(), a.raw_scores())
    assert back.config == cfg


def test_invalid_config():
    with pytest.raises(ValueError):
        ConstructionConfig(horizon=1).validate()
    with pytest.raises(ValueError):
        ConstructionConfig(k=0).validate()


def test_shift_stats_single_point():
    ds = make_dataset(np.arange(5, dtype=float)[:, None], np.arange(5, dtype=float))
    rows = np.full(4, 3)
    from gtg.trajectories import Trajectory

    traj = Trajectory(ds.designs[rows], ds.scores[rows], ds.normalized_scores[rows], rows)
    stats_ = score_shift_stats(TrajectoryDataset([traj], ConstructionConfig()), ds)
    assert stats_["trajectories"]["deciles"] == [3.0] * 9


def test_branin_trajectories_shift_up():
    ds = make_branin_dataset(2000, 0.1, np.random.default_rng(0))
    cfg = ConstructionConfig(p=20, horizon=32, n_traj=50, k=20, epsilon=0.01)
    traj_ds = build_trajectories(ds, build_neighbor_index(ds), cfg, 0)
    s = score_shift_stats(traj_ds, ds)
    assert s["trajectories"]["mean"] > s["dataset"]["mean"]
    assert s["mean_shift"] > 0


def test_uniform_walk_deciles_track_dataset():
    rng = np.random.default_rng(4)
    ds = make_dataset(rng.normal(size=(60, 2)), rng.normal(size=60))
    cfg = ConstructionConfig(p=100, horizon=200, n_traj=50, k=ds.n - 1, epsilon=math.inf)
    traj_ds = build_trajectories(ds, build_neighbor_index(ds), cfg, 0)
    s = score_shift_stats(traj_ds, ds)
    data_dec = np.array(s["dataset"]["deciles"])
    edges = np.concatenate([[-np.inf], data_dec, [np.inf]])
    for level, value in zip(range(1, 10), s["trajectories"]["deciles"]):
        bin_ = int(np.searchsorted(edges, value) - 1)
        assert abs(bin_ - level) <= 1
