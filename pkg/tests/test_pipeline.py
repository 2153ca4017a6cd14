import json
import math

import numpy as np
import pytest

from gtg.dataset import make_dataset, normalize_score
from gtg.pipeline import (
    ARTIFACTS,
    STAGES,
    SeedRun,
    StageError,
    ablate,
    estimate_target,
    run_experiment,
    stage_hashes,
)
from gtg.tasks import BRANIN_OPTIMUM, CandidateSet, make_branin_dataset


def test_estimate_target_modes():
    ds = make_dataset([[0.0], [1.0]], [0.0, 2.0])
    assert estimate_target(ds, "gamma", 1.0) == 1.0
    assert estimate_target(ds, "gamma", 1.5) == 1.5
    bd = make_branin_dataset(500, 0.1, np.random.default_rng(0))
    assert estimate_target(bd, "known", known_optimum=BRANIN_OPTIMUM) == pytest.approx(
        float(normalize_score(bd, -5 / (4 * math.pi)))
    )
    with pytest.raises(ValueError):
        estimate_target(ds, "known")


def test_stage_hashes_chain(smoke_cfg):
    base = stage_hashes(smoke_cfg, 0)
    changed = stage_hashes(smoke_cfg.with_overrides(alpha=0.2), 0)
    for stage in ("data", "trajs", "denoiser", "proxy"):
        assert base[stage] == changed[stage]
    for stage in ("sample", "select", "evaluate"):
        assert base[stage] != changed[stage]
    assert stage_hashes(smoke_cfg, 1)["data"] != base["data"]


def test_run_produces_artifacts(tmp_path, smoke_cfg):
    records, agg = run_experiment(smoke_cfg, tmp_path / "run")
    seed_dir = tmp_path / "run" / "seed_0"
    for stage in STAGES:
        assert (seed_dir / ARTIFACTS[stage]).exists()
    assert records[0].ok and agg["n_seeds"] == 1
    cands = CandidateSet.load(seed_dir / "candidates.json")
    assert len(cands) == smoke_cfg.q
    # provenance: 1-based steps after the context
    steps = cands.provenance[:, 1]
    assert steps.min() >= smoke_cfg.context + 1 and steps.max() <= smoke_cfg.horizon
    # proxy order, best first
    assert np.all(np.diff(cands.proxy_scores) <= 0)
    report = json.loads((seed_dir / "report.json").read_text())
    assert report["best_raw"] == agg["best_raw_mean"]
    assert (tmp_path / "run" / "config.toml").exists()


def test_rerun_is_bitwise_identical(tmp_path, smoke_cfg):
    run_experiment(smoke_cfg, tmp_path / "a")
    run_experiment(smoke_cfg, tmp_path / "b")
    for name in ("candidates.json", "report.json", "samples.json", "trajs.json"):
        a = (tmp_path / "a" / "seed_0" / name).read_bytes()
        b = (tmp_path / "b" / "seed_0" / name).read_bytes()
        assert a == b, name
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_resume_skips_current_stages(tmp_path, smoke_cfg):
    run_experiment(smoke_cfg, tmp_path / "r")
    ckpt = tmp_path / "r" / "seed_0" / "denoiser.ckpt"
    before = ckpt.stat().st_mtime_ns
    records, _ = run_experiment(smoke_cfg, tmp_path / "r", resume=True)
    assert ckpt.stat().st_mtime_ns == before
    assert records[0].timings == {}
    # a sampling-only change reruns sample/select/evaluate only
    records, _ = run_experiment(smoke_cfg.with_overrides(alpha=0.3), tmp_path / "r")
    assert set(records[0].timings) == {"sample", "select", "evaluate"}


def test_interrupted_run_resumes_identically(tmp_path, smoke_cfg):
    run_experiment(smoke_cfg, tmp_path / "full")
    runner = SeedRun(smoke_cfg, 0, tmp_path / "part" / "seed_0")
    for stage in ("data", "trajs", "denoiser"):
        runner.run_stage(stage)
    run_experiment(smoke_cfg, tmp_path / "part")
    a = (tmp_path / "full" / "seed_0" / "candidates.json").read_bytes()
    b = (tmp_path / "part" / "seed_0" / "candidates.json").read_bytes()
    assert a == b


def test_missing_upstream_is_stage_error(tmp_path, smoke_cfg):
    runner = SeedRun(smoke_cfg, 0, tmp_path / "x")
    with pytest.raises(StageError, match="upstream"):
        runner.run_stage("sample")


def test_failed_seed_is_recorded(tmp_path, smoke_cfg):
    cfg = smoke_cfg.with_overrides(dataset_path=str(tmp_path / "missing.csv"))
    with pytest.warns(UserWarning):
        records, agg = run_experiment(cfg, tmp_path / "f")
    assert not records[0].ok and "data" in records[0].error
    assert agg["n_seeds"] == 0 and agg["failed_seeds"] == [0]


def test_ablate_single_value_matches_run(tmp_path, smoke_cfg):
    rows = ablate(smoke_cfg, "alpha", [smoke_cfg.alpha], tmp_path / "abl")
    _, agg = run_experiment(smoke_cfg, tmp_path / "one")
    assert rows[0]["mean"] == agg["best_raw_mean"]
    assert (tmp_path / "abl" / "ablation.csv").read_text().startswith("value,mean,std")


def test_ablate_reuses_models(tmp_path, smoke_cfg):
    ablate(smoke_cfg, "alpha", [0.8, 0.2], tmp_path / "abl")
    a = (tmp_path / "abl" / "alpha=0.8" / "seed_0" / "denoiser.ckpt").read_bytes()
    b = (tmp_path / "abl" / "alpha=0.2" / "seed_0" / "denoiser.ckpt").read_bytes()
    assert a == b
    with pytest.raises(ValueError):
        ablate(smoke_cfg, "nonsense", [1], tmp_path / "bad")
