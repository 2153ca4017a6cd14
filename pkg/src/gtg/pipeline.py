"""End-to-end experiment: construct, train, sample, select, evaluate.

Every stage reads only the serialized artifacts of the stages before it
and records a hash of the settings it depends on in ``stages.json``. A
rerun into the same directory skips stages whose artifact exists with a
matching hash, so an interrupted experiment resumes with identical output.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shutil
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash, dump_config
from .dataset import (
    OfflineDataset,
    build_neighbor_index,
    denormalize_designs,
    load_dataset,
    normalize_designs,
    normalize_score,
    save_dataset,
)
from .denoiser import (
    DenoiserArch,
    DenoiserModel,
    TrainConfig,
    new_model,
    train,
    trajectory_arrays,
    write_loss_curve,
)
from .diffusion import GuidanceConfig, make_schedule, sample_with_context
from .proxy import ProxyModel, filter_top_q, rank_weights, train_proxy
from .tasks import CandidateSet, diversity, evaluate_candidates, get_oracle, make_oracle_dataset
from .trajectories import ConstructionConfig, TrajectoryDataset, build_trajectories

logger = logging.getLogger(__name__)

STAGES = ("data", "trajs", "denoiser", "proxy", "sample", "select", "evaluate")

ARTIFACTS = {
    "data": "dataset.csv",
    "trajs": "trajs.json",
    "denoiser": "denoiser.ckpt",
    "proxy": "proxy.ckpt",
    "sample": "samples.json",
    "select": "candidates.json",
    "evaluate": "report.json",
}

# Config keys each stage reads directly; upstream hashes are chained in.
STAGE_KEYS = {
    "data": ("task", "dataset_path", "n_samples", "trim_top_fraction", "space"),
    "trajs": ("p", "horizon", "n_traj", "k", "epsilon"),
    "denoiser": ("T", "schedule", "hidden", "n_blocks", "time_dim", "batch_size",
                 "learning_rate", "train_steps", "dropout_p", "ema_decay"),
    "proxy": ("proxy_hidden", "proxy_batch_size", "proxy_learning_rate",
              "proxy_train_steps", "rank_k"),
    "sample": ("omega", "guidance_mode", "x0_clip", "n_sample_trajs", "context", "alpha",
               "target_mode", "gamma"),
    "select": ("q",),
    "evaluate": ("task",),
}
STAGE_DEPS = {
    "data": (),
    "trajs": ("data",),
    "denoiser": ("trajs",),
    "proxy": ("data",),
    "sample": ("denoiser", "trajs"),
    "select": ("sample", "proxy"),
    "evaluate": ("select",),
}
_STAGE_IDS = {name: i for i, name in enumerate(STAGES)}

# Axes that only touch sampling/selection; ablations over them reuse trained models.
SAMPLING_AXES = {"alpha", "context", "q", "omega", "gamma", "target_mode", "guidance_mode"}
AXIS_ALIASES = {"H": "horizon", "C": "context", "K": "k", "Q": "q", "alpha": "alpha",
                "epsilon": "epsilon", "omega": "omega", "gamma": "gamma"}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


def stage_seed(seed: int, stage: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), _STAGE_IDS[stage]])


def stage_int_seed(seed: int, stage: str) -> int:
    return int(stage_seed(seed, stage).generate_state(1)[0])


def stage_hashes(cfg: ExperimentConfig, seed: int) -> dict[str, str]:
    values = cfg.to_dict()
    hashes: dict[str, str] = {}
    for stage in STAGES:
        payload = {
            "seed": seed,
            "keys": {k: values[k] for k in STAGE_KEYS[stage]},
            "deps": {d: hashes[d] for d in STAGE_DEPS[stage]},
        }
        hashes[stage] = config_hash(payload)
    return hashes


def estimate_target(ds: OfflineDataset, mode: str, gamma: float = 1.0,
                    known_optimum: float | None = None) -> float:
    """Per-step normalized conditioning optimum.

    ``known``: the true optimum normalized by the dataset range (may exceed
    1.0). ``gamma``: gamma times the normalized dataset maximum, i.e. gamma.
    """
    if mode == "known":
        if known_optimum is None:
            raise ValueError("known-optimum mode needs the task optimum")
        return float(normalize_score(ds, known_optimum))
    if mode == "gamma":
        if not gamma > 0:
            raise ValueError(f"gamma must be > 0, got {gamma}")
        return float(gamma * normalize_score(ds, ds.y_max))
    raise ValueError(f"unknown target mode {mode!r}")


@dataclass
class RunRecord:
    seed: int
    config_hash: str
    run_dir: str
    report: dict | None = None
    timings: dict[str, float] = field(default_factory=dict)
    loss_curves: dict[str, list] = field(default_factory=dict)
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and self.report is not None

    def candidates(self) -> CandidateSet:
        return CandidateSet.load(Path(self.run_dir) / ARTIFACTS["select"])


class SeedRun:
    """Stages for one seed inside ``run_dir``."""

    def __init__(self, cfg: ExperimentConfig, seed: int, run_dir, resume: bool = True):
        self.cfg = cfg
        self.seed = int(seed)
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.hashes = stage_hashes(cfg, self.seed)
        self.resume = resume
        self.timings: dict[str, float] = {}
        self._manifest_path = self.dir / "stages.json"
        self.manifest = self._read_manifest() if resume else {}

    def _read_manifest(self) -> dict:
        if self._manifest_path.exists():
            return json.loads(self._manifest_path.read_text(encoding="utf-8"))
        return {}

    def path(self, stage: str) -> Path:
        return self.dir / ARTIFACTS[stage]

    def is_current(self, stage: str) -> bool:
        return self.path(stage).exists() and self.manifest.get(stage) == self.hashes[stage]

    def _mark(self, stage: str) -> None:
        self.manifest[stage] = self.hashes[stage]
        self._manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True),
                                       encoding="utf-8")

    def run_stage(self, stage: str) -> None:
        for dep in STAGE_DEPS[stage]:
            if not self.is_current(dep):
                raise StageError(stage, f"upstream stage {dep!r} has no current artifact")
        if self.resume and self.is_current(stage):
            logger.info("seed %d: %s up to date, skipping", self.seed, stage)
            return
        start = time.perf_counter()
        try:
            getattr(self, f"_stage_{stage}")()
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        self.timings[stage] = time.perf_counter() - start
        self._mark(stage)
        logger.info("seed %d: %s done in %.2fs", self.seed, stage, self.timings[stage])

    def run_all(self) -> None:
        for stage in STAGES:
            self.run_stage(stage)

    # artifact readers
    def dataset(self) -> OfflineDataset:
        return load_dataset(self.path("data"), space_kind=self.cfg.space)

    def trajectories(self) -> TrajectoryDataset:
        return TrajectoryDataset.load(self.path("trajs"))

    def schedule(self):
        return make_schedule(self.cfg.T, self.cfg.schedule)

    # stages
    def _stage_data(self) -> None:
        cfg = self.cfg
        if cfg.dataset_path:
            ds = load_dataset(cfg.dataset_path, space_kind=cfg.space)
        else:
            rng = np.random.default_rng(stage_seed(self.seed, "data"))
            ds = make_oracle_dataset(get_oracle(cfg.task), cfg.n_samples, cfg.trim_top_fraction, rng)
        save_dataset(ds, self.path("data"))

    def _stage_trajs(self) -> None:
        cfg = self.cfg
        ds = self.dataset()
        idx = build_neighbor_index(ds)
        self.timings["neighbor_index"] = idx.build_seconds
        ccfg = ConstructionConfig(p=cfg.p, horizon=cfg.horizon, n_traj=cfg.n_traj, k=cfg.k,
                                  epsilon=cfg.epsilon)
        traj_ds = build_trajectories(ds, idx, ccfg, stage_seed(self.seed, "trajs"))
        if traj_ds.fallback_steps:
            logger.info("seed %d: %d construction steps used the unthresholded fallback",
                        self.seed, traj_ds.fallback_steps)
        traj_ds.save(self.path("trajs"))

    def _stage_denoiser(self) -> None:
        cfg = self.cfg
        ds = self.dataset()
        x0, cond = trajectory_arrays(self.trajectories(), ds)
        arch = DenoiserArch(horizon=cfg.horizon, channels=ds.dim + 1, hidden=cfg.hidden,
                            n_blocks=cfg.n_blocks, time_dim=cfg.time_dim)
        seed = stage_int_seed(self.seed, "denoiser")
        model = new_model(arch, cfg.T, seed=seed)
        tcfg = TrainConfig(batch_size=cfg.batch_size, learning_rate=cfg.learning_rate,
                           train_steps=cfg.train_steps, dropout_p=cfg.dropout_p, seed=seed,
                           ema_decay=cfg.ema_decay or None)
        sched = self.schedule()
        model, curve = train(model, x0, cond, sched, tcfg)
        write_loss_curve(self.dir / "denoiser_loss.csv", curve)
        model.save(self.path("denoiser"), sched)

    def _stage_proxy(self) -> None:
        cfg = self.cfg
        ds = self.dataset()
        seed = stage_int_seed(self.seed, "proxy")
        tcfg = TrainConfig(batch_size=cfg.proxy_batch_size, learning_rate=cfg.proxy_learning_rate,
                           train_steps=cfg.proxy_train_steps, dropout_p=0.0, seed=seed)
        split_seed = stage_int_seed(self.seed, "proxy") % (2**31)
        model, report = train_proxy(
            ds, tcfg, weights=rank_weights(ds.scores, cfg.rank_k),
            hidden=cfg.proxy_hidden, split_seed=split_seed,
        )
        write_loss_curve(self.dir / "proxy_loss.csv", model.metadata.get("loss_curve", []))
        (self.dir / "proxy_report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
        model.save(self.path("proxy"))

    def _stage_sample(self) -> None:
        cfg = self.cfg
        ds = self.dataset()
        traj_ds = self.trajectories()
        model = DenoiserModel.load(self.path("denoiser"))
        sched = self.schedule()
        oracle = get_oracle(cfg.task)
        y_star = estimate_target(ds, cfg.target_mode, cfg.gamma, oracle.known_optimum)
        guidance = GuidanceConfig(omega=cfg.omega, alpha_level=cfg.alpha, y_star=y_star,
                                  mode=cfg.guidance_mode, x0_clip=cfg.x0_clip or None)
        seq = stage_seed(self.seed, "sample")
        ctx_seq, *noise_seqs = seq.spawn(cfg.n_sample_trajs + 1)
        ctx_rng = np.random.default_rng(ctx_seq)
        n_stored = len(traj_ds)
        replace = cfg.n_sample_trajs > n_stored
        ctx_ids = ctx_rng.choice(n_stored, size=cfg.n_sample_trajs, replace=replace)
        x0, _ = trajectory_arrays(traj_ds, ds)
        ctx = x0[ctx_ids, : cfg.context]
        out = sample_with_context(model, sched, guidance, ctx, cfg.horizon,
                                  [np.random.default_rng(s) for s in noise_seqs])
        designs = denormalize_designs(ds, out[..., :-1])
        payload = {
            "context_ids": ctx_ids.tolist(),
            "context": cfg.context,
            "target": guidance.target(cfg.horizon),
            "y_star": y_star,
            "designs": designs.tolist(),
            "model_space": out.tolist(),
        }
        self.path("sample").write_text(json.dumps(payload), encoding="utf-8")

    def _harvest(self) -> CandidateSet:
        payload = json.loads(self.path("sample").read_text(encoding="utf-8"))
        designs = np.asarray(payload["designs"], dtype=np.float64)
        c = int(payload["context"])
        n, h, d = designs.shape
        picked = designs[:, c:, :].reshape(-1, d)
        traj_idx = np.repeat(np.arange(n), h - c)
        step_idx = np.tile(np.arange(c + 1, h + 1), n)
        return CandidateSet(
            designs=picked,
            provenance=np.stack([traj_idx, step_idx], axis=1),
            meta={"seed": self.seed, "harvest": f"steps {c + 1}..{h} of {n} trajectories"},
        )

    def _stage_select(self) -> None:
        cands = self._harvest()
        proxy = ProxyModel.load(self.path("proxy"))
        selected = filter_top_q(cands, proxy, self.cfg.q)
        selected.meta["n_harvested"] = len(cands)
        selected.save(self.path("select"))

    def _stage_evaluate(self) -> None:
        cfg = self.cfg
        ds = self.dataset()
        cands = CandidateSet.load(self.path("select"))
        scored, report = evaluate_candidates(cands, get_oracle(cfg.task), ds, seed=self.seed)
        report["config_hash"] = config_hash(cfg.to_dict())
        report["stage_hashes"] = self.hashes
        report["n_harvested"] = cands.meta.get("n_harvested")
        report["diversity"] = _safe_diversity(scored.designs, cfg.space)
        scored.save(self.dir / "evaluated.json")
        self.path("evaluate").write_text(json.dumps(report, indent=2, sort_keys=True),
                                         encoding="utf-8")


def _safe_diversity(designs, space: str):
    if len(designs) < 2:
        return None
    return diversity(designs, "hamming" if space == "discrete" else "euclidean")


def write_timings(path, timings: dict[str, float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "seconds"])
        for stage, secs in timings.items():
            writer.writerow([stage, f"{secs:.6f}"])


def _read_curve(path: Path) -> list:
    if not path.exists():
        return []
    with open(path, newline="", encoding="utf-8") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def run_seed(cfg: ExperimentConfig, seed: int, seed_dir, resume: bool = True) -> RunRecord:
    record = RunRecord(seed=seed, config_hash=config_hash(cfg.to_dict()), run_dir=str(seed_dir))
    runner = SeedRun(cfg, seed, seed_dir, resume=resume)
    try:
        runner.run_all()
    except StageError as exc:
        record.error = str(exc)
        logger.error("seed %d failed: %s", seed, exc)
    record.timings = runner.timings
    write_timings(Path(seed_dir) / "timings.csv", runner.timings)
    record.loss_curves = {
        "denoiser": _read_curve(Path(seed_dir) / "denoiser_loss.csv"),
        "proxy": _read_curve(Path(seed_dir) / "proxy_loss.csv"),
    }
    if record.error is None:
        record.report = json.loads(runner.path("evaluate").read_text(encoding="utf-8"))
    return record


def aggregate(records: list[RunRecord]) -> dict:
    done = [r for r in records if r.ok]
    failed = [r.seed for r in records if not r.ok]
    if failed:
        warnings.warn(f"aggregating over {len(done)} completed seeds; failed: {failed}")
    best = np.array([r.report["best_raw"] for r in done], dtype=np.float64)
    best_norm = np.array([r.report["best_normalized"] for r in done], dtype=np.float64)
    return {
        "n_seeds": len(done),
        "failed_seeds": failed,
        "best_raw_mean": float(best.mean()) if done else math.nan,
        "best_raw_std": float(best.std()) if done else math.nan,
        "best_normalized_mean": float(best_norm.mean()) if done else math.nan,
        "best_normalized_std": float(best_norm.std()) if done else math.nan,
        "per_seed": {str(r.seed): r.report["best_raw"] for r in done},
    }


def run_experiment(cfg: ExperimentConfig, out_dir, resume: bool = True) -> tuple[list[RunRecord], dict]:
    """Run every seed under ``out_dir/seed_<s>`` and aggregate the best scores."""
    cfg.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    records = [run_seed(cfg, s, out / f"seed_{s}", resume=resume) for s in cfg.seeds]
    agg = aggregate(records)
    agg["config_hash"] = config_hash(cfg.to_dict())
    agg["note"] = (
        f"candidates are steps {cfg.context + 1}..{cfg.horizon} of {cfg.n_sample_trajs} sampled "
        f"trajectories ({cfg.n_sample_trajs * (cfg.horizon - cfg.context)} harvested), "
        f"top {cfg.q} by proxy"
    )
    agg["seeds"] = [
        {"seed": r.seed, "ok": r.ok, "error": r.error,
         "best_raw": r.report["best_raw"] if r.ok else None}
        for r in records
    ]
    (out / "report.json").write_text(json.dumps(agg, indent=2, sort_keys=True), encoding="utf-8")
    return records, agg


def resolve_axis(axis: str) -> str:
    name = AXIS_ALIASES.get(axis, axis)
    if name not in {"horizon", "context", "alpha", "k", "epsilon", "q", "omega", "gamma"}:
        raise ValueError(f"unsupported ablation axis {axis!r}")
    return name


def ablate(cfg: ExperimentConfig, axis: str, values, out_dir, resume: bool = True) -> list[dict]:
    """One experiment per value of ``axis``; writes ``ablation.csv`` (value, mean, std).

    For sampling-side axes the data, trajectories and trained models of the
    first value are copied into later runs and reused via stage hashes.
    """
    name = resolve_axis(axis)
    values = list(values)
    if not values:
        raise ValueError("no ablation values given")
    configs = [cfg.with_overrides(**{name: v}) for v in values]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    first_dir = None
    for value, sub_cfg in zip(values, configs):
        run_dir = out / f"{name}={value}"
        if first_dir is not None and name in SAMPLING_AXES:
            _seed_upstream(first_dir, run_dir, sub_cfg)
        _, agg = run_experiment(sub_cfg, run_dir, resume=resume)
        first_dir = first_dir or run_dir
        rows.append({"value": value, "mean": agg["best_raw_mean"], "std": agg["best_raw_std"],
                     "mean_normalized": agg["best_normalized_mean"],
                     "n_seeds": agg["n_seeds"]})
    with open(out / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["value", "mean", "std", "mean_normalized", "n_seeds"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return rows


def _seed_upstream(src_dir: Path, dst_dir: Path, cfg: ExperimentConfig) -> None:
    """Copy artifacts of stages whose hashes are unchanged under ``cfg``."""
    for seed in cfg.seeds:
        src = src_dir / f"seed_{seed}"
        dst = dst_dir / f"seed_{seed}"
        manifest_path = src / "stages.json"
        if not manifest_path.exists():
            continue
        src_manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        hashes = stage_hashes(cfg, seed)
        dst.mkdir(parents=True, exist_ok=True)
        dst_manifest_path = dst / "stages.json"
        dst_manifest = (json.loads(dst_manifest_path.read_text(encoding="utf-8"))
                        if dst_manifest_path.exists() else {})
        for stage in STAGES:
            if src_manifest.get(stage) != hashes[stage] or dst_manifest.get(stage) == hashes[stage]:
                continue
            shutil.copy2(src / ARTIFACTS[stage], dst / ARTIFACTS[stage])
            for extra in {"denoiser": ["denoiser_loss.csv"],
                          "proxy": ["proxy_loss.csv", "proxy_report.json"]}.get(stage, []):
                if (src / extra).exists():
                    shutil.copy2(src / extra, dst / extra)
            dst_manifest[stage] = hashes[stage]
        dst_manifest_path.write_text(json.dumps(dst_manifest, indent=2, sort_keys=True),
                                     encoding="utf-8")


def normalized_context(ds: OfflineDataset, designs, scores) -> np.ndarray:
    """Model-space rows for a raw (designs, scores) context."""
    return np.concatenate([normalize_designs(ds, designs), normalize_score(ds, scores)[:, None]], axis=1)
