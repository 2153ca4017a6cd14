"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
usage. Failures print a one-line JSON object to stderr.

Seed precedence: ``--seed`` > ``GTG_SEED`` > the config's first seed
(``run``/``ablate`` use the config's whole seed list unless a seed is
given on the command line or in the environment).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config, replace_seeds
from .dataset import load_dataset
from .pipeline import ARTIFACTS, SeedRun, StageError, ablate, resolve_axis, run_experiment
from .tasks import CandidateSet, get_oracle
from .trajectories import TrajectoryDataset, score_shift_stats

log = logging.getLogger("gtg")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

# Stage command -> pipeline stages it runs.
STAGE_COMMANDS = {
    "gen-data": ("data",),
    "build-trajs": ("trajs",),
    "train": ("denoiser", "proxy"),
    "sample": ("sample",),
    "select": ("select",),
    "evaluate": ("evaluate",),
}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _fail(message: str, code: int, command: str | None) -> int:
    kind = "config" if code == EXIT_CONFIG else "runtime"
    print(json.dumps({"error": message, "kind": kind, "exit_code": code, "command": command}),
          file=sys.stderr)
    return code


def _resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("GTG_SEED")
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CliError(f"GTG_SEED must be an integer, got {env!r}", EXIT_CONFIG) from None
    return None


def _load_cfg(args) -> ExperimentConfig:
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
        seed = _resolve_seed(args)
        if seed is not None:
            cfg = replace_seeds(cfg, [seed])
        return cfg
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None


def _require_out(args) -> Path:
    if not args.out:
        raise CliError("--out is required", EXIT_CONFIG)
    return Path(args.out)


def cmd_stage(args, stages) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    seed = cfg.seeds[0]
    existing = [ARTIFACTS[s] for s in stages if (out / ARTIFACTS[s]).exists()]
    if existing and not args.force:
        raise CliError(f"{out} already has {', '.join(existing)}; pass --force to overwrite",
                       EXIT_CONFIG)
    runner = SeedRun(cfg, seed, out, resume=True)
    for stage in stages:
        if args.force:
            runner.manifest.pop(stage, None)
        runner.run_stage(stage)
    print(json.dumps({"seed": seed, "out": str(out), "stages": list(stages),
                      "timings": runner.timings}))
    if "evaluate" in stages:
        report = json.loads(runner.path("evaluate").read_text(encoding="utf-8"))
        print(f"best: {report['best_raw']:.4f} (normalized {report['best_normalized']:.4f})")
    return EXIT_OK


def _check_fresh(out: Path, args) -> None:
    if out.exists() and any(out.iterdir()) and not (args.force or args.resume):
        raise CliError(f"{out} exists and is not empty; pass --force or --resume", EXIT_CONFIG)


def cmd_run(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    _check_fresh(out, args)
    records, agg = run_experiment(cfg, out, resume=not args.force)
    print(f"best: {agg['best_raw_mean']:.4f} ± {agg['best_raw_std']:.4f} "
          f"(normalized {agg['best_normalized_mean']:.4f} ± {agg['best_normalized_std']:.4f}, "
          f"{agg['n_seeds']}/{len(records)} seeds)")
    if agg["n_seeds"] == 0:
        errors = "; ".join(f"seed {r.seed}: {r.error}" for r in records)
        raise CliError(f"every seed failed: {errors}", EXIT_RUNTIME)
    return EXIT_OK


def _parse_values(text: str) -> list:
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            number = float(part)
        except ValueError:
            raise CliError(f"ablation value {part!r} is not a number", EXIT_CONFIG) from None
        values.append(int(number) if number.is_integer() and "." not in part else number)
    if not values:
        raise CliError("--values is empty", EXIT_CONFIG)
    return values


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _require_out(args)
    if not args.axis or not args.values:
        raise CliError("ablate needs --axis and --values", EXIT_CONFIG)
    try:
        axis = resolve_axis(args.axis)
        values = _parse_values(args.values)
        for v in values:
            cfg.with_overrides(**{axis: v})
    except (ValueError, ConfigError) as exc:
        if isinstance(exc, CliError):
            raise
        raise CliError(str(exc), EXIT_CONFIG) from None
    _check_fresh(out, args)
    rows = ablate(cfg, axis, values, out, resume=not args.force)
    for row in rows:
        print(f"{axis}={row['value']}: {row['mean']:.4f} ± {row['std']:.4f}")
    return EXIT_OK


def _histogram_csv(path: Path, values: np.ndarray, edges: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        if values.size == 0:
            return
        counts, _ = np.histogram(values, bins=edges)
        for lo, hi, n in zip(edges[:-1], edges[1:], counts):
            writer.writerow([repr(float(lo)), repr(float(hi)), int(n)])


def _polyline_csv(path: Path, designs: np.ndarray, scores: np.ndarray | None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["trajectory", "step", "x0", "x1", "y"])
        for i, traj in enumerate(designs):
            for h, x in enumerate(traj):
                y = "" if scores is None else repr(float(scores[i][h]))
                writer.writerow([i, h + 1, repr(float(x[0])), repr(float(x[1])), y])


def contour_grid(oracle, resolution: int = 101) -> list[tuple[float, float, float]]:
    xs = np.linspace(oracle.bounds[0, 0], oracle.bounds[0, 1], resolution)
    ys = np.linspace(oracle.bounds[1, 0], oracle.bounds[1, 1], resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vals = oracle(np.stack([gx.ravel(), gy.ravel()], axis=1))
    return list(zip(gx.ravel().tolist(), gy.ravel().tolist(), vals.tolist()))


def emit_stats(seed_dir: Path, cfg: ExperimentConfig, bins: int = 30) -> dict:
    data_path = seed_dir / ARTIFACTS["data"]
    traj_path = seed_dir / ARTIFACTS["trajs"]
    missing = [p.name for p in (data_path, traj_path) if not p.exists()]
    if missing:
        raise CliError(f"{seed_dir}: missing artifacts {', '.join(missing)}", EXIT_RUNTIME)
    ds = load_dataset(data_path, space_kind=cfg.space)
    traj_ds = TrajectoryDataset.load(traj_path)
    out = seed_dir / "stats"
    out.mkdir(exist_ok=True)

    cand_scores = np.array([])
    for name in ("evaluated.json", ARTIFACTS["select"]):
        path = seed_dir / name
        if path.exists():
            cands = CandidateSet.load(path)
            if cands.oracle_scores is not None:
                cand_scores = cands.oracle_scores
            break
    traj_scores = traj_ds.raw_scores().ravel()
    pooled = np.concatenate([ds.scores, traj_scores, cand_scores])
    edges = np.histogram_bin_edges(pooled, bins=bins)
    _histogram_csv(out / "hist_dataset.csv", np.asarray(ds.scores), edges)
    _histogram_csv(out / "hist_trajs.csv", traj_scores, edges)
    _histogram_csv(out / "hist_candidates.csv", cand_scores, edges)
    shift = score_shift_stats(traj_ds, ds)
    (out / "score_shift.json").write_text(json.dumps(shift, indent=2), encoding="utf-8")

    emitted = ["hist_dataset.csv", "hist_trajs.csv", "hist_candidates.csv", "score_shift.json"]
    if ds.dim == 2:
        _polyline_csv(out / "trajs_polylines.csv", traj_ds.designs(), traj_ds.raw_scores())
        emitted.append("trajs_polylines.csv")
        samples = seed_dir / ARTIFACTS["sample"]
        if samples.exists():
            payload = json.loads(samples.read_text(encoding="utf-8"))
            _polyline_csv(out / "generated_polylines.csv", np.asarray(payload["designs"]), None)
            emitted.append("generated_polylines.csv")
        try:
            oracle = get_oracle(cfg.task)
        except ValueError:
            oracle = None
        if oracle is not None and oracle.bounds.shape[0] == 2:
            with open(out / "contour.csv", "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["x0", "x1", "y"])
                for row in contour_grid(oracle):
                    writer.writerow([repr(v) for v in row])
            emitted.append("contour.csv")
    return {"dir": str(out), "files": emitted}


def cmd_stats(args) -> int:
    out = _require_out(args)
    if not out.is_dir():
        raise CliError(f"{out}: no such run directory", EXIT_RUNTIME)
    cfg_path = args.config or (out / "config.toml" if (out / "config.toml").exists() else None)
    if cfg_path is None and (out.parent / "config.toml").exists():
        cfg_path = out.parent / "config.toml"
    try:
        cfg = load_config(cfg_path) if cfg_path else ExperimentConfig()
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    seed_dirs = sorted(p for p in out.glob("seed_*") if p.is_dir()) or [out]
    results = [emit_stats(d, cfg) for d in seed_dirs]
    print(json.dumps(results))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="flat TOML experiment config")
    shared.add_argument("--seed", type=int, help="overrides GTG_SEED and the config seeds")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--verbose", "-v", action="store_true")
    shared.add_argument("--force", action="store_true", help="overwrite existing outputs")

    parser = argparse.ArgumentParser(prog="gtg", description="Guided trajectory generation for offline optimization")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        sub.add_parser(name, parents=[shared])
    run = sub.add_parser("run", parents=[shared])
    run.add_argument("--resume", action="store_true", help="continue into an existing run directory")
    abl = sub.add_parser("ablate", parents=[shared])
    abl.add_argument("--axis", help="H, C, alpha, K, epsilon, Q, omega or gamma")
    abl.add_argument("--values", help="comma-separated values")
    abl.add_argument("--resume", action="store_true")
    sub.add_parser("stats", parents=[shared])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        if args.command in STAGE_COMMANDS:
            return cmd_stage(args, STAGE_COMMANDS[args.command])
        if args.command == "run":
            return cmd_run(args)
        if args.command == "ablate":
            return cmd_ablate(args)
        return cmd_stats(args)
    except CliError as exc:
        return _fail(str(exc), exc.code, args.command)
    except StageError as exc:
        return _fail(str(exc), EXIT_RUNTIME, args.command)
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled error", exc_info=True)
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_RUNTIME, args.command)


if __name__ == "__main__":
    sys.exit(main())
