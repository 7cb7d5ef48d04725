"""Run orchestration: single runs, sweeps, comparison tables and figure series.

A run directory holds

    config.cfg     resolved configuration of the run
    curve.csv      epoch,train_loss,cv_loss,lr,sim_time
    trace.csv      time,worker,kind,seq,staleness
    final.ckpt     final global model (PSYN1 checkpoint)
    summary.json   headline numbers used by ``compare``
    manifest.json  config hash, sha256 of every artifact, versions, timings

Everything except manifest.json is byte-identical across reruns of the same
config.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, parse_config
from .data import Dataset, ShardedDataset, cv_split, make_synthetic, shard
from .errors import ConfigError, InputError
from .numkit import Model, init_model, save_checkpoint
from .sim import (RunResult, SimConfig, curve_csv, read_curve_csv, run_simulation,
                  sequential_sgd, trace_csv, warm_start)

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DIVERGED = 2
EXIT_CONFIG = 64
ARTIFACTS = ("config.cfg", "curve.csv", "trace.csv", "final.ckpt", "summary.json")


@dataclass
class Problem:
    model0: Model
    train: Dataset
    cv: Dataset
    shards: ShardedDataset


def build_problem(cfg: ExperimentConfig) -> Problem:
    """Dataset, CV split, warm-started initial model and shards for one run."""
    ds = make_synthetic(cfg.task, cfg.n, cfg.d, cfg.noise, cfg.cond, cfg.seed, cfg.n_classes)
    train, cv = cv_split(ds, cfg.cv_fraction, cfg.seed)
    if cfg.model_kind == "mlp":
        out = cfg.n_classes if cfg.task == "mlp-teacher" else 1
        loss = cfg.loss or ("xent" if cfg.task == "mlp-teacher" else "mse")
        if cfg.task == "logreg" and not cfg.loss:
            raise ConfigError("set model.loss for an MLP on logreg data", "model.loss")
        model = init_model("mlp", (cfg.d, *cfg.hidden, out), cfg.seed, loss)
    else:
        model = init_model(cfg.model_kind, (cfg.d, 1), cfg.seed)
    if cfg.warm_start_epochs:
        model = warm_start(model, train, cfg.minibatch, cfg.warm_start_lr or cfg.lr, cfg.seed,
                           cfg.warm_start_epochs)
    shards = shard(train, cfg.n_workers, cfg.tau, cfg.minibatch, cfg.seed, cfg.reshuffle)
    return Problem(model, train, cv, shards)


def simulate(cfg: ExperimentConfig, problem: Problem | None = None,
             record_globals: bool = False) -> tuple[RunResult, RunResult]:
    """Run the configured strategy and its single-worker timing reference."""
    cfg.validate()
    p = problem or build_problem(cfg)
    sim_cfg = SimConfig(cfg.strategy(), cfg.worker_times(), cfg.exchange_cost, cfg.epochs_max,
                        cfg.seed, record_globals)
    # one epoch is enough for the reference: only its seconds per epoch are used
    ref = sequential_sgd(p.model0, p.train, cfg.minibatch, cfg.lr, cfg.worker_times()[0],
                         1, cfg.seed, cfg.reshuffle, p.cv)
    res = run_simulation(sim_cfg, p.model0, p.shards, p.cv, reference=ref)
    return res, ref


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path) -> tuple[int, RunResult]:
    """Simulate one config and write its run directory; returns (exit code, result)."""
    started = time.time()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.validate()
    problem = build_problem(cfg)
    res, ref = simulate(cfg, problem)
    (out / "config.cfg").write_text(cfg.to_text())
    (out / "curve.csv").write_text(curve_csv(res.learning_curve))
    (out / "trace.csv").write_text(trace_csv(res.trace))
    save_checkpoint(problem.model0.with_params(res.final_global), out / "final.ckpt")
    summary = {
        "strategy": cfg.kind,
        "n_workers": cfg.n_workers,
        "sync_period": cfg.tau,
        "minibatch": cfg.minibatch,
        "status": res.status,
        "epochs": res.epochs,
        "final_cv_loss": res.final_cv_loss if math.isfinite(res.final_cv_loss) else "inf",
        "seconds_per_epoch": res.seconds_per_epoch(),
        "reference_seconds_per_epoch": ref.seconds_per_epoch(),
        "speedup_vs_reference": res.speedup_vs_reference,
        "problem_key": cfg.problem_key(),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    code = EXIT_DIVERGED if res.diverged else EXIT_OK
    manifest = {
        "config_hash": cfg.config_hash(),
        "artifacts": {name: {"path": name, "sha256": _sha256(out / name)} for name in ARTIFACTS},
        "versions": {"psyn": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "wall_start": started,
        "wall_end": time.time(),
        "status": "completed" if code == EXIT_OK else "diverged",
        "exit_code": code,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    log.info("%s: %s after %d epochs, cv loss %s", out, res.status, res.epochs,
             summary["final_cv_loss"])
    return code, res


def verify_manifest(run_dir: str | Path) -> bool:
    """True when every artifact listed in the manifest exists with its recorded checksum."""
    run = Path(run_dir)
    manifest = json.loads((run / "manifest.json").read_text())
    for entry in manifest["artifacts"].values():
        path = run / entry["path"]
        if not path.exists() or _sha256(path) != entry["sha256"]:
            return False
    return True


# ---------------------------------------------------------------------------
# comparison and figures


def _summary(run_dir: Path) -> dict:
    p = run_dir / "summary.json"
    if not p.exists():
        raise InputError(f"{run_dir} is not a finished run (no summary.json)")
    return json.loads(p.read_text())


def compare(run_dirs: Sequence[str | Path]) -> str:
    """Comparison table as CSV.

    ``speedup`` is relative to the first single-worker run in the set, else the
    first run listed; ``speedup_vs_single`` is each run's own simulated
    single-worker baseline.
    """
    runs = [Path(r) for r in run_dirs]
    if not runs:
        raise InputError("nothing to compare")
    sums = [_summary(r) for r in runs]
    keys = {s["problem_key"] for s in sums}
    if len(keys) > 1:
        raise InputError("runs use different dataset/model settings and cannot be compared")
    ref = next((s for s in sums if s["n_workers"] == 1), sums[0])
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["run", "strategy", "n_workers", "sync_period", "minibatch", "final_cv_loss",
                  "epochs", "speedup", "speedup_vs_single", "status"])
    for r, s in zip(runs, sums):
        sp = ref["seconds_per_epoch"] / s["seconds_per_epoch"] if s["seconds_per_epoch"] else ""
        status = "divergence" if s["status"] == "diverged" else s["status"]
        out.writerow([r.name, s["strategy"], s["n_workers"], s["sync_period"], s["minibatch"],
                      s["final_cv_loss"], s["epochs"], repr(sp), repr(s["speedup_vs_reference"]),
                      status])
    return buf.getvalue()


def reproduce_figures(run_dirs: Sequence[str | Path]) -> str:
    """Long-format CV learning curves: strategy,n_workers,epoch,cv_loss."""
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["strategy", "n_workers", "epoch", "cv_loss"])
    for r in map(Path, run_dirs):
        try:
            s = _summary(r)
            curve = read_curve_csv((r / "curve.csv").read_text())
        except (InputError, FileNotFoundError) as exc:
            log.warning("skipping %s: %s", r, exc)
            continue
        for p in curve:
            out.writerow([s["strategy"], s["n_workers"], p.epoch, repr(p.cv_loss)])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# sweeps


def _run_cell(args: tuple[str, str]) -> tuple[str, int]:
    text, out_dir = args
    cfg = parse_config(text)
    code, _ = run_experiment(cfg, out_dir)
    return out_dir, code


def sweep(cfg: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> list[tuple[Path, int]]:
    """Run every sweep cell into ``out_dir/<cell>``, then write compare.csv and figures.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cells = cfg.cells()
    tasks = [(c.to_text(), str(out / name)) for name, c in cells]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_cell, tasks))
    else:
        done = [_run_cell(t) for t in tasks]
    dirs = [Path(d) for d, _ in done]
    (out / "compare.csv").write_text(compare(dirs))
    (out / "figures.csv").write_text(reproduce_figures(dirs))
    (out / "sweep.json").write_text(json.dumps(
        {"config_hash": cfg.config_hash(), "cells": [d.name for d in dirs],
         "exit_codes": {Path(d).name: c for d, c in done}}, indent=2, sort_keys=True) + "\n")
    return [(Path(d), c) for d, c in done]


def default_out(cfg: ExperimentConfig, config_path: str | Path) -> Path:
    if cfg.out:
        return Path(cfg.out)
    root = Path(os.environ.get("PSYN_OUT", "runs"))
    return root / Path(config_path).stem

