"""Config-driven experiments that write CSV/JSON (and optionally PNG) results.

All CSVs use ``.`` decimals, ``\\n`` line endings and a fixed float format, so
reruns with the same config are byte-identical.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import binomtest

from . import plotting
from .config import ConfigError, ExperimentConfig, dump_config
from .data import (
    ClientPartition,
    LabeledDataset,
    class_counts,
    gen_synthetic,
    load_idx,
    make_partition,
    split_per_class,
    true_proportions,
)
from .engine import FLConfig, RunResult, assign_snr, run, warmup
from .estimator import estimation_error, rank_agreement
from .nn import INITIALIZERS, mlp_spec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TAIL = 50  # rounds used for the stability statistic


class SummaryVersionError(ValueError):
    pass


def fmt(x: float) -> str:
    x = float(x)
    if np.isnan(x):
        return "nan"
    return format(x, ".10g")


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def write_json(path: str | Path, obj: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def load_summary(path: str | Path) -> dict:
    obj = json.loads(Path(path).read_text())
    version = obj.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SummaryVersionError(f"{path}: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    return obj


def prepare_out(path: str | Path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return out


def _stats(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=float)
    return {"mean": float(v.mean()), "std": float(v.std()), "per_seed": [float(x) for x in v]}


# -- single runs -------------------------------------------------------------


@dataclass
class SeedRun:
    seed: int
    policy: str
    result: RunResult
    train: LabeledDataset
    partition: ClientPartition

    @property
    def accuracy(self) -> np.ndarray:
        return np.array([r.accuracy for r in self.result.reports])

    @property
    def final(self) -> float:
        return float(self.accuracy[-1])

    @property
    def best(self) -> float:
        return float(self.accuracy.max())

    @property
    def tail_std(self) -> float:
        return float(self.accuracy[-TAIL:].std())

    def p_true(self) -> np.ndarray:
        return true_proportions(self.partition, self.train)


def load_data(cfg: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.dataset
    if d.source == "idx":
        return (
            load_idx(d.train_images, d.train_labels, d.classes),
            load_idx(d.test_images, d.test_labels, d.classes),
        )
    full = gen_synthetic(d.classes, d.per_class + d.test_per_class, d.dim, d.spread, seed)
    return split_per_class(full, d.test_per_class, seed)


def fl_config(cfg: ExperimentConfig, seed: int, policy: str | None = None) -> FLConfig:
    return replace(cfg.fl, seed=seed, policy=policy or cfg.fl.policy)


def run_seed(cfg: ExperimentConfig, seed: int, policy: str | None = None) -> SeedRun:
    train, test = load_data(cfg, seed)
    part = make_partition(train, cfg.fl.n_clients, cfg.partition, seed)
    channel = assign_snr(cfg.fl.n_clients, cfg.channel.lo_db, cfg.channel.hi_db, seed)
    fl = fl_config(cfg, seed, policy)
    res = run(fl, train, test, part, channel)
    log.info("seed %d policy %s final accuracy %.4f", seed, fl.policy, res.reports[-1].accuracy)
    return SeedRun(seed, fl.policy, res, train, part)


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> dict:
    """Run ``cfg.fl.policy`` for every seed.

    rounds.csv, counts.csv and profile.csv describe the first seed;
    summary.json aggregates all seeds.
    """
    out = prepare_out(out or cfg.out)
    runs = [run_seed(cfg, s) for s in cfg.seed_list()]
    first = runs[0]
    policy = first.policy
    reports = first.result.reports

    write_csv(out / "rounds.csv", ["round", "policy", "accuracy", "loss", "objective"],
              ([r.round, policy, r.accuracy, r.loss, r.objective] for r in reports))
    m = first.result.state.m
    snr_db = first.result.channel.snr_db
    write_csv(out / "counts.csv", ["client", "m", "snr_db"],
              ([k, int(m[k]), float(snr_db[k])] for k in range(len(m))))
    p_true = first.p_true()
    prof = first.result.profile
    n_cls, n_cli = p_true.shape
    write_csv(out / "profile.csv", ["client", "class", "p_true", "p_hat", "beta"],
              ([k, i, float(p_true[i, k]), float(prof.proportions[i, k]), float(prof.global_beta[i, k])]
               for k in range(n_cli) for i in range(n_cls)))

    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "run",
        "policy": policy,
        "seeds": [r.seed for r in runs],
        "rounds": len(reports),
        "final_accuracy": _stats([r.final for r in runs]),
        "best_accuracy": _stats([r.best for r in runs]),
        "tail_std": _stats([r.tail_std for r in runs]),
        "selection_weighted_snr_db": _stats([_weighted_snr_db(r.result) for r in runs]),
        "count_std": _stats([float(r.result.state.m.std()) for r in runs]),
        "config": dump_config(cfg).splitlines(),
    }
    write_json(out / "summary.json", summary)
    if cfg.figures:
        plotting.plot_accuracy({f"{policy} seed {r.seed}": r.accuracy for r in runs}, out / "rounds.png")
        plotting.plot_counts(m, snr_db, out / "counts.png")
        plotting.plot_profile(p_true, prof.proportions, out / "profile.png")
    return summary


def _weighted_snr_db(result: RunResult) -> float:
    """Mean client SNR (dB) weighted by how often each client was selected."""
    m = result.state.m.astype(float)
    return float((m * result.channel.snr_db).sum() / m.sum())


# -- Monte Carlo initialisation study ----------------------------------------


@dataclass
class MonteCarloResult:
    kappa: dict[str, np.ndarray]  # init -> (H,)
    spearman: dict[str, np.ndarray]  # init -> (H,) nan-mean over clients
    wins: int
    trials: int
    sign_test_p: float


def sign_test(better: np.ndarray, worse: np.ndarray) -> tuple[int, int, float]:
    """One-sided paired sign test that ``better`` is smaller; ties are dropped."""
    d = np.asarray(worse) - np.asarray(better)
    wins, trials = int((d > 0).sum()), int((d != 0).sum())
    p = binomtest(wins, trials, 0.5, alternative="greater").pvalue if trials else 1.0
    return wins, trials, float(p)


def run_montecarlo_init(cfg: ExperimentConfig, out: str | Path | None = None,
                        inits: Sequence[str] = ("bacsa", "glorot")) -> MonteCarloResult:
    """H seeded repetitions of partition, warm-up and estimation for each init."""
    h = cfg.montecarlo_h
    if h < 2:
        raise ConfigError("Monte Carlo study needs run.montecarlo_h >= 2")
    out = prepare_out(out or cfg.out)
    kappa = {i: np.zeros(h) for i in inits}
    rho = {i: np.zeros(h) for i in inits}
    rows = []
    for run_ix, seed in enumerate(range(cfg.seed, cfg.seed + h)):
        train, _ = load_data(cfg, seed)
        part = make_partition(train, cfg.fl.n_clients, cfg.partition, seed)
        p_true = true_proportions(part, train)
        spec = mlp_spec(train.dim, cfg.fl.hidden, train.n_classes)
        for init in inits:
            params = INITIALIZERS[init](spec, seed)
            prof, _ = warmup(params, train, part, cfg.fl.train, seed)
            kappa[init][run_ix] = estimation_error(p_true, prof.proportions).mean_kappa
            rho[init][run_ix] = np.nanmean(rank_agreement(p_true, prof.proportions))
            rows.append([run_ix, init, float(kappa[init][run_ix])])
        log.info("montecarlo run %d: %s", run_ix, {i: round(kappa[i][run_ix], 2) for i in inits})
    write_csv(out / "mc.csv", ["run", "init", "mean_kappa"], rows)
    wins, trials, p = sign_test(kappa[inits[0]], kappa[inits[1]])
    write_json(out / "mc_summary.json", {
        "schema_version": SCHEMA_VERSION,
        "kind": "montecarlo",
        "runs": h,
        "mean_kappa": {i: _stats(kappa[i]) for i in inits},
        "mean_spearman": {i: _stats(rho[i]) for i in inits},
        "sign_test": {"better": inits[0], "wins": wins, "trials": trials, "p_value": p},
        "config": dump_config(cfg).splitlines(),
    })
    if cfg.figures:
        plotting.plot_kappa(kappa, out / "mc.png")
    return MonteCarloResult(kappa, rho, wins, trials, p)


# -- policy comparison -------------------------------------------------------


@dataclass
class Comparison:
    runs: dict[str, list[SeedRun]]

    def final(self, policy: str) -> np.ndarray:
        return np.array([r.final for r in self.runs[policy]])

    def tail_std(self, policy: str) -> np.ndarray:
        return np.array([r.tail_std for r in self.runs[policy]])

    def runs_for(self, policy: str) -> list[SeedRun]:
        return self.runs[policy]


def compare_policies(cfg: ExperimentConfig, policies: Sequence[str] | None = None,
                     seeds: Sequence[int] | None = None, out: str | Path | None = None) -> Comparison:
    policies = list(cfg.policies if policies is None else policies)
    if not policies:
        raise ConfigError("compare needs at least one policy")
    seeds = list(cfg.seed_list() if seeds is None else seeds)
    out = prepare_out(out or cfg.out)
    runs = {p: [run_seed(cfg, s, p) for s in seeds] for p in policies}

    rows = []
    for p in policies:
        for r in runs[p]:
            rows.append([p, r.seed, r.final, r.best, "", ""])
        fin = np.array([r.final for r in runs[p]])
        best = np.array([r.best for r in runs[p]])
        rows.append([p, "mean", float(fin.mean()), float(best.mean()), float(fin.std()), float(best.std())])
    write_csv(out / "comparison.csv",
              ["policy", "seed", "final_accuracy", "best_accuracy", "final_std", "best_std"], rows)
    write_csv(out / "comparison_rounds.csv", ["round", "policy", "seed", "accuracy"],
              ([t + 1, p, r.seed, float(a)] for p in policies for r in runs[p] for t, a in enumerate(r.accuracy)))
    if cfg.figures:
        plotting.plot_band({p: np.stack([r.accuracy for r in runs[p]]) for p in policies},
                           out / "comparison.png")
    return Comparison(runs)


# -- partition statistics ----------------------------------------------------


def partition_stats(cfg: ExperimentConfig, out: str | Path | None = None) -> np.ndarray:
    """Write partition.csv (``client,class,count,proportion``); returns the count matrix."""
    out = prepare_out(out or cfg.out)
    train, _ = load_data(cfg, cfg.seed)
    part = make_partition(train, cfg.fl.n_clients, cfg.partition, cfg.seed)
    counts = class_counts(part, train)
    props = true_proportions(part, train)
    write_csv(out / "partition.csv", ["client", "class", "count", "proportion"],
              ([k, i, int(counts[i, k]), float(props[i, k])]
               for k in range(counts.shape[1]) for i in range(counts.shape[0])))
    if cfg.figures:
        plotting.plot_partition(counts, out / "partition.png")
    return counts
