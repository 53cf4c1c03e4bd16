"""Federated training loop: warm-up profiling, per-round selection, local training, aggregation."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import selector as sel
from .data import ClientPartition, LabeledDataset, subsample_fixed
from .estimator import BiasProfile, build_profile
from .nn import (
    INITIALIZERS,
    NetworkParams,
    TrainConfig,
    dataset_loss,
    evaluate,
    mlp_spec,
    train_local,
)

log = logging.getLogger(__name__)

POLICIES = ("random", "all_clients", "greedy_balance", "bacsa", "bacsa_fs", "bacsa_snr")
THREADS_ENV = "BACSA_THREADS"

# RNG stream tags, combined with (seed, round, client) into SeedSequence entropy
_TRAIN, _SELECT, _SUBSAMPLE, _WARMUP = 11, 12, 13, 14


class EngineError(RuntimeError):
    def __init__(self, msg: str, round_index: int | None = None, client: int | None = None):
        ctx = []
        if round_index is not None:
            ctx.append(f"round {round_index}")
        if client is not None:
            ctx.append(f"client {client}")
        super().__init__(f"{', '.join(ctx)}: {msg}" if ctx else msg)
        self.round_index = round_index
        self.client = client


@dataclass
class FLConfig:
    n_clients: int = 20
    n_select: int = 5
    rounds: int = 150
    policy: str = "bacsa"
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: tuple[int, ...] = (32,)
    init: str = "bacsa"
    n0: int | None = None  # None -> min_k N_k
    gamma: float = 0.05
    theta: float = 1.0
    variance: str = "uniform"
    refresh: int = 0  # re-profile selected clients every `refresh` rounds; 0 = frozen
    seed: int = 0

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if not 1 <= self.n_select <= self.n_clients:
            raise ValueError("need 1 <= n_select <= n_clients")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.init not in INITIALIZERS:
            raise ValueError(f"unknown init {self.init!r}")
        if self.n0 is not None and self.n0 < 1:
            raise ValueError("n0 must be positive")
        if self.gamma < 0 or self.theta <= 0:
            raise ValueError("need gamma >= 0 and theta > 0")
        if self.refresh < 0:
            raise ValueError("refresh must be non-negative")


@dataclass
class ChannelModel:
    snr: np.ndarray
    lo_db: float
    hi_db: float
    seed: int

    @property
    def snr_db(self) -> np.ndarray:
        return 10.0 * np.log10(self.snr)


@dataclass
class RoundReport:
    round: int
    chosen: tuple[int, ...]
    objective: float
    accuracy: float
    loss: float
    m: np.ndarray


@dataclass
class RunResult:
    reports: list[RoundReport]
    params: NetworkParams
    profile: BiasProfile
    state: sel.SelectionState
    channel: ChannelModel


def assign_snr(n_clients: int, lo_db: float, hi_db: float, seed: int) -> ChannelModel:
    """Static per-client SNR, uniform in dB over ``[lo_db, hi_db]``."""
    if hi_db < lo_db:
        raise ValueError("hi_db must be >= lo_db")
    db = np.random.default_rng([seed, 21]).uniform(lo_db, hi_db, size=n_clients)
    return ChannelModel(10.0 ** (db / 10.0), lo_db, hi_db, seed)


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def _map_clients(fn: Callable[[int], NetworkParams], clients: Sequence[int]) -> list[NetworkParams]:
    """Apply ``fn`` per client; results are in ``clients`` order regardless of threading."""
    n = thread_count()
    if n == 1 or len(clients) < 2:
        return [fn(k) for k in clients]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, clients))


def aggregate(models: Sequence[NetworkParams], weights: Sequence[float]) -> NetworkParams:
    """Parameter-wise weighted mean; weights are normalised to sum to one."""
    if not models:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(models),) or (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative, one per model, with positive sum")
    shapes = models[0].shapes()
    if any(m.shapes() != shapes for m in models[1:]):
        raise ValueError("models differ in shape")
    w = w / w.sum()
    n_layers = models[0].n_layers
    weights_out = [sum(wi * m.weights[i] for wi, m in zip(w, models)) for i in range(n_layers)]
    biases_out = [sum(wi * m.biases[i] for wi, m in zip(w, models)) for i in range(n_layers)]
    return NetworkParams(weights_out, biases_out, models[0].seed)


def initial_model(cfg: FLConfig, input_dim: int, n_classes: int) -> NetworkParams:
    return INITIALIZERS[cfg.init](mlp_spec(input_dim, cfg.hidden, n_classes), cfg.seed)


def warmup(
    params: NetworkParams,
    dataset: LabeledDataset,
    partition: ClientPartition,
    train_cfg: TrainConfig,
    seed: int,
) -> tuple[BiasProfile, list[NetworkParams]]:
    """Every client trains once from the same initial model; the server profiles the results.

    The global model is not advanced.
    """

    def one(k: int) -> NetworkParams:
        ix = partition.indices[k]
        if len(ix) == 0:
            raise EngineError("client has no data", client=k)
        try:
            return train_local(params, dataset.features[ix], dataset.labels[ix], train_cfg, [seed, _WARMUP, k])
        except Exception as exc:  # noqa: BLE001 - rewrapped with client id
            raise EngineError(str(exc), client=k) from exc

    models = _map_clients(one, list(range(partition.n_clients)))
    return build_profile(models), models


class Simulation:
    """Holds one federated run; ``rounds()`` yields reports as they are produced."""

    def __init__(
        self,
        cfg: FLConfig,
        train: LabeledDataset,
        test: LabeledDataset,
        partition: ClientPartition,
        channel: ChannelModel | None = None,
    ):
        if partition.n_clients != cfg.n_clients:
            raise ValueError(f"partition has {partition.n_clients} clients, config {cfg.n_clients}")
        self.cfg = cfg
        self.train = train
        self.test = test
        self.partition = partition
        self.channel = channel or assign_snr(cfg.n_clients, 10.0, 10.0, cfg.seed)
        self.sizes = partition.sizes()
        self.n0 = cfg.n0 if cfg.n0 is not None else int(self.sizes.min())
        self.params = initial_model(cfg, train.dim, train.n_classes)
        snr = self.channel.snr if cfg.policy == "bacsa_snr" else None
        self.state = sel.SelectionState.fresh(
            cfg.n_clients, cfg.n_select, gamma=cfg.gamma, theta=cfg.theta, snr=snr
        )
        self.profile: BiasProfile | None = None
        self._local_models: list[NetworkParams] | None = None
        self.reports: list[RoundReport] = []

    # -- phases --------------------------------------------------------------

    def warmup(self) -> BiasProfile:
        self.profile, self._local_models = warmup(
            self.params, self.train, self.partition, self.cfg.train, self.cfg.seed
        )
        return self.profile

    def select(self, t: int) -> sel.SelectionResult:
        cfg, beta = self.cfg, self.profile.proportions
        if cfg.policy == "random":
            res = sel.select_random(cfg.n_clients, cfg.n_select, [cfg.seed, _SELECT, t])
        elif cfg.policy == "all_clients":
            res = sel.SelectionResult(tuple(range(cfg.n_clients)), 0.0, 0.0, 0.0)
        elif cfg.policy == "greedy_balance":
            res = sel.select_greedy_balance(beta, cfg.n_select)
        else:
            return sel.select_optimal(beta, self.state, cfg.variance)
        v, x = sel.objective_terms(res.chosen, beta, self.state, cfg.variance)
        return sel.SelectionResult(res.chosen, v + x, v, x, res.evaluated)

    def client_indices(self, chosen: Sequence[int], t: int) -> list[np.ndarray]:
        ix = [self.partition.indices[k] for k in chosen]
        if self.cfg.policy == "bacsa_fs":
            subs = subsample_fixed(ix, self.train.labels, self.n0, [self.cfg.seed, _SUBSAMPLE, t])
            return subs
        return ix

    def run_round(self, t: int) -> RoundReport:
        if self.profile is None:
            raise EngineError("warm-up has not run", round_index=t)
        cfg = self.cfg
        try:
            res = self.select(t)
        except Exception as exc:  # noqa: BLE001
            raise EngineError(f"selection failed: {exc}", round_index=t) from exc
        chosen = list(res.chosen)
        local_ix = self.client_indices(chosen, t)
        start = self.params

        def one(j: int) -> NetworkParams:
            ix = local_ix[j]
            try:
                return train_local(
                    start, self.train.features[ix], self.train.labels[ix], cfg.train,
                    [cfg.seed, _TRAIN, t, chosen[j]],
                )
            except Exception as exc:  # noqa: BLE001
                raise EngineError(str(exc), round_index=t, client=chosen[j]) from exc

        models = _map_clients(one, list(range(len(chosen))))
        if cfg.policy == "bacsa_fs":
            weights = np.ones(len(chosen))
        else:
            weights = np.array([len(ix) for ix in local_ix], dtype=float)
        self.params = aggregate(models, weights)
        losses = [
            dataset_loss(m, self.train.features[ix], self.train.labels[ix])
            for m, ix in zip(models, local_ix)
        ]
        self.state = sel.record_selection(self.state, chosen)
        if cfg.refresh and t % cfg.refresh == 0:
            self._refresh_profile(chosen, models)
        report = RoundReport(
            round=t,
            chosen=tuple(chosen),
            objective=res.objective,
            accuracy=evaluate(self.params, self.test.features, self.test.labels),
            loss=float(np.mean(losses)),
            m=self.state.m.copy(),
        )
        self.reports.append(report)
        return report

    def _refresh_profile(self, chosen: Sequence[int], models: Sequence[NetworkParams]) -> None:
        assert self._local_models is not None
        for k, m in zip(chosen, models):
            self._local_models[k] = m
        self.profile = build_profile(self._local_models)

    def rounds(self) -> Iterator[RoundReport]:
        if self.profile is None:
            self.warmup()
        for t in range(len(self.reports) + 1, self.cfg.rounds + 1):
            yield self.run_round(t)

    def result(self) -> RunResult:
        return RunResult(self.reports, self.params, self.profile, self.state, self.channel)


def run(
    cfg: FLConfig,
    train: LabeledDataset,
    test: LabeledDataset,
    partition: ClientPartition,
    channel: ChannelModel | None = None,
    on_round: Callable[[RoundReport], None] | None = None,
) -> RunResult:
    sim = Simulation(cfg, train, test, partition, channel)
    for report in sim.rounds():
        if on_round is not None:
            on_round(report)
        log.debug("round %d acc=%.4f chosen=%s", report.round, report.accuracy, report.chosen)
    return sim.result()
