"""Client-subset selection under the bias-aware objective.

The objective of a subset ``S`` is ``V + X``:

* ``V`` measures how far the grouped class profile (the per-class mean of
  the selected clients' estimated proportions) sits from uniform;
* ``X = gamma * sum_{k in S} sqrt(6 ln(r) m_k / (theta snr_k))`` penalises
  clients that have already been picked often, and is cheaper for clients
  with a good channel.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

EXHAUSTIVE_BUDGET = 10**6
_CHUNK = 1 << 15
_TIE_RTOL = 1e-12


class SelectionBudgetError(RuntimeError):
    """Exhaustive search would exceed the subset budget."""


@dataclass
class SelectionState:
    m: np.ndarray
    n_select: int
    r: int = 1
    gamma: float = 0.05
    theta: float = 1.0
    snr: np.ndarray | None = None

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.int64)
        k = self.m.size
        self.snr = np.ones(k) if self.snr is None else np.asarray(self.snr, dtype=float)
        if self.snr.shape != (k,) or (self.snr <= 0).any():
            raise ValueError("snr must hold one positive value per client")
        if not 1 <= self.n_select <= k:
            raise ValueError(f"n_select={self.n_select} outside [1, {k}]")
        if self.r < 1 or self.gamma < 0 or self.theta <= 0:
            raise ValueError("need r >= 1, gamma >= 0, theta > 0")

    @classmethod
    def fresh(cls, n_clients: int, n_select: int, **kw) -> SelectionState:
        return cls(np.zeros(n_clients, dtype=np.int64), n_select, **kw)

    @property
    def n_clients(self) -> int:
        return int(self.m.size)

    def exploration_costs(self) -> np.ndarray:
        """Per-client exploration penalty (already multiplied by gamma)."""
        if self.r == 1 or self.gamma == 0:
            return np.zeros(self.n_clients)
        return self.gamma * np.sqrt(3.0 * math.log(self.r) * 2.0 * self.m / (self.theta * self.snr))

    def copy(self) -> SelectionState:
        return replace(self, m=self.m.copy(), snr=self.snr.copy())


@dataclass
class SelectionResult:
    chosen: tuple[int, ...]
    objective: float
    variance_term: float
    exploration_term: float
    evaluated: int = field(default=0, compare=False)


def _variance(qbar: np.ndarray, beta_sel: np.ndarray, mode: str) -> np.ndarray:
    # beta_sel: class axis first, client axis last; qbar: its mean over clients.
    # "uniform" = distance of the grouped profile from 1/classes,
    # "spread" = within-group scatter around the grouped profile.
    if mode == "uniform":
        return ((qbar - 1.0 / qbar.shape[0]) ** 2).sum(axis=0)
    if mode == "spread":
        return ((beta_sel - qbar[..., None]) ** 2).sum(axis=(0, -1))
    raise ValueError(f"unknown variance mode {mode!r}")


def objective_terms(
    subset: Iterable[int], beta: np.ndarray, state: SelectionState, variance: str = "uniform"
) -> tuple[float, float]:
    s = sorted(int(k) for k in subset)
    if not s:
        raise ValueError("empty subset")
    cols = np.asarray(beta, dtype=float)[:, s]
    v = float(_variance(cols.mean(axis=1), cols, variance))
    x = float(state.exploration_costs()[s].sum())
    return v, x


def objective(
    subset: Iterable[int], beta: np.ndarray, state: SelectionState, variance: str = "uniform"
) -> float:
    v, x = objective_terms(subset, beta, state, variance)
    return v + x


def _result(subset, beta, state, variance, evaluated=0) -> SelectionResult:
    chosen = tuple(sorted(int(k) for k in subset))
    v, x = objective_terms(chosen, beta, state, variance)
    return SelectionResult(chosen, v + x, v, x, evaluated)


def _is_tie(a: float, best: float) -> bool:
    return a <= best + _TIE_RTOL * max(1.0, abs(best))


def select_exhaustive(
    beta: np.ndarray,
    state: SelectionState,
    variance: str = "uniform",
    budget: int = EXHAUSTIVE_BUDGET,
) -> SelectionResult:
    """Global minimiser over all ``n_select``-subsets.

    Subsets are scanned in lexicographic order and objectives within a
    relative 1e-12 of the running best count as ties, so the lexicographically
    smallest optimum wins.
    """
    beta = np.asarray(beta, dtype=float)
    k, n = state.n_clients, state.n_select
    total = math.comb(k, n)
    if total > budget:
        raise SelectionBudgetError(f"C({k}, {n}) = {total} exceeds budget {budget}")
    costs = state.exploration_costs()
    combos = itertools.combinations(range(k), n)
    best_val, best = math.inf, None
    while True:
        chunk = np.array(list(itertools.islice(combos, _CHUNK)), dtype=np.int64)
        if chunk.size == 0:
            break
        sel = beta[:, chunk]  # (classes, subsets, n)
        vals = _variance(sel.mean(axis=2), sel, variance) + costs[chunk].sum(axis=1)
        cmin = float(vals.min())
        if best is None or not _is_tie(best_val, cmin):
            first = int(np.flatnonzero(vals <= cmin + _TIE_RTOL * max(1.0, abs(cmin)))[0])
            best_val, best = float(vals[first]), chunk[first]
    return _result(best, beta, state, variance, total)


def select_greedy_swap(
    beta: np.ndarray, state: SelectionState, variance: str = "uniform", swap: bool = True
) -> SelectionResult:
    """Greedy add-one-best, then best-improvement single swaps to a local optimum."""
    beta = np.asarray(beta, dtype=float)
    k, n = state.n_clients, state.n_select
    chosen: list[int] = []
    evaluated = 0
    while len(chosen) < n:
        best_val, best_c = math.inf, -1
        for c in range(k):
            if c in chosen:
                continue
            val = objective(chosen + [c], beta, state, variance)
            evaluated += 1
            if val < best_val and not _is_tie(best_val, val):
                best_val, best_c = val, c
        chosen.append(best_c)
    current = objective(chosen, beta, state, variance)
    while swap:
        best_val, best_swap = current, None
        for out in sorted(chosen):
            for inn in range(k):
                if inn in chosen:
                    continue
                cand = [c for c in chosen if c != out] + [inn]
                val = objective(cand, beta, state, variance)
                evaluated += 1
                if val < best_val and not _is_tie(best_val, val):
                    best_val, best_swap = val, cand
        if best_swap is None or _is_tie(current, best_val):
            break
        chosen, current = best_swap, best_val
    return _result(chosen, beta, state, variance, evaluated)


def select_greedy_balance(beta: np.ndarray, n_select: int) -> SelectionResult:
    """Pure class-balance greedy baseline: no exploration, no swap phase."""
    beta = np.asarray(beta, dtype=float)
    state = SelectionState.fresh(beta.shape[1], n_select, gamma=0.0)
    return select_greedy_swap(beta, state, swap=False)


def select_random(n_clients: int, n_select: int, seed: int | Sequence[int]) -> SelectionResult:
    if not 1 <= n_select <= n_clients:
        raise ValueError(f"n_select={n_select} outside [1, {n_clients}]")
    chosen = np.random.default_rng(seed).choice(n_clients, size=n_select, replace=False)
    return SelectionResult(tuple(sorted(int(c) for c in chosen)), math.nan, math.nan, math.nan)


def select_optimal(
    beta: np.ndarray, state: SelectionState, variance: str = "uniform"
) -> SelectionResult:
    """Exhaustive search when affordable, greedy+swap otherwise."""
    if math.comb(state.n_clients, state.n_select) <= EXHAUSTIVE_BUDGET:
        return select_exhaustive(beta, state, variance)
    return select_greedy_swap(beta, state, variance)


def record_selection(state: SelectionState, chosen: Iterable[int]) -> SelectionState:
    out = state.copy()
    for c in chosen:
        out.m[int(c)] += 1
    out.r += 1
    return out
