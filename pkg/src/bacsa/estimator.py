"""Class-proportion estimation from the last-layer weights of trained models.

Only the returned model is inspected; no client data leaves the client.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import spearmanr

from .nn import NetworkParams, TrainConfig, init_bacsa, mlp_spec, train_local

SIGN_TOL = 1e-6


class DegenerateProfileError(ValueError):
    pass


@dataclass
class BiasProfile:
    """Per-client bias estimates, all shaped ``(n_classes, n_clients)``.

    ``proportions`` columns are distributions (what selection consumes);
    ``global_beta`` is the cross-client normalisation whose grand total is 1.
    """

    proportions: np.ndarray
    global_beta: np.ndarray
    energy: np.ndarray
    present: np.ndarray

    @property
    def n_clients(self) -> int:
        return self.proportions.shape[1]


@dataclass
class EstimationErrorReport:
    kappa: np.ndarray
    mean_kappa: float


def class_energy(params: NetworkParams) -> np.ndarray:
    """Mean squared positive part of the weights feeding each output neuron."""
    w = params.last_layer
    return np.mean(np.maximum(w, 0.0) ** 2, axis=1)


def proportions_from_energy(energy: np.ndarray, sqrt: bool = True) -> np.ndarray:
    e = np.asarray(energy, dtype=float)
    v = np.sqrt(e) if sqrt else e.copy()
    total = v.sum()
    if total <= 0:
        return np.full(e.shape, 1.0 / e.shape[0])
    return v / total


def estimate_proportions(params: NetworkParams, sqrt: bool = True) -> np.ndarray:
    """Estimated class shares of one client.

    The energy tracks squared class counts, so by default the square root is
    taken before normalising; ``sqrt=False`` normalises the energies directly.
    """
    return proportions_from_energy(class_energy(params), sqrt=sqrt)


def global_beta_from_energy(energy: np.ndarray) -> np.ndarray:
    e = np.asarray(energy, dtype=float)
    total = e.sum()
    if total <= 0:
        raise DegenerateProfileError("all clients have zero class energy")
    return e / total


def estimate_global_beta(models: Sequence[NetworkParams]) -> np.ndarray:
    """Energies of every client divided by the total energy over all clients and classes."""
    if not models:
        raise ValueError("need at least one client model")
    return global_beta_from_energy(np.stack([class_energy(m) for m in models], axis=1))


def sign_profile(params: NetworkParams, tol: float = SIGN_TOL) -> np.ndarray:
    if tol < 0:
        raise ValueError("tol must be non-negative")
    return params.last_layer.mean(axis=1) > tol


def build_profile(
    models: Sequence[NetworkParams], sqrt: bool = True, tol: float = SIGN_TOL
) -> BiasProfile:
    energy = np.stack([class_energy(m) for m in models], axis=1)
    props = np.stack([proportions_from_energy(energy[:, k], sqrt) for k in range(energy.shape[1])], axis=1)
    try:
        beta = global_beta_from_energy(energy)
    except DegenerateProfileError:
        beta = np.full(energy.shape, 1.0 / energy.size)
    present = np.stack([sign_profile(m, tol) for m in models], axis=1)
    return BiasProfile(props, beta, energy, present)


def estimation_error(p_true: np.ndarray, p_hat: np.ndarray) -> EstimationErrorReport:
    """Mean relative absolute error per class, in percent.

    Only clients that actually hold class ``i`` enter the average for that
    class; a class held by nobody scores 0 and is left out of the mean.
    """
    p = np.asarray(p_true, dtype=float)
    q = np.asarray(p_hat, dtype=float)
    if p.shape != q.shape:
        raise ValueError("shape mismatch between true and estimated proportions")
    if p.ndim == 1:
        p, q = p[:, None], q[:, None]
    held = p > 0
    rel = np.where(held, np.abs(p - q) / np.where(held, p, 1.0), 0.0) * 100.0
    n_held = held.sum(axis=1)
    kappa = np.where(n_held > 0, rel.sum(axis=1) / np.maximum(n_held, 1), 0.0)
    mean = float(kappa[n_held > 0].mean()) if (n_held > 0).any() else 0.0
    return EstimationErrorReport(kappa, mean)


def rank_agreement(p_true: np.ndarray, p_hat: np.ndarray) -> np.ndarray:
    """Spearman correlation between true and estimated proportions, one per client.

    Clients whose true or estimated column is constant get NaN (rank
    correlation is undefined there); average with ``np.nanmean``.
    """
    p = np.asarray(p_true, dtype=float)
    q = np.asarray(p_hat, dtype=float)
    if p.shape != q.shape or p.ndim != 2:
        raise ValueError("expected matching (classes, clients) matrices")
    out = np.full(p.shape[1], np.nan)
    for k in range(p.shape[1]):
        if np.ptp(p[:, k]) > 0 and np.ptp(q[:, k]) > 0:
            out[k] = spearmanr(p[:, k], q[:, k]).statistic
    return out


def binary_blobs(n_a: int, n_b: int, dim: int, spread: float, seed: int):
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((2, dim))
    means *= spread / np.linalg.norm(means, axis=1, keepdims=True)
    y = np.repeat([0, 1], [n_a, n_b])
    x = means[y] + rng.standard_normal((n_a + n_b, dim))
    return x, y


def validate_binary_ratio(
    n_a: int,
    n_b: int,
    seed: int = 0,
    dim: int = 64,
    hidden: int = 32,
    spread: float = 2.0,
    cfg: TrainConfig | None = None,
) -> float:
    """Train a two-class model from the constant init and return ``s[a] / s[b]``."""
    if min(n_a, n_b) < 1:
        raise ValueError("both classes need samples")
    cfg = cfg or TrainConfig()
    x, y = binary_blobs(n_a, n_b, dim, spread, seed)
    params = init_bacsa(mlp_spec(dim, [hidden], 2), seed)
    s = class_energy(train_local(params, x, y, cfg, seed))
    if s[1] <= 0:
        raise DegenerateProfileError("minority class energy collapsed to zero")
    return float(s[0] / s[1])
