"""Gaussian-process model of performance over 0/1-encoded bit-width configs."""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solve_triangular
from scipy.stats import norm

from .pareto import merge_duplicates

log = logging.getLogger(__name__)

LENGTHSCALE_GRID = (0.5, 1.0, 2.0, 4.0)
NOISE_GRID = (1e-4, 1e-3, 1e-2)
JITTER = 1e-8


class SearchExhausted(RuntimeError):
    """Every candidate configuration has already been evaluated."""


def encode(config) -> np.ndarray:
    return np.array([0.0 if int(b) == 4 else 1.0 for b in config])


def rbf(X1: np.ndarray, X2: np.ndarray, lengthscale: float, signal: float) -> np.ndarray:
    sq = np.sum((X1[:, None, :] - X2[None, :, :]) ** 2, axis=-1)
    return signal**2 * np.exp(-sq / (2.0 * lengthscale**2))


@dataclass(frozen=True)
class GpState:
    X: np.ndarray
    y: np.ndarray
    configs: tuple
    mean: float
    scale: float
    lengthscale: float
    signal: float
    noise: float
    chol: np.ndarray
    alpha: np.ndarray
    jitter: float = 0.0

    @property
    def n(self) -> int:
        return len(self.y)

    def log_marginal_likelihood(self) -> float:
        return _lml(self.y, self.chol, self.alpha)

    def hyperparams(self) -> dict:
        return {
            "lengthscale": self.lengthscale,
            "signal": self.signal,
            "noise": self.noise,
            "jitter": self.jitter,
        }


def _lml(y, chol, alpha) -> float:
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(y) * np.log(2 * np.pi))


def _factor(K: np.ndarray):
    try:
        c, _ = cho_factor(K, lower=True)
        return np.tril(c), 0.0
    except LinAlgError:
        pass
    try:
        c, _ = cho_factor(K + JITTER * np.eye(len(K)), lower=True)
    except LinAlgError as exc:
        cond = np.linalg.cond(K)
        raise LinAlgError(f"kernel matrix not positive definite after jitter (cond={cond:.3e})") from exc
    log.debug("added jitter %.1e to kernel diagonal", JITTER)
    return np.tril(c), JITTER


def _build(X, y, configs, mean, scale, lengthscale, signal, noise) -> GpState:
    K = rbf(X, X, lengthscale, signal) + noise**2 * np.eye(len(X))
    chol, jitter = _factor(K)
    alpha = cho_solve((chol, True), y)
    return GpState(X, y, configs, mean, scale, lengthscale, signal, noise, chol, alpha, jitter)


def fit(
    records,
    lengthscale: float = 2.0,
    signal: float = 1.0,
    noise: float = 1e-3,
    refit: bool = False,
) -> GpState:
    """Condition an RBF GP on the observed P values (standardized).

    With ``refit`` the lengthscale and noise are chosen from a fixed grid by
    log marginal likelihood; the first grid point wins ties.
    """
    records = merge_duplicates(records)
    if not records:
        raise ValueError("need at least one record")
    records = sorted(records, key=lambda r: r.config)
    configs = tuple(r.config for r in records)
    X = np.stack([encode(c) for c in configs])
    P = np.array([r.P for r in records], dtype=np.float64)
    mean = float(P.mean())
    scale = float(P.std())
    if scale <= 0:
        scale = 1.0
    y = (P - mean) / scale
    if not refit:
        return _build(X, y, configs, mean, scale, lengthscale, signal, noise)
    best = None
    for ls, sn in itertools.product(LENGTHSCALE_GRID, NOISE_GRID):
        state = _build(X, y, configs, mean, scale, ls, signal, sn)
        score = state.log_marginal_likelihood()
        if best is None or score > best[0]:
            best = (score, state)
    return best[1]


def predict_many(state: GpState, configs) -> tuple[np.ndarray, np.ndarray]:
    Xs = np.stack([encode(c) for c in configs])
    Ks = rbf(Xs, state.X, state.lengthscale, state.signal)
    mu = Ks @ state.alpha
    v = solve_triangular(state.chol, Ks.T, lower=True)
    var = np.maximum(state.signal**2 - np.sum(v * v, axis=0), 0.0)
    return state.mean + state.scale * mu, state.scale * np.sqrt(var)


def predict(state: GpState, q) -> tuple[float, float]:
    """Posterior mean and standard deviation of P at ``q``."""
    mean, std = predict_many(state, [q])
    return float(mean[0]), float(std[0])


def expected_improvement(mu: np.ndarray, sigma: np.ndarray, best: float) -> np.ndarray:
    """EI for minimization of a Gaussian objective below ``best``."""
    gap = best - mu
    ei = np.maximum(gap, 0.0)
    pos = sigma > 0
    with np.errstate(over="ignore"):
        z = gap[pos] / sigma[pos]
        ei[pos] = gap[pos] * norm.cdf(z) + sigma[pos] * norm.pdf(z)
    return np.maximum(ei, 0.0)


def candidate_configs(L: int, rng=None, frontier_configs=(), n_samples: int = 4096):
    """All of {4,8}^L when L <= 16, else random samples plus frontier 1-bit flips."""
    if L <= 16:
        return [tuple(c) for c in itertools.product((4, 8), repeat=L)]
    rng = rng if rng is not None else np.random.default_rng(0)
    pool = set()
    for row in rng.integers(0, 2, size=(n_samples, L)):
        pool.add(tuple(4 if b == 0 else 8 for b in row))
    for c in frontier_configs:
        for i in range(L):
            flipped = list(c)
            flipped[i] = 12 - flipped[i]
            pool.add(tuple(flipped))
    return sorted(pool)


def suggest(state: GpState, candidates, lam: float, costmodel, observed=None, return_score: bool = False):
    """Next config by expected improvement of ``M_norm - lam * P_hat``.

    ``observed`` are the evaluated records; they set the incumbent and are
    filtered from ``candidates``.  Ties in EI go to the lower predicted
    objective, then the lexicographically smallest encoding.
    """
    if observed is None:
        seen = set(state.configs)
        incumbent = None
    else:
        observed = merge_duplicates(observed)
        seen = {r.config for r in observed}
        incumbent = min(costmodel.normalize(r.M) - lam * r.P for r in observed)
    pool = [tuple(int(b) for b in c) for c in candidates]
    pool = [c for c in pool if c not in seen]
    if not pool:
        raise SearchExhausted("all candidate configurations have been evaluated")
    mu_p, sd_p = predict_many(state, pool)
    m_norm = np.array([costmodel.m_norm(c) for c in pool])
    mu = m_norm - lam * mu_p
    sigma = lam * sd_p
    if incumbent is None:
        # posterior means at the training inputs stand in for observations
        train_mu, _ = predict_many(state, state.configs)
        train_m = np.array([costmodel.m_norm(c) for c in state.configs])
        incumbent = float(np.min(train_m - lam * train_mu))
    ei = expected_improvement(mu, sigma, incumbent)
    order = sorted(range(len(pool)), key=lambda i: (-ei[i], mu[i], encode(pool[i]).tolist()))
    best = order[0]
    if return_score:
        return pool[best], float(ei[best])
    return pool[best]


def perf_loss(state: GpState, records) -> float:
    """Mean absolute error of posterior means against held-out observations."""
    records = list(records)
    if not records:
        return 0.0
    mu, _ = predict_many(state, [r.config for r in records])
    return float(np.mean(np.abs(mu - np.array([r.P for r in records]))))
