"""Rejection ABC over precomputed datasets plus Gaussian-KDE density.

The acceptance threshold is the order statistic matching the configured
rate, so every observation accepts exactly ceil(rate * N) records. KDE
operates in the unit cube so one bandwidth is meaningful across the
heterogeneous physical units.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .flow import PosteriorSampleSet
from .signal import InPlaneSignal

__all__ = ["AbcConfig", "abc_posterior", "kde_log_prob", "kde_map"]


@dataclass(frozen=True)
class AbcConfig:
    acceptance_rate: float = 0.002
    kde_bandwidth: float = 0.2

    def __post_init__(self) -> None:
        if not 0.0 < self.acceptance_rate < 1.0:
            raise ValueError("acceptance_rate must lie in (0, 1)")
        if self.kde_bandwidth <= 0.0:
            raise ValueError("kde_bandwidth must be > 0")


def _signal_values(observed) -> np.ndarray:
    if isinstance(observed, InPlaneSignal):
        return observed.values
    return np.asarray(observed, dtype=np.float64)


def abc_posterior(observed, signals: np.ndarray, params_unit: np.ndarray,
                  config: AbcConfig) -> PosteriorSampleSet:
    """Accept the ceil(rate*N) nearest records by Euclidean signal distance.

    Ties at the threshold break by ascending dataset index. The accepted
    parameter vectors (unit cube) carry the Gaussian-KDE log density of the
    accepted set evaluated at themselves.
    """
    obs = _signal_values(observed)
    sig = np.asarray(signals, dtype=np.float64)
    par = np.asarray(params_unit, dtype=np.float64)
    if sig.ndim != 2 or sig.shape[0] < 1:
        raise ValueError("dataset must contain at least one signal")
    if sig.shape[1] != obs.size:
        raise ValueError(f"dataset signal length {sig.shape[1]} != "
                         f"observed {obs.size}")
    if par.shape[0] != sig.shape[0]:
        raise ValueError("signals and parameters record counts differ")

    distances = np.linalg.norm(sig - obs[None, :], axis=1)
    k = math.ceil(config.acceptance_rate * sig.shape[0])
    order = np.argsort(distances, kind="stable")  # ties resolve by index
    accepted = np.sort(order[:k])
    samples = par[accepted]
    log_probs = kde_log_prob(samples, config.kde_bandwidth, samples)
    return PosteriorSampleSet(samples=samples, log_probs=np.atleast_1d(log_probs))


def kde_log_prob(samples: np.ndarray, bandwidth: float, query: np.ndarray):
    """Log density of an isotropic Gaussian KDE, stabilized via log-sum-exp.

    `query` may be a single point (d,) or a batch (m, d); returns a float or
    an (m,) array accordingly.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] < 1:
        raise ValueError("samples must be a non-empty (n, d) array")
    if bandwidth <= 0:
        raise ValueError("bandwidth must be > 0")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    if single:
        q = q[None, :]
    if q.shape[1] != s.shape[1]:
        raise ValueError("query dimension mismatch")
    n, d = s.shape
    sq = ((q[:, None, :] - s[None, :, :]) ** 2).sum(axis=2)  # (m, n)
    log_kernel = -0.5 * sq / bandwidth ** 2 \
        - d * (0.5 * math.log(2.0 * math.pi) + math.log(bandwidth))
    out = logsumexp(log_kernel, axis=1) - math.log(n)
    return float(out[0]) if single else out


def kde_map(samples: np.ndarray, bandwidth: float) -> np.ndarray:
    """The sample with the highest KDE log density (ties: lowest index)."""
    s = np.asarray(samples, dtype=np.float64)
    dens = kde_log_prob(s, bandwidth, s)
    return s[int(np.argmax(np.atleast_1d(dens)))].copy()
