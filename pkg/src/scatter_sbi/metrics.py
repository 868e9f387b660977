"""Comparison metrics, calibration and the amortization benchmark."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.signal import find_peaks
from scipy.special import logsumexp

from . import flow as flow_mod
from . import rejection
from .flow import FlowModel, PosteriorSampleSet
from .signal import map_params_unit

__all__ = [
    "test_log_prob",
    "flow_log_prob_estimator",
    "abc_log_prob_estimator",
    "normalized_mae",
    "wasserstein_marginals",
    "sbc_calibration",
    "SbcResult",
    "benchmark_speedup",
    "flow_map_estimate",
    "column_profile",
    "top_peak_rows",
    "peaks_aligned",
    "write_report",
]


def test_log_prob(estimator, items) -> float:
    """Mean log density the estimator assigns to the true parameters.

    `estimator` is a callable (y_unit, zeta, image=None) -> nats; `items`
    iterates over (y_unit, zeta) or (y_unit, zeta, image) tuples.
    """
    total = 0.0
    count = 0
    for item in items:
        y, zeta, image = item if len(item) == 3 else (*item, None)
        total += float(estimator(y, zeta, image))
        count += 1
    if count == 0:
        raise ValueError("empty test set")
    return total / count


def flow_log_prob_estimator(model: FlowModel, rng: np.random.Generator,
                            n_z: int = 1, cvae=None):
    """Estimator handle for a trained flow.

    The latent comes from the CVAE encoder when an image is supplied (and a
    CVAE is given), otherwise from the standard-normal prior; with n_z > 1
    the density is a log-mean-exp over latent draws.
    """
    import torch

    from . import cvae as cvae_mod

    def estimate(y, zeta, image=None) -> float:
        zdim = model.config.latent_dim
        if zdim == 0:
            lp = flow_mod.maf_log_prob(model, y, zeta, None)
            return float(lp)
        if image is not None and cvae is not None:
            mu, lv = cvae_mod.encode(cvae, image, zeta)
            mu = mu.numpy().astype(np.float64)
            sd = np.exp(0.5 * lv.numpy().astype(np.float64))
            z = mu + sd * rng.standard_normal((n_z, zdim))
        else:
            z = rng.standard_normal((n_z, zdim))
        yb = np.broadcast_to(np.asarray(y, dtype=np.float64), (n_z, model.config.dim))
        lp = flow_mod.maf_log_prob(model, yb.copy(), zeta, z)
        lp = lp.detach().cpu().numpy().astype(np.float64)
        return float(logsumexp(lp) - math.log(n_z))

    return estimate


def abc_log_prob_estimator(signals: np.ndarray, params_unit: np.ndarray,
                           config: rejection.AbcConfig,
                           bandwidths=None):
    """Estimator handle for the ABC+KDE baseline over a fixed dataset.

    With a bandwidth list the result is the mean of the per-bandwidth log
    densities.
    """
    bws = list(bandwidths) if bandwidths is not None else [config.kde_bandwidth]

    def estimate(y, zeta, image=None) -> float:
        accepted = rejection.abc_posterior(zeta, signals, params_unit, config)
        vals = [rejection.kde_log_prob(accepted.samples, bw, np.asarray(y))
                for bw in bws]
        return float(np.mean(vals))

    return estimate


def normalized_mae(y_hat, y_ref, ranges) -> float:
    """Mean over dimensions of |y_hat - y_ref| / (hi - lo)."""
    r = np.asarray(ranges, dtype=np.float64)
    if r.ndim != 2 or r.shape[1] != 2:
        raise ValueError("ranges must be (d, 2)")
    widths = r[:, 1] - r[:, 0]
    if np.any(widths <= 0):
        raise ValueError("each range needs lo < hi")
    a = np.asarray(y_hat, dtype=np.float64)
    b = np.asarray(y_ref, dtype=np.float64)
    if a.shape != b.shape or a.shape[-1] != r.shape[0]:
        raise ValueError("shape mismatch between estimates, references, ranges")
    return float(np.mean(np.abs(a - b) / widths))


def _w1_quantile(x: np.ndarray, y: np.ndarray) -> float:
    """W1 between two empirical 1D distributions via piecewise-constant
    quantile functions integrated over the shared probability grid."""
    xs = np.sort(x)
    ys = np.sort(y)
    n, m = xs.size, ys.size
    if n == m:
        return float(np.mean(np.abs(xs - ys)))
    edges = np.union1d(np.arange(1, n) / n, np.arange(1, m) / m)
    edges = np.concatenate([[0.0], edges, [1.0]])
    widths = np.diff(edges)
    mid = (edges[:-1] + edges[1:]) / 2.0
    ix = np.minimum((mid * n).astype(int), n - 1)
    iy = np.minimum((mid * m).astype(int), m - 1)
    return float(np.sum(np.abs(xs[ix] - ys[iy]) * widths))


def wasserstein_marginals(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """Mean over dimensions of the 1D W1 distance between the marginals."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample sets have different dimension")
    return float(np.mean([_w1_quantile(a[:, j], b[:, j])
                          for j in range(a.shape[1])]))


@dataclass(frozen=True)
class SbcResult:
    ranks: np.ndarray  # (n_trials, d)
    n_posterior_draws: int
    p_values: np.ndarray  # (d,)


def sbc_calibration(model: FlowModel, prior_spec, forward_fn, n_trials: int,
                    n_posterior_draws: int, rng: np.random.Generator) -> SbcResult:
    """Rank-statistic self-consistency check of the posterior estimator.

    Per trial: draw truth from the prior, simulate its signal with
    `forward_fn(theta) -> zeta values`, sample the posterior, and record the
    rank of the truth among the draws per dimension. Under calibration the
    ranks are uniform; p_values holds a per-dimension KS uniformity test.
    """
    if n_trials < 100:
        raise ValueError("need n_trials >= 100 for a meaningful check")
    if not getattr(model, "trained", False):
        raise ValueError("refusing SBC on an untrained model")
    ranges = prior_spec.ranges()
    d = model.config.dim
    ranks = np.empty((n_trials, d), dtype=np.int64)
    for trial in range(n_trials):
        theta = prior_spec.sample(rng)
        y_unit = map_params_unit(theta, ranges, "to-unit")
        zeta = forward_fn(theta)
        z = (rng.standard_normal((n_posterior_draws, model.config.latent_dim))
             if model.config.latent_dim > 0 else None)
        draws = flow_mod.maf_sample(model, zeta, z, n_posterior_draws, rng)
        ranks[trial] = (draws.samples < y_unit[None, :]).sum(axis=0)
    u = (ranks + 0.5) / (n_posterior_draws + 1.0)
    p_values = np.array([stats.kstest(u[:, j], "uniform").pvalue
                         for j in range(d)])
    return SbcResult(ranks=ranks, n_posterior_draws=n_posterior_draws,
                     p_values=p_values)


def flow_map_estimate(model: FlowModel, zeta, rng: np.random.Generator,
                      n_draws: int = 10_000) -> np.ndarray:
    """Best-of-n posterior draw by carried log density (unit cube)."""
    z = (rng.standard_normal((n_draws, model.config.latent_dim))
         if model.config.latent_dim > 0 else None)
    draws = flow_mod.maf_sample(model, zeta, z, n_draws, rng)
    return draws.samples[int(np.argmax(draws.log_probs))].copy()


def benchmark_speedup(model: FlowModel, abc_config: rejection.AbcConfig,
                      signals: np.ndarray, params_unit: np.ndarray,
                      simulate_signal, observation, rng: np.random.Generator,
                      n_draws: int = 10_000, n_simulations: int = 10_000,
                      repetitions: int = 3) -> dict:
    """Wall-clock comparison of amortized flow inference against ABC.

    Times three pipelines on one fresh observation: flow sampling with
    carried log densities (median of `repetitions`), ABC reusing the given
    precomputed dataset (median of `repetitions`), and cold-start ABC that
    first simulates `n_simulations` signals with `simulate_signal(index)`
    (run once). Everything runs in this thread.
    """
    obs = np.asarray(observation, dtype=np.float64)

    flow_times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        z = (rng.standard_normal((n_draws, model.config.latent_dim))
             if model.config.latent_dim > 0 else None)
        flow_mod.maf_sample(model, obs, z, n_draws, rng)
        flow_times.append(time.perf_counter() - t0)

    reuse_times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        rejection.abc_posterior(obs, signals, params_unit, abc_config)
        reuse_times.append(time.perf_counter() - t0)

    if len(params_unit) < n_simulations:
        raise ValueError("need parameters for every cold-start simulation")
    t0 = time.perf_counter()
    fresh = np.stack([simulate_signal(i) for i in range(n_simulations)])
    rejection.abc_posterior(obs, fresh, params_unit[:n_simulations], abc_config)
    cold_time = time.perf_counter() - t0

    flow_s = float(np.median(flow_times))
    reuse_s = float(np.median(reuse_times))
    return {
        "timings": {
            "flow_inference_s": flow_s,
            "abc_reuse_s": reuse_s,
            "abc_cold_start_s": float(cold_time),
        },
        "ratios": {
            "cold_start_over_flow": float(cold_time / flow_s),
            "reuse_over_flow": float(reuse_s / flow_s),
        },
        "n_draws": n_draws,
        "n_simulations": n_simulations,
        "repetitions": repetitions,
    }


def column_profile(image) -> np.ndarray:
    """Column-averaged log-intensity profile over detector rows."""
    arr = np.asarray(image, dtype=np.float64)
    return np.log10(1.0 + arr).mean(axis=1)


def top_peak_rows(profile: np.ndarray, n_peaks: int = 2,
                  min_separation: int = 3) -> np.ndarray:
    """Rows of the n highest local maxima, at least min_separation apart."""
    peaks, props = find_peaks(profile, distance=min_separation)
    if peaks.size == 0:
        return np.array([], dtype=int)
    order = np.argsort(profile[peaks])[::-1]
    return np.sort(peaks[order[:n_peaks]])


def peaks_aligned(truth_image, recon_image, tol_rows: int = 2,
                  n_peaks: int = 2) -> bool:
    """True when each top peak of the truth profile has a reconstructed peak
    within tol_rows."""
    pt = top_peak_rows(column_profile(truth_image), n_peaks)
    pr = top_peak_rows(column_profile(recon_image), n_peaks)
    if pt.size == 0 or pr.size < pt.size:
        return False
    return all(np.min(np.abs(pr - row)) <= tol_rows for row in pt)


def write_report(path, report: dict) -> None:
    """Emit a metric report as JSON, plus a flat CSV next to it."""
    path = str(path)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    flat = {}

    def _flatten(prefix, obj):
        if isinstance(obj, dict):
            for key, val in obj.items():
                _flatten(f"{prefix}{key}." if isinstance(val, dict) else
                         f"{prefix}{key}", val)
        elif isinstance(obj, (int, float, str, bool)):
            flat[prefix] = obj

    _flatten("", report)
    csv_path = path[:-5] + ".csv" if path.endswith(".json") else path + ".csv"
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(flat.keys()) + "\n")
        fh.write(",".join(str(v) for v in flat.values()) + "\n")
