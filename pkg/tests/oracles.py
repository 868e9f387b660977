"""Independent reference implementations used only by the test suite.

Each oracle derives its answer by a different route than the library code:
transfer matrices instead of the Parratt recursion, quadrature instead of
closed forms, linear-programming transport instead of quantile integration,
plain double loops instead of vectorized log-sum-exp.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad
from scipy.optimize import linprog


def transfer_matrix_amplitudes(sample, angle: float, wavelength: float):
    """Per-medium (T, R) via an explicit 2x2 matrix field solution.

    Uses the same interface damping (Nevot-Croce on reflection, the matching
    Croce factor on transmission) and the same reference/normalization
    conventions as the library, but solves for the fields by propagating the
    substrate solution upward through refraction/translation matrices.
    """
    layers = sample.layers
    delta = np.array([0.0] + [ly.dispersion for ly in layers]
                     + [sample.substrate.dispersion])
    beta = np.array([0.0] + [ly.absorption for ly in layers]
                    + [sample.substrate.absorption])
    thick = np.array([0.0] + [ly.thickness for ly in layers] + [0.0])
    sigma = np.array([ly.roughness for ly in layers] + [sample.substrate.roughness])

    k = 2.0 * math.pi / wavelength
    kz = k * np.sqrt(math.sin(angle) ** 2 - 2.0 * delta + 2.0j * beta)
    n_media = delta.size

    amps = [None] * n_media
    amps[-1] = (1.0 + 0.0j, 0.0 + 0.0j)  # substrate: no upward wave
    for i in range(n_media - 2, -1, -1):
        ka, kb = kz[i], kz[i + 1]
        s2h = sigma[i] ** 2 / 2.0
        p = (ka + kb) / (2.0 * ka) * np.exp(-((ka - kb) ** 2) * s2h)
        m = (ka - kb) / (2.0 * ka) * np.exp(-((ka + kb) ** 2) * s2h)
        tb, rb = amps[i + 1]
        t_at = p * tb + m * rb  # in medium i, at its bottom interface
        r_at = m * tb + p * rb
        amps[i] = (t_at * np.exp(-1.0j * kz[i] * thick[i]),
                   r_at * np.exp(1.0j * kz[i] * thick[i]))

    scale = 1.0 / amps[0][0]
    depth = np.concatenate([[0.0], np.cumsum(thick[:-1])])
    T = np.array([a[0] * scale for a in amps]) * np.exp(-1.0j * kz[0] * depth)
    R = np.array([a[1] * scale for a in amps]) * np.exp(-1.0j * kz[0] * depth)
    return T, R


def psd_variance_quadrature(psd, sigma: float, xi: float, hurst: float) -> float:
    """(1/2pi) * integral_0^inf PSD(q) q dq evaluated by adaptive quadrature."""
    val, _ = quad(lambda q: psd(q, sigma, xi, hurst) * q, 0.0, np.inf,
                  limit=400)
    return val / (2.0 * math.pi)


def w1_linear_program(x: np.ndarray, y: np.ndarray) -> float:
    """1D optimal transport cost between empirical measures via an LP."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = x.size, y.size
    cost = np.abs(x[:, None] - y[None, :]).ravel()
    a_eq = []
    b_eq = []
    for i in range(n):
        row = np.zeros(n * m)
        row[i * m:(i + 1) * m] = 1.0
        a_eq.append(row)
        b_eq.append(1.0 / n)
    for j in range(m):
        row = np.zeros(n * m)
        row[j::m] = 1.0
        a_eq.append(row)
        b_eq.append(1.0 / m)
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=np.array(b_eq),
                  bounds=(0, None), method="highs")
    assert res.status == 0, res.message
    return float(res.fun)


def kde_direct_sum(samples: np.ndarray, bandwidth: float,
                   query: np.ndarray) -> float:
    """Gaussian KDE log density by a plain double loop."""
    samples = np.asarray(samples, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    n, d = samples.shape
    norm = (2.0 * math.pi * bandwidth ** 2) ** (d / 2.0)
    total = 0.0
    for i in range(n):
        sq = 0.0
        for j in range(d):
            sq += (query[j] - samples[i, j]) ** 2
        total += math.exp(-0.5 * sq / bandwidth ** 2) / norm
    return math.log(total / n)
