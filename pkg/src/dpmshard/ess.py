"""Effective sample size by Geyer's initial monotone positive sequence."""
from __future__ import annotations

import numpy as np

from .errors import UsageError

MIN_TRACE = 10


def autocorrelation(x: np.ndarray) -> np.ndarray:
    """Normalized autocorrelation at lags ``0..M-1`` via zero-padded FFT."""
    x = np.asarray(x, dtype=float)
    m = len(x)
    y = x - x.mean()
    n_fft = 1 << (2 * m - 1).bit_length()
    f = np.fft.rfft(y, n_fft)
    acov = np.fft.irfft(f * np.conj(f), n_fft)[:m] / m
    return acov / acov[0]


def ess(trace) -> float:
    """Effective sample size of a scalar trace.

    Pairs of autocorrelations ``rho[2t] + rho[2t+1]`` are summed while
    positive and forced to be non-increasing. A constant trace returns its
    length.
    """
    x = np.asarray(trace, dtype=float)
    if x.ndim != 1 or len(x) < MIN_TRACE:
        raise UsageError(f"ess needs a 1-d trace of length >= {MIN_TRACE}")
    m = len(x)
    if np.ptp(x) == 0 or np.var(x) <= 1e-300 * max(1.0, np.mean(x * x)):
        return float(m)
    rho = autocorrelation(x)
    n_pairs = m // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    tau = -1.0
    prev = np.inf
    for g in pairs:
        if g <= 0:
            break
        g = min(g, prev)
        tau += 2.0 * g
        prev = g
    return float(m / tau)
