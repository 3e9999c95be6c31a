"""Spectral arc length smoothness of planned action chunks."""

from __future__ import annotations

import numpy as np


def speed_profile(action_chunk: np.ndarray) -> np.ndarray:
    """Euclidean norm of consecutive action differences, length H - 1."""
    a = np.asarray(action_chunk, dtype=np.float64)
    return np.linalg.norm(np.diff(a, axis=0), axis=1)


def sparc(
    signal: np.ndarray,
    fs: float = 1.0,
    pad_level: int = 2,
    f_cut: float = 10.0,
    amp_threshold: float = 0.05,
) -> float:
    """Positive spectral arc length of a speed profile.

    The magnitude spectrum is zero-padded to ``2**(ceil(log2(n)) + pad_level)``
    points, normalized by its maximum, cut at ``min(f_cut, fs / 2)`` and then
    trimmed to the span where it stays above ``amp_threshold``.  The classic
    smoothness metric is the negative of the value returned here, so larger
    means rougher.

    Args:
        signal: Speed samples, at least 2.
        fs: Sampling rate of ``signal``.
        pad_level: Extra doublings of the FFT length.
        f_cut: Upper frequency bound, clipped to Nyquist.
        amp_threshold: Relative magnitude defining the adaptive band.

    Returns:
        Arc length >= 0; exactly 0 for an all-zero signal.
    """
    v = np.asarray(signal, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ValueError("SPARC needs a 1-D signal with at least 2 samples")
    if not np.any(v):
        return 0.0
    nfft = int(2 ** (np.ceil(np.log2(v.size)) + pad_level))
    f = np.arange(nfft) * (fs / nfft)
    mag = np.abs(np.fft.fft(v, nfft))
    mag = mag / mag.max()
    keep = f <= min(f_cut, fs / 2.0)
    f_sel, m_sel = f[keep], mag[keep]
    above = np.nonzero(m_sel >= amp_threshold)[0]
    f_sel = f_sel[above[0] : above[-1] + 1]
    m_sel = m_sel[above[0] : above[-1] + 1]
    if f_sel.size < 2:
        return 0.0
    df = np.diff(f_sel) / (f_sel[-1] - f_sel[0])
    return float(np.sum(np.sqrt(df**2 + np.diff(m_sel) ** 2)))


def sparc_chunk(action_chunk: np.ndarray, **params) -> float:
    return sparc(speed_profile(action_chunk), **params)
