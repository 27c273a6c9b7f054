"""Short-Time Objective Intelligibility (classic, non-extended variant)."""

from __future__ import annotations

import warnings
from math import gcd

import numpy as np
from scipy.signal import resample_poly

FS = 10000
N_FRAME = 256
NFFT = 512
NUM_BANDS = 15
MIN_FREQ = 150
SEG_FRAMES = 30  # 384 ms
BETA_DB = -15.0
DYN_RANGE_DB = 40.0
_EPS = np.finfo(np.float64).eps


def _window(n: int) -> np.ndarray:
    return np.hanning(n + 2)[1:-1]


def third_octave_bands(fs: int = FS, nfft: int = NFFT, num_bands: int = NUM_BANDS, min_freq: float = MIN_FREQ) -> np.ndarray:
    """``[num_bands, nfft/2 + 1]`` 0/1 matrix grouping FFT bins into one-third octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands)
    cf = 2.0 ** (k / 3.0) * min_freq
    lo = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    hi = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, len(f)))
    for i in range(len(cf)):
        lo_bin = np.argmin((f - lo[i]) ** 2)
        hi_bin = np.argmin((f - hi[i]) ** 2)
        obm[i, lo_bin:hi_bin] = 1.0
    return obm


def _frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    count = (len(x) - n) // hop + 1
    idx = np.arange(n)[None, :] + hop * np.arange(max(count, 0))[:, None]
    return x[idx] * _window(n)


def _overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    count, n = frames.shape
    out = np.zeros((count - 1) * hop + n)
    for i in range(count):
        out[i * hop : i * hop + n] += frames[i]
    return out


def remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float = DYN_RANGE_DB, n: int = N_FRAME, hop: int = N_FRAME // 2):
    """Drop frames more than ``dyn_range`` dB below the loudest frame of ``x`` (from both signals)."""
    fx, fy = _frames(x, n, hop), _frames(y, n, hop)
    energy = 20 * np.log10(np.linalg.norm(fx, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    return _overlap_add(fx[keep], hop), _overlap_add(fy[keep], hop)


def _stft_mag(x: np.ndarray) -> np.ndarray:
    frames = _frames(x, N_FRAME, N_FRAME // 2)
    return np.abs(np.fft.rfft(frames, n=NFFT, axis=1)).T  # [bins, frames]


def stoi(est, ref, sample_rate: int) -> float:
    """Intelligibility of ``est`` with respect to clean ``ref``, roughly in [0, 1].

    Inputs shorter than 384 ms raise ``ValueError``. If silent-frame removal
    leaves fewer than 384 ms, a warning is issued and ``1e-5`` is returned.
    """
    x = np.asarray(ref, dtype=np.float64).ravel()
    y = np.asarray(est, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError(f"stoi: lengths differ ({x.size} vs {y.size})")
    if len(x) < 0.384 * sample_rate:
        raise ValueError("stoi needs at least 384 ms of signal")
    if sample_rate != FS:
        g = gcd(FS, sample_rate)
        x = resample_poly(x, FS // g, sample_rate // g)
        y = resample_poly(y, FS // g, sample_rate // g)
    x, y = remove_silent_frames(x, y)
    obm = third_octave_bands()
    x_tob = np.sqrt(obm @ _stft_mag(x) ** 2)
    y_tob = np.sqrt(obm @ _stft_mag(y) ** 2)
    n_frames = x_tob.shape[1]
    if n_frames < SEG_FRAMES:
        # same convention as the reference implementation: too little speech scores as unintelligible
        warnings.warn("stoi: fewer than 384 ms of non-silent signal; returning 1e-5", RuntimeWarning, stacklevel=2)
        return 1e-5
    clip = 10 ** (-BETA_DB / 20)
    scores = []
    for m in range(SEG_FRAMES, n_frames + 1):
        xs = x_tob[:, m - SEG_FRAMES : m]
        ys = y_tob[:, m - SEG_FRAMES : m]
        scale = np.linalg.norm(xs, axis=1, keepdims=True) / (np.linalg.norm(ys, axis=1, keepdims=True) + _EPS)
        yp = np.minimum(ys * scale, xs * (1 + clip))
        xc = xs - xs.mean(axis=1, keepdims=True)
        yc = yp - yp.mean(axis=1, keepdims=True)
        num = np.sum(xc * yc, axis=1)
        den = np.linalg.norm(xc, axis=1) * np.linalg.norm(yc, axis=1) + _EPS
        scores.append(np.mean(num / den))
    return float(np.mean(scores))
