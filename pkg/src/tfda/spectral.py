"""Real FFT front-end for the frequency branch.

Radix-2 Cooley-Tukey handles power-of-two lengths; every other length goes
through Bluestein's chirp-z identity, which re-expresses the DFT as a
power-of-two circular convolution.  All transforms work on the last axis and
are vectorised over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np


@lru_cache(maxsize=64)
def _bit_reverse(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _fft_pow2(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    n = x.shape[-1]
    a = x[..., _bit_reverse(n)].astype(np.complex128)
    sign = 1.0 if inverse else -1.0
    half = 1
    while half < n:
        tw = np.exp(sign * 1j * np.pi * np.arange(half) / half)
        a = a.reshape(*x.shape[:-1], n // (2 * half), 2, half)
        even = a[..., 0, :]
        odd = a[..., 1, :] * tw
        a = np.concatenate([even + odd, even - odd], axis=-1)
        half *= 2
    return a.reshape(x.shape)


@lru_cache(maxsize=64)
def _chirp(n: int, inverse: bool):
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    # k^2 mod 2n keeps the phase argument small for large n
    w = np.exp(sign * 1j * np.pi * ((k * k) % (2 * n)) / n)
    m = 1 << (2 * n - 1).bit_length()
    b = np.zeros(m, dtype=np.complex128)
    b[:n] = np.conj(w)
    if n > 1:
        b[m - n + 1:] = np.conj(w[1:])[::-1]
    return w, _fft_pow2(b), m


def _fft_bluestein(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    n = x.shape[-1]
    w, fb, m = _chirp(n, inverse)
    a = np.zeros(x.shape[:-1] + (m,), dtype=np.complex128)
    a[..., :n] = x * w
    conv = _fft_pow2(_fft_pow2(a) * fb, inverse=True) / m
    return conv[..., :n] * w


def fft(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Unnormalised complex DFT along the last axis (inverse uses e^{+i})."""
    x = np.asarray(x)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("fft needs at least one sample")
    if n & (n - 1) == 0:
        return _fft_pow2(x, inverse)
    return _fft_bluestein(x, inverse)


def rfft(signal: np.ndarray) -> np.ndarray:
    """Half spectrum (``S // 2 + 1`` bins) of a real signal."""
    signal = np.asarray(signal, dtype=np.float64)
    S = signal.shape[-1]
    out = fft(signal)[..., : S // 2 + 1]
    # DC and Nyquist bins of a real input are real by symmetry
    out[..., 0] = out[..., 0].real
    if S % 2 == 0:
        out[..., -1] = out[..., -1].real
    return out


def irfft(spectrum: np.ndarray, S: int) -> np.ndarray:
    """Inverse of :func:`rfft` for a length-``S`` signal."""
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    if spectrum.shape[-1] != S // 2 + 1:
        raise ValueError(f"spectrum has {spectrum.shape[-1]} bins, expected {S // 2 + 1} for S={S}")
    full = np.empty(spectrum.shape[:-1] + (S,), dtype=np.complex128)
    full[..., : S // 2 + 1] = spectrum
    tail = spectrum[..., 1: (S + 1) // 2]
    full[..., S // 2 + 1:] = np.conj(tail[..., ::-1])
    return (fft(full, inverse=True).real / S)


@dataclass
class Spectrum:
    magnitudes: np.ndarray  # (..., S // 2 + 1), non-negative
    original_length: int
    phases: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.magnitudes.shape[-1] != self.original_length // 2 + 1:
            raise ValueError("magnitude length does not match original_length // 2 + 1")


def spectrum_of(signal: np.ndarray, keep_phase: bool = False) -> Spectrum:
    X = rfft(signal)
    return Spectrum(np.abs(X), np.asarray(signal).shape[-1], np.angle(X) if keep_phase else None)


def magnitude_input(x: np.ndarray) -> np.ndarray:
    """Frequency-branch input: per-channel magnitude half spectrum."""
    return np.abs(rfft(x))


def freq_augment(spec: Spectrum, mode: str, count: int, amplitude_scale: float = 0.1,
                 seed: int = 0) -> Spectrum:
    """Remove or add ``count`` frequency components per channel.

    ``remove`` zeroes uniformly chosen bins.  ``add`` sets uniformly chosen
    zero-magnitude bins to ``amplitude_scale`` times the channel's current
    peak magnitude.  Requests beyond the available bins are clamped.
    """
    if mode not in ("add", "remove"):
        raise ValueError(f"unknown freq_augment mode {mode!r}")
    mags = np.array(spec.magnitudes, dtype=np.float64, copy=True)
    if count <= 0:
        return Spectrum(mags, spec.original_length, None if spec.phases is None else spec.phases.copy())
    rng = np.random.default_rng(seed)
    flat = mags.reshape(-1, mags.shape[-1])
    for row in flat:
        if mode == "remove":
            pick = rng.choice(row.size, size=min(count, row.size), replace=False)
            row[pick] = 0.0
        else:
            free = np.flatnonzero(row == 0.0)
            if free.size == 0:
                continue
            peak = row.max()
            pick = rng.choice(free, size=min(count, free.size), replace=False)
            row[pick] = amplitude_scale * peak
    return Spectrum(mags, spec.original_length, None if spec.phases is None else spec.phases.copy())
