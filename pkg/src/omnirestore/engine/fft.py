"""Radix-2 fast Fourier transforms for spectral features and diagnostics.

Implemented as an iterative Cooley-Tukey butterfly over complex128 arrays.
Lengths must be powers of two; callers holding other sizes should pad or
crop first, and the error message says so. The forward transform is
unnormalized (plain DFT sum); the inverse divides by N and reuses the
forward path through conjugation.

The 2-D transforms expose their results as a :class:`ComplexPair` of real
and imaginary arrays. These transforms feed feature extraction and
band-energy measurements; nothing differentiates through them, so they stay
outside the grad tape.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..errors import ShapeError


class ComplexPair(NamedTuple):
    """Split complex array: two real arrays of identical shape."""

    real: np.ndarray
    imag: np.ndarray

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.real, self.imag)


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    perm = np.zeros(n, dtype=np.intp)
    for i in range(n):
        r = 0
        v = i
        for _ in range(bits):
            r = (r << 1) | (v & 1)
            v >>= 1
        perm[i] = r
    return perm


def fft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalized DFT along one axis; length must be a power of two."""
    x = np.asarray(x)
    n = x.shape[axis]
    if not _is_pow2(n):
        hint = 1 << n.bit_length()
        raise ShapeError(
            f"fft length {n} is not a power of two; pad the axis to {hint} first")
    data = np.moveaxis(np.asarray(x, dtype=np.complex128), axis, -1).copy()
    data = data[..., _bit_reverse_permutation(n)]

    size = 2
    while size <= n:
        half = size // 2
        tw = np.exp(-2j * np.pi * np.arange(half) / size)
        blocks = data.reshape(*data.shape[:-1], n // size, size)
        even = blocks[..., :half].copy()
        odd = blocks[..., half:] * tw
        blocks[..., :half] = even + odd
        blocks[..., half:] = even - odd
        size *= 2
    return np.moveaxis(data, -1, axis)


def ifft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Inverse of :func:`fft` including the 1/N factor."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[axis]
    return np.conj(fft(np.conj(x), axis=axis)) / n


def fft2(x: np.ndarray) -> ComplexPair:
    """2-D transform over the trailing two axes, returned as a split pair."""
    spec = fft(fft(np.asarray(x), axis=-1), axis=-2)
    return ComplexPair(np.ascontiguousarray(spec.real), np.ascontiguousarray(spec.imag))


def ifft2(spectrum) -> ComplexPair:
    """Inverse 2-D transform; accepts a ComplexPair or a complex array."""
    z = spectrum.to_complex() if isinstance(spectrum, ComplexPair) else np.asarray(spectrum)
    out = ifft(ifft(z, axis=-1), axis=-2)
    return ComplexPair(np.ascontiguousarray(out.real), np.ascontiguousarray(out.imag))


def log_magnitude(x: np.ndarray) -> np.ndarray:
    """log(1 + |FFT2(x)|), the compressed spectrum used as a frequency view."""
    return np.log1p(fft2(x).magnitude())


def band_energy(x: np.ndarray, r_lo: float, r_hi: float) -> float:
    """Total squared spectrum magnitude in a normalized radial frequency band.

    Frequencies are mapped to [-0.5, 0.5) per axis; a coefficient belongs to
    the band when its radial frequency r satisfies r_lo <= r < r_hi.
    """
    x = np.asarray(x)
    h, w = x.shape[-2], x.shape[-1]
    mag = fft2(x).magnitude()
    fy = _freq_grid(h)[:, None]
    fx = _freq_grid(w)[None, :]
    r = np.sqrt(fy * fy + fx * fx)
    mask = (r >= r_lo) & (r < r_hi)
    return float((mag * mag * mask).sum())


def _freq_grid(n: int) -> np.ndarray:
    """Normalized DFT bin frequencies: 0, 1/n, ... then the negative half."""
    k = np.arange(n)
    return np.where(k < (n + 1) // 2, k, k - n) / n
