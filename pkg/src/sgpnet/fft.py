"""Mixed-radix complex FFT along the last axis, vectorised over leading axes.

Sizes are factored into primes and handled by recursive decimation in time.
Small prime factors use a direct DFT butterfly; prime lengths above
``BLUESTEIN_MIN_PRIME`` go through Bluestein's chirp-z reduction to a
power-of-two transform.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

BLUESTEIN_MIN_PRIME = 37


def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(p: int) -> np.ndarray:
    k = np.arange(p)
    return np.exp(-2j * np.pi * np.outer(k, k) / p)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int) -> np.ndarray:
    n = p * m
    return np.exp(-2j * np.pi * np.outer(np.arange(p), np.arange(m)) / n)


@lru_cache(maxsize=None)
def _bluestein_tables(n: int):
    size = 1
    while size < 2 * n - 1:
        size *= 2
    k = np.arange(n)
    chirp = np.exp(-1j * np.pi * (k * k % (2 * n)) / n)
    b = np.zeros(size, dtype=complex)
    b[:n] = np.conj(chirp)
    b[size - n + 1:] = np.conj(chirp[1:][::-1])
    return size, chirp, _fft(b)


def _bluestein(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    size, chirp, b_hat = _bluestein_tables(n)
    a = np.zeros(x.shape[:-1] + (size,), dtype=complex)
    a[..., :n] = x * chirp
    conv = _ifft_unscaled(_fft(a) * b_hat) / size
    return conv[..., :n] * chirp


def _fft(x: np.ndarray) -> np.ndarray:
    """Unnormalised forward DFT along the last axis."""
    n = x.shape[-1]
    if n == 1:
        return x.astype(complex, copy=True)
    p = _smallest_factor(n)
    if p == n:
        if n >= BLUESTEIN_MIN_PRIME:
            return _bluestein(x)
        return x @ _dft_matrix(n)
    m = n // p
    lead = x.shape[:-1]
    # sub[..., r, j] = x[..., j*p + r]
    sub = np.swapaxes(x.reshape(lead + (m, p)), -1, -2)
    y = _fft(sub) * _twiddles(p, m)
    # out[..., k2, k1] = sum_r W_p[r, k2] y[..., r, k1]
    out = _dft_matrix(p).T @ y
    return out.reshape(lead + (n,))


def _ifft_unscaled(x: np.ndarray) -> np.ndarray:
    return np.conj(_fft(np.conj(x)))


def fft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Unnormalised forward DFT along ``axis``."""
    x = np.moveaxis(np.asarray(x, dtype=complex), axis, -1)
    return np.moveaxis(_fft(x), -1, axis)


def ifft(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Inverse DFT along ``axis`` with the conventional 1/n factor."""
    x = np.moveaxis(np.asarray(x, dtype=complex), axis, -1)
    n = x.shape[-1]
    return np.moveaxis(_ifft_unscaled(x) / n, -1, axis)
