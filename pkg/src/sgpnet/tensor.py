"""Dense real64 tensor helpers shared by every other module.

Feature maps are plain ``numpy.ndarray`` objects of shape ``[B, C, h, w]``.
Half spectra are complex arrays of shape ``[..., h, w // 2 + 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import fft as _fft


class ShapeError(ValueError):
    """Raised when array shapes are inconsistent with an operation."""


def as_feature(x, ndim: int = 4) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != ndim:
        raise ShapeError(f"expected rank-{ndim} array, got shape {x.shape}")
    if 0 in x.shape:
        raise ShapeError(f"zero-sized dimension in shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Fourier transforms
# ---------------------------------------------------------------------------

def rfft2(x: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D real FFT over the last two axes.

    Returns the non-redundant half spectrum of shape ``[..., h, w//2 + 1]``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 2 or x.shape[-1] == 0 or x.shape[-2] == 0:
        raise ShapeError(f"rfft2 needs non-empty spatial dims, got {x.shape}")
    h, w = x.shape[-2:]
    spec = _fft.fft(_fft.fft(x, axis=-1)[..., : w // 2 + 1], axis=-2)
    return spec / math.sqrt(h * w)


def irfft2(spec: np.ndarray, w: int) -> np.ndarray:
    """Inverse of :func:`rfft2` for an output of width ``w``."""
    spec = np.asarray(spec, dtype=complex)
    if spec.ndim < 2:
        raise ShapeError(f"irfft2 needs at least 2 dims, got {spec.shape}")
    if w < 1 or spec.shape[-1] != w // 2 + 1:
        raise ShapeError(
            f"half-spectrum width {spec.shape[-1]} inconsistent with w={w}")
    h = spec.shape[-2]
    wr = spec.shape[-1]
    full = np.empty(spec.shape[:-1] + (w,), dtype=complex)
    full[..., :wr] = spec
    if w > wr:
        # X(u, v) = conj(X(-u, -v)) for the mirrored columns
        v = np.arange(wr, w)
        u_neg = (-np.arange(h)) % h
        mirrored = spec[..., u_neg, :][..., w - v]
        full[..., wr:] = np.conj(mirrored)
    out = _fft.ifft(_fft.ifft(full, axis=-2), axis=-1)
    return out.real * math.sqrt(h * w)


def half_spectrum_weights(w: int) -> np.ndarray:
    """Multiplicity of each half-spectrum column in the full spectrum."""
    wr = w // 2 + 1
    c = np.full(wr, 2.0)
    c[0] = 1.0
    if w % 2 == 0:
        c[-1] = 1.0
    return c


def spectral_energy(spec: np.ndarray, w: int) -> float:
    """Energy of a half spectrum counting conjugate duplicates."""
    return float(np.sum(np.abs(spec) ** 2 * half_spectrum_weights(w)))


@dataclass(frozen=True)
class FreqGrid:
    nu_y: np.ndarray
    nu_x: np.ndarray
    rho: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.rho.shape


@lru_cache(maxsize=64)
def _freq_grid_cached(h: int, w: int) -> FreqGrid:
    k = np.arange(h)
    nu_y = np.where(k < (h + 1) // 2, k, k - h) / h
    nu_x = np.arange(w // 2 + 1) / w
    rho = np.sqrt(nu_y[:, None] ** 2 + nu_x[None, :] ** 2)
    for a in (nu_y, nu_x, rho):
        a.setflags(write=False)
    return FreqGrid(nu_y, nu_x, rho)


def freq_grid(h: int, w: int) -> FreqGrid:
    """Radial frequency over the half-spectrum grid of an ``h x w`` map."""
    if h < 2 or w < 2:
        raise ShapeError(f"freq_grid needs h, w >= 2, got ({h}, {w})")
    return _freq_grid_cached(int(h), int(w))


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

@lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D linear interpolation weights, half-pixel centres (align_corners=False)."""
    if n_in < 1 or n_out < 1:
        raise ShapeError(f"interpolation sizes must be >= 1, got {n_in}->{n_out}")
    R = np.zeros((n_out, n_in))
    if n_in == n_out:
        R[np.arange(n_out), np.arange(n_out)] = 1.0
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        lam = src - i0
        np.add.at(R, (np.arange(n_out), i0), 1.0 - lam)
        np.add.at(R, (np.arange(n_out), i1), lam)
    R.setflags(write=False)
    return R


def resize_bilinear(m: np.ndarray, out: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of ``[..., H, W]`` maps to ``[..., h, w]``."""
    m = np.asarray(m, dtype=np.float64)
    H, W = m.shape[-2:]
    h, w = out
    if (h, w) == (H, W):
        return m.copy()
    Ry = interp_matrix(H, h)
    Rx = interp_matrix(W, w)
    return Ry @ m @ Rx.T


# ---------------------------------------------------------------------------
# Small reductions
# ---------------------------------------------------------------------------

def quantile(x, q: float) -> float:
    """Empirical quantile with linear interpolation between order statistics."""
    v = np.sort(np.asarray(x, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("quantile of empty input")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must lie in [0, 1], got {q}")
    pos = q * (v.size - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, v.size - 1)
    frac = pos - lo
    return float(v[lo] + frac * (v[hi] - v[lo]))


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_scaled(v, scale) -> np.ndarray:
    """Softmax of ``v * scale`` along the last axis."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] < 1:
        raise ShapeError("softmax over an empty axis")
    return softmax(v * np.asarray(scale, dtype=np.float64), axis=-1)


def conv1x1(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel affine channel map ``W @ x[:, :, i, j] + b``."""
    x = as_feature(x)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != x.shape[1] or b.shape != (W.shape[0],):
        raise ShapeError(
            f"conv1x1 weight {W.shape}/bias {b.shape} incompatible with input {x.shape}")
    return np.einsum("oc,bchw->bohw", W, x) + b[None, :, None, None]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive input")
    return y + np.log(-np.expm1(-y))
