"""Spectral prototype bank: radial Fourier bands and per-band prototypes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from . import tensor as tc

PROTO_EPS = 1e-5
DEFAULT_RADII = (0.25, 0.55)
DEFAULT_BETA = 10.0
# floor on each gap so r_k > r_{k-1} survives rounding when r_{k-1} is large
MIN_GAP = 1e-6


@dataclass
class SpectralParams:
    """Unconstrained band parameters.

    ``radius_logits[0]`` maps to the first radius through softplus; every
    later entry is the softplus-logit of a gap (plus ``MIN_GAP``), so radii
    are strictly increasing for any finite values. Sharpness is ``softplus(beta_tilde) + 1``.
    """

    radius_logits: list[ag.Param]
    beta_tilde: ag.Param

    @property
    def k(self) -> int:
        return len(self.radius_logits) + 1

    @property
    def r_tilde_1(self) -> ag.Param:
        return self.radius_logits[0]

    @property
    def r_tilde_2_gap(self) -> ag.Param:
        return self.radius_logits[1]

    def params(self) -> list[ag.Param]:
        return [*self.radius_logits, self.beta_tilde]

    def radii(self) -> list[ag.Tensor]:
        out = []
        for i, logit in enumerate(self.radius_logits):
            step = ag.softplus(logit)
            out.append(step if i == 0 else out[-1] + (step + MIN_GAP))
        return out

    def beta(self) -> ag.Tensor:
        return ag.softplus(self.beta_tilde) + 1.0

    def radii_values(self) -> np.ndarray:
        steps = tc.softplus(np.array([float(p.value) for p in self.radius_logits]))
        steps[1:] += MIN_GAP
        return np.cumsum(steps)

    def beta_value(self) -> float:
        return float(tc.softplus(self.beta_tilde.value) + 1.0)


def init_spectral_params(r1_target: float = DEFAULT_RADII[0], r2_target: float = DEFAULT_RADII[1],
                         beta_target: float = DEFAULT_BETA, k: int = 3,
                         prefix: str = "spb") -> SpectralParams:
    """Choose raw parameters whose derived radii and sharpness hit the targets.

    For ``k != 3`` the ``k - 1`` radii are spread evenly over
    ``[r1_target, r2_target]``.
    """
    if not 0 < r1_target < r2_target:
        raise ValueError(f"need 0 < r1 < r2, got ({r1_target}, {r2_target})")
    if beta_target <= 1:
        raise ValueError("beta_target must exceed 1")
    if not 1 <= k <= 5:
        raise ValueError(f"k must be in 1..5, got {k}")
    radii = np.linspace(r1_target, r2_target, k - 1) if k > 2 else np.array([r1_target])[: k - 1]
    steps = np.diff(np.concatenate([[0.0], radii]))
    if (steps[1:] <= MIN_GAP).any():
        raise ValueError(f"radius gaps must exceed {MIN_GAP}")
    logits = []
    for i, step in enumerate(steps):
        name = f"{prefix}.r_tilde_1" if i == 0 else f"{prefix}.r_tilde_gap_{i + 1}"
        logits.append(ag.Param(name, tc.softplus_inv(step if i == 0 else step - MIN_GAP)))
    beta = ag.Param(f"{prefix}.beta_tilde", tc.softplus_inv(beta_target - 1.0))
    return SpectralParams(logits, beta)


def band_masks(sp: SpectralParams, grid: tc.FreqGrid) -> ag.Tensor:
    """Smooth radial partition of unity, shape ``[K, h, w//2 + 1]``.

    Band k keeps ``sigmoid(beta (r_k - rho)) - sigmoid(beta (r_{k-1} - rho))``
    with the outer bands closed by 0 and 1.
    """
    rho = grid.rho
    if sp.k == 1:
        return ag.Tensor(np.ones((1,) + rho.shape))
    beta = sp.beta()
    edges = [ag.sigmoid(beta * (r - rho)) for r in sp.radii()]
    bands = [edges[0]]
    bands += [edges[i] - edges[i - 1] for i in range(1, len(edges))]
    bands.append(1.0 - edges[-1])
    return ag.stack(bands, axis=0)


def decompose(x, masks) -> ag.Tensor:
    """Band-restricted copies of ``x [B,C,h,w]`` as ``[B, C, K, h, w]``."""
    x = ag.as_tensor(x)
    if x.ndim != 4:
        raise tc.ShapeError(f"expected [B,C,h,w] features, got {x.shape}")
    return ag.spectral_bands(x, masks)


def map_prototype(band, mask_ds) -> ag.Tensor:
    """Masked average pooling of ``band [B,C,h,w]`` under ``mask_ds [B,h,w]``."""
    band, mask_ds = ag.as_tensor(band), ag.as_tensor(mask_ds)
    m = ag.reshape(mask_ds, (mask_ds.shape[0], 1) + mask_ds.shape[1:])
    num = ag.sum(band * m, axis=(2, 3))
    den = ag.clamp_min(ag.sum(m, axis=(2, 3)), PROTO_EPS)
    return num / den


def band_prototypes(bands, mask_ds) -> ag.Tensor:
    """Per-band prototypes ``[B, C, K]`` from ``bands [B,C,K,h,w]``."""
    bands, mask_ds = ag.as_tensor(bands), ag.as_tensor(mask_ds)
    m = ag.reshape(mask_ds, (mask_ds.shape[0], 1, 1) + mask_ds.shape[1:])
    num = ag.sum(bands * m, axis=(3, 4))
    den = ag.clamp_min(ag.sum(m, axis=(3, 4)), PROTO_EPS)
    return num / den


def downsample_mask(mask, hw: tuple[int, int]) -> ag.Tensor:
    mask = ag.as_tensor(mask)
    return ag.resize(mask, hw)


class SPBOutput(NamedTuple):
    bands_q: ag.Tensor
    protos: ag.Tensor
    masks: ag.Tensor


def spb_forward(F_s, F_q, M_s, sp: SpectralParams, masks=None) -> SPBOutput:
    """Decompose support and query features and pool one prototype per band.

    ``M_s`` is the support mask at image resolution ``[B, H, W]``. Passing the
    ``masks`` of an earlier call reuses them, as the foreground and background
    invocations share every parameter.
    """
    F_s, F_q = ag.as_tensor(F_s), ag.as_tensor(F_q)
    if F_s.shape != F_q.shape:
        raise tc.ShapeError(f"support {F_s.shape} and query {F_q.shape} features differ")
    h, w = F_s.shape[-2:]
    if masks is None:
        masks = band_masks(sp, tc.freq_grid(h, w))
    bands_s = decompose(F_s, masks)
    bands_q = decompose(F_q, masks)
    protos = band_prototypes(bands_s, downsample_mask(M_s, (h, w)))
    return SPBOutput(bands_q, protos, masks)
