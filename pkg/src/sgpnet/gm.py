"""Geodesic matcher: cosine maps refined by heat diffusion on a feature graph."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from . import tensor as tc

COS_EPS = 1e-8


@dataclass
class GMParams:
    alpha_tilde: ag.Param
    band_logits: ag.Param
    blend_w: ag.Param
    blend_b: ag.Param
    sigma_a: float = 0.5
    s: float = 20.0
    q: float = 0.85
    t: int = 5
    geodesic: bool = True

    def __post_init__(self):
        if self.sigma_a <= 0 or self.s <= 0:
            raise ValueError("sigma_a and s must be positive")
        if not 0 < self.q < 1:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")
        if self.t < 0:
            raise ValueError("t must be non-negative")

    @property
    def k(self) -> int:
        return self.alpha_tilde.shape[0]

    def params(self) -> list[ag.Param]:
        return [self.alpha_tilde, self.band_logits, self.blend_w, self.blend_b]


def init_gm_params(channels: int, k: int = 3, sigma_a: float = 0.5, s: float = 20.0,
                   q: float = 0.85, t: int = 5, geodesic: bool = True,
                   prefix: str = "gm") -> GMParams:
    """Gates start at 0 (alpha = 0.5), band logits at 1, blend conv at identity."""
    return GMParams(
        alpha_tilde=ag.Param(f"{prefix}.alpha_tilde", np.zeros(k)),
        band_logits=ag.Param(f"{prefix}.band_logits", np.ones(k)),
        blend_w=ag.Param(f"{prefix}.blend.w", np.eye(channels)),
        blend_b=ag.Param(f"{prefix}.blend.b", np.zeros(channels)),
        sigma_a=sigma_a, s=s, q=q, t=t, geodesic=geodesic,
    )


def cosine_map(band, proto) -> ag.Tensor:
    """Cosine between every pixel of ``band [B,C,h,w]`` and ``proto [B,C]``."""
    band, proto = ag.as_tensor(band), ag.as_tensor(proto)
    if band.shape[:2] != proto.shape:
        raise tc.ShapeError(f"band {band.shape} and prototype {proto.shape} disagree")
    p = ag.reshape(proto, proto.shape + (1, 1))
    dot = ag.sum(band * p, axis=1, keepdims=True)
    nb = ag.l2norm(band, axis=1) + COS_EPS
    npr = ag.l2norm(p, axis=1) + COS_EPS
    return dot / (nb * npr)


def seed_threshold(cosmap, q: float) -> np.ndarray:
    """Per-sample ``q``-quantile of a ``[B,1,h,w]`` map, as a constant."""
    v = ag.as_tensor(cosmap).value
    return ag.pinned(lambda: np.array([tc.quantile(v[b], q) for b in range(v.shape[0])])
                     .reshape(-1, 1, 1, 1))


def soft_seed(cosmap, q: float = 0.85, s: float = 20.0, tau=None) -> ag.Tensor:
    """``sigmoid(s * (cos - tau))`` with ``tau`` the stop-gradient quantile."""
    cosmap = ag.as_tensor(cosmap)
    if tau is None:
        tau = seed_threshold(cosmap, q)
    return ag.sigmoid((cosmap - tau) * s)


_VALID_CACHE: dict = {}


def _valid_neighbours(h: int, w: int) -> np.ndarray:
    if (h, w) not in _VALID_CACHE:
        _VALID_CACHE[(h, w)] = ag.neighbours8(np.ones((h, w))).value
    return _VALID_CACHE[(h, w)]


def affinity8(band, sigma_a: float = 0.5) -> ag.Tensor:
    """8-neighbour affinities ``[B, 8, h, w]``, zero for off-grid neighbours."""
    band = ag.as_tensor(band)
    h, w = band.shape[-2:]
    fhat = band / (ag.l2norm(band, axis=1) + COS_EPS)
    nb = ag.neighbours8(fhat)
    c = ag.sum(ag.reshape(fhat, fhat.shape[:2] + (1, h, w)) * nb, axis=1)
    return ag.exp((c - 1.0) * (1.0 / sigma_a)) * _valid_neighbours(h, w)


def diffuse_step(u, A, denom=None) -> ag.Tensor:
    """One Jacobi step with unit self-loop: ``(u + sum_n A_n u_n) / (1 + sum_n A_n)``."""
    u, A = ag.as_tensor(u), ag.as_tensor(A)
    if denom is None:
        # standalone call: drop off-grid weights here; heat_diffuse does it once
        A = A * _valid_neighbours(*u.shape[-2:])
        denom = ag.sum(A, axis=1, keepdims=True) + 1.0
    heat = ag.sum(ag.reshape(A, (A.shape[0], 1) + A.shape[1:]) * ag.neighbours8(u), axis=2)
    return (u + heat) / denom


def heat_diffuse(seed, A, t: int) -> ag.Tensor:
    seed, A = ag.as_tensor(seed), ag.as_tensor(A)
    if t < 0:
        raise ValueError("t must be non-negative")
    u = seed
    if t:
        A = A * _valid_neighbours(*seed.shape[-2:])
        denom = ag.sum(A, axis=1, keepdims=True) + 1.0
        for _ in range(t):
            u = diffuse_step(u, A, denom)
    return u


def fuse(cos, geo, alpha_tilde_k) -> ag.Tensor:
    alpha = ag.sigmoid(alpha_tilde_k)
    return (1.0 - alpha) * cos + alpha * geo


def blend_weights(S, band_logits, s: float) -> ag.Tensor:
    """Softmax over bands of ``s * logit_k * score_k``; ``S`` is ``[B,K,h,w]``."""
    S = ag.as_tensor(S)
    scale = ag.reshape(ag.as_tensor(band_logits) * s, (1, S.shape[1], 1, 1))
    return ag.softmax(S * scale, axis=1)


def blend(protos, S, band_logits, s: float, W, b) -> tuple[ag.Tensor, ag.Tensor]:
    """Pixel-wise convex mix of band prototypes followed by a 1x1 conv.

    Returns ``(F_blended [B,C,h,w], weights [B,K,h,w])``.
    """
    weights = blend_weights(S, band_logits, s)
    mixed = ag.einsum("bkhw,bck->bchw", weights, protos)
    out = ag.einsum("oc,bchw->bohw", W, mixed)
    out = out + ag.reshape(ag.as_tensor(b), (1, -1, 1, 1))
    return out, weights


class GMOutput(NamedTuple):
    matched: ag.Tensor
    scores: ag.Tensor
    cos: list
    seed: list
    geo: list
    weights: ag.Tensor


def gm_forward(F_q_raw, bands_q, protos, gmp: GMParams) -> GMOutput:
    """Match query bands to band prototypes; output ``[F_q_raw | F_blended | S]``.

    With ``gmp.geodesic`` false the score is the raw cosine map (no seeding or
    diffusion), which is the single-prototype cosine baseline when K = 1.
    """
    F_q_raw, bands_q, protos = ag.as_tensor(F_q_raw), ag.as_tensor(bands_q), ag.as_tensor(protos)
    K = bands_q.shape[2]
    if protos.shape[2] != K or gmp.k != K:
        raise tc.ShapeError(
            f"bands carry {K} bands, prototypes {protos.shape[2]}, params {gmp.k}")

    cos = [cosine_map(bands_q[:, :, k], protos[:, :, k]) for k in range(K)]
    seeds, geos, scores = [], [], []
    for k in range(K):
        if not gmp.geodesic:
            scores.append(cos[k])
            continue
        seed = soft_seed(cos[k], gmp.q, gmp.s)
        A = affinity8(bands_q[:, :, k], gmp.sigma_a)
        geo = heat_diffuse(seed, A, gmp.t)
        seeds.append(seed)
        geos.append(geo)
        scores.append(fuse(cos[k], geo, gmp.alpha_tilde[k]))
    S = ag.concat(scores, axis=1)
    blended, weights = blend(protos, S, gmp.band_logits, gmp.s, gmp.blend_w, gmp.blend_b)
    matched = ag.concat([F_q_raw, blended, S], axis=1)
    return GMOutput(matched, S, cos, seeds, geos, weights)
