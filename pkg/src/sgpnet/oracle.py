"""Slow independent references: direct DFT, sort quantile, Dijkstra geodesics, fixtures."""

from __future__ import annotations

import cmath
import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .autograd import NEIGHBOUR_SHIFTS

FEATURE_EPS = 1e-8


def naive_dft2(x) -> np.ndarray:
    """Orthonormal half-spectrum by direct summation, ``O((hw)^2)``."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    wr = w // 2 + 1
    out = np.zeros(x.shape[:-2] + (h, wr), dtype=complex)
    m = np.arange(h)[:, None]
    n = np.arange(w)[None, :]
    for u in range(h):
        for v in range(wr):
            kernel = np.exp(-2j * np.pi * (u * m / h + v * n / w))
            out[..., u, v] = np.sum(x * kernel, axis=(-2, -1))
    return out / math.sqrt(h * w)


def naive_idft2_point(spec_full: np.ndarray, i: int, j: int) -> complex:
    """One sample of the inverse of a full (not half) orthonormal spectrum."""
    h, w = spec_full.shape
    acc = 0j
    for u in range(h):
        for v in range(w):
            acc += spec_full[u, v] * cmath.exp(2j * math.pi * (u * i / h + v * j / w))
    return acc / math.sqrt(h * w)


def quantile_sorted(x, q: float) -> float:
    """Reference quantile: full sort then linear interpolation."""
    v = sorted(float(a) for a in np.ravel(x))
    if not v:
        raise ValueError("quantile of empty input")
    pos = q * (len(v) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(v) - 1)
    return v[lo] + (pos - lo) * (v[hi] - v[lo])


def _unit_features(band: np.ndarray) -> np.ndarray:
    band = np.asarray(band, dtype=np.float64)
    # exact cosine for the reference; zero vectors stay zero
    norm = np.linalg.norm(band, axis=0, keepdims=True)
    return band / np.where(norm > 0, norm, 1.0)


def dijkstra_geo(band, sources, lam_len: float = 0.0) -> np.ndarray:
    """Multi-source shortest paths on the 8-neighbour grid.

    Edge cost between neighbours p, q is ``1 - cos(p, q) + lam_len * |p - q|``.
    ``band`` is ``[C, h, w]``; ``sources`` is an iterable of ``(i, j)`` pairs
    or a boolean ``[h, w]`` mask.
    """
    fhat = _unit_features(band)
    h, w = fhat.shape[1:]
    src = np.asarray(sources)
    if src.dtype == bool:
        src = np.argwhere(src)
    src = [tuple(int(a) for a in p) for p in np.reshape(src, (-1, 2))]
    if not src:
        raise ValueError("dijkstra_geo needs at least one source pixel")
    dist = np.full((h, w), np.inf)
    heap = []
    for p in src:
        dist[p] = 0.0
        heap.append((0.0, p))
    heapq.heapify(heap)
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if d > dist[i, j]:
            continue
        for dy, dx in NEIGHBOUR_SHIFTS:
            a, b = i + dy, j + dx
            if not (0 <= a < h and 0 <= b < w):
                continue
            c = float(fhat[:, i, j] @ fhat[:, a, b])
            cost = max(0.0, 1.0 - c) + lam_len * math.hypot(dy, dx)
            nd = d + cost
            if nd < dist[a, b]:
                dist[a, b] = nd
                heapq.heappush(heap, (nd, (a, b)))
    return dist


def shortest_path_tree(band, source: tuple[int, int]) -> tuple[np.ndarray, dict]:
    """Single-source distances plus predecessor links for path recovery."""
    fhat = _unit_features(band)
    h, w = fhat.shape[1:]
    dist = np.full((h, w), np.inf)
    prev: dict = {}
    dist[source] = 0.0
    heap = [(0.0, tuple(source))]
    while heap:
        d, (i, j) = heapq.heappop(heap)
        if d > dist[i, j]:
            continue
        for dy, dx in NEIGHBOUR_SHIFTS:
            a, b = i + dy, j + dx
            if 0 <= a < h and 0 <= b < w:
                nd = d + max(0.0, 1.0 - float(fhat[:, i, j] @ fhat[:, a, b]))
                if nd < dist[a, b]:
                    dist[a, b] = nd
                    prev[(a, b)] = (i, j)
                    heapq.heappush(heap, (nd, (a, b)))
    return dist, prev


def rank_correlation(heat, dist, region=None) -> float:
    """Spearman correlation between ``heat`` and ``-dist`` over ``region``."""
    heat = np.asarray(heat, dtype=np.float64)
    dist = np.asarray(dist, dtype=np.float64)
    if region is None:
        region = np.ones(heat.shape, dtype=bool)
    region = np.asarray(region, dtype=bool)
    a, b = heat[region], -dist[region]
    if a.size < 10:
        raise ValueError("rank correlation needs at least 10 pixels")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise ValueError("rank correlation undefined for constant input")
    return float(stats.spearmanr(a, b).statistic)


# ---------------------------------------------------------------------------
# Fixtures
# ---------------------------------------------------------------------------

class FixtureError(RuntimeError):
    pass


@dataclass
class TwoClusterFixture:
    band: np.ndarray          # [C, h, w]
    A: tuple[int, int]        # on-manifold, far from the prototype in feature space
    B: tuple[int, int]        # off-manifold look-alike
    prototype: np.ndarray     # [C]
    cluster1: np.ndarray      # bool [h, w]
    cluster2: np.ndarray      # bool [h, w]
    seed: int


def _cos(a, b) -> float:
    return float(a @ b / ((np.linalg.norm(a) + FEATURE_EPS) * (np.linalg.norm(b) + FEATURE_EPS)))


def two_cluster_fixture(h: int = 16, w: int = 16, gap_width: int = 2, seed: int = 0,
                        channels: int = 8, noise: float = 0.02,
                        connect_threshold: float = 0.5, sigma_a: float = 0.5) -> TwoClusterFixture:
    """Two feature clusters split by a low-affinity gap.

    Cluster 1 (left) is a smooth curve of directions rotating away from the
    prototype ``e1``; its far end A ends up with low cosine to the prototype.
    Cluster 2 (right) sits at a fixed direction with higher cosine to ``e1``
    than A, but no high-affinity path reaches it from cluster 1.
    """
    if h < 16 or w < 16:
        raise ValueError("fixture needs h, w >= 16")
    if channels < 4:
        raise ValueError("fixture needs at least 4 channels")
    rng = np.random.default_rng(seed)
    e = np.eye(channels)
    c1_cols = int(rng.integers(w // 2 - 2, w // 2 + 1))
    theta_max = rng.uniform(math.radians(65), math.radians(75))
    phi_b = math.acos(rng.uniform(0.5, 0.6))

    band = np.zeros((channels, h, w))
    cluster1 = np.zeros((h, w), dtype=bool)
    cluster2 = np.zeros((h, w), dtype=bool)
    for j in range(w):
        if j < c1_cols:
            th = theta_max * j / (c1_cols - 1)
            d = math.cos(th) * e[0] + math.sin(th) * e[2]
            cluster1[:, j] = True
        elif j < c1_cols + gap_width:
            d = e[3]
        else:
            d = math.cos(phi_b) * e[0] + math.sin(phi_b) * e[1]
            cluster2[:, j] = True
        band[:, :, j] = d[:, None]
    band = band + noise * rng.standard_normal(band.shape)

    prototype = e[0].copy()
    A = (int(rng.integers(0, h)), c1_cols - 1)
    B = (int(rng.integers(0, h)), c1_cols + gap_width)

    # certificate 1: cosine ranks the look-alike above the on-manifold pixel
    cos_a = _cos(band[:, A[0], A[1]], prototype)
    cos_b = _cos(band[:, B[0], B[1]], prototype)
    if not cos_b > cos_a:
        raise FixtureError(f"seed {seed}: cos(B)={cos_b:.3f} <= cos(A)={cos_a:.3f}")
    # certificate 2: no high-affinity path from cluster 2 into cluster 1
    fhat = _unit_features(band)
    strong = np.zeros((h, w), dtype=bool)
    frontier = [tuple(p) for p in np.argwhere(cluster2)]
    for p in frontier:
        strong[p] = True
    while frontier:
        i, j = frontier.pop()
        for dy, dx in NEIGHBOUR_SHIFTS:
            a, b = i + dy, j + dx
            if 0 <= a < h and 0 <= b < w and not strong[a, b]:
                aff = math.exp(-(1.0 - float(fhat[:, i, j] @ fhat[:, a, b])) / sigma_a)
                if aff > connect_threshold:
                    strong[a, b] = True
                    frontier.append((a, b))
    if (strong & cluster1).any():
        raise FixtureError(f"seed {seed}: clusters connected by a high-affinity path")
    return TwoClusterFixture(band, A, B, prototype, cluster1, cluster2, seed)


def smooth_random_field(h: int = 24, w: int = 24, channels: int = 8, seed: int = 0,
                        sigma: float = 2.5) -> np.ndarray:
    """Gaussian-smoothed white noise ``[C, h, w]`` with a nonzero channel mean."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((channels, h, w))
    field = np.stack([ndimage.gaussian_filter(c, sigma, mode="reflect") for c in noise])
    field /= field.std() + FEATURE_EPS
    return field + 0.5 * rng.standard_normal((channels, 1, 1))
