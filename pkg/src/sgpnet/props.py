"""Invariant suite behind the ``props`` subcommand.

Each check returns ``(ok, detail)``. The suite is seeded and takes a few
seconds; heavier experiment-level checks live in the test suite.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import autograd as ag
from . import gm, losses, oracle, spb
from . import tensor as tc
from .episodes import dice

SIZES = (2, 3, 4, 5, 8)


def _rng(seed: int = 0) -> np.random.Generator:
    return np.random.default_rng(seed)


def check_fft_roundtrip():
    rng = _rng(1)
    worst = 0.0
    for h in SIZES:
        for w in SIZES:
            x = rng.standard_normal((2, 3, h, w))
            worst = max(worst, float(np.abs(tc.irfft2(tc.rfft2(x), w) - x).max()))
    return worst <= 1e-10, f"max |irfft2(rfft2(x)) - x| = {worst:.2e}"


def check_fft_vs_naive():
    rng = _rng(2)
    worst = 0.0
    for h in SIZES:
        for w in SIZES:
            x = rng.standard_normal((2, h, w))
            ref = oracle.naive_dft2(x)
            err = np.abs(tc.rfft2(x) - ref).max() / max(np.abs(ref).max(), 1e-300)
            worst = max(worst, float(err))
    return worst <= 1e-9, f"max relative deviation from direct DFT = {worst:.2e}"


def check_parseval():
    rng = _rng(3)
    worst = 0.0
    for h, w in [(4, 4), (5, 7), (8, 3), (16, 16)]:
        x = rng.standard_normal((h, w))
        e_sp = tc.spectral_energy(tc.rfft2(x), w)
        e_x = float(np.sum(x * x))
        worst = max(worst, abs(e_sp - e_x) / e_x)
    return worst <= 1e-9, f"max relative energy mismatch = {worst:.2e}"


def check_quantile():
    rng = _rng(4)
    for i in range(1000):
        x = rng.standard_normal(rng.integers(1, 60))
        q = float(rng.uniform())
        if tc.quantile(x, q) != oracle.quantile_sorted(x, q):
            return False, f"vector {i} disagrees with the sort oracle"
    return True, "1000 vectors match the sort oracle exactly"


def check_softmax():
    rng = _rng(5)
    for _ in range(200):
        v = rng.standard_normal(4)
        s = rng.uniform(0.1, 30, 4)
        w = tc.softmax_scaled(v, s)
        if abs(w.sum() - 1) > 1e-9 or (w <= 0).any() or w.argmax() != (v * s).argmax():
            return False, f"bad softmax for v={v}, scale={s}"
    return True, "sums to 1, positive, argmax-consistent"


def _random_spectral(rng, extreme: float = 5.0) -> spb.SpectralParams:
    sp = spb.init_spectral_params()
    for p in sp.params():
        p.value[...] = rng.uniform(-extreme, extreme)
    return sp


def check_partition_of_unity():
    rng = _rng(6)
    worst = 0.0
    for i in range(100):
        grid = tc.freq_grid(*rng.integers(2, 33, size=2))
        masks = spb.band_masks(_random_spectral(rng), grid).value
        worst = max(worst, float(np.abs(masks.sum(axis=0) - 1).max()))
    return worst <= 1e-9, f"max |sum_k M_k - 1| = {worst:.2e}"


def check_reconstruction():
    rng = _rng(7)
    x = rng.standard_normal((1, 4, 64, 64))
    masks = spb.band_masks(spb.init_spectral_params(), tc.freq_grid(64, 64))
    err = float(np.abs(spb.decompose(x, masks).value.sum(axis=2) - x).max())
    return err <= 1e-6, f"max |sum_k F_k - F| = {err:.2e}"


def check_radii_ordering():
    rng = _rng(8)
    draws = rng.uniform(-50, 50, size=(10_000, 2))
    draws[:4] = [[-50, -50], [50, 50], [-50, 50], [50, -50]]
    sp = spb.init_spectral_params()
    for a, b in draws:
        sp.radius_logits[0].value[...] = a
        sp.radius_logits[1].value[...] = b
        r1, r2 = sp.radii_values()
        if not 0 < r1 < r2:
            return False, f"ordering broken at ({a}, {b}): r1={r1}, r2={r2}"
    return True, "0 < r1 < r2 on 10^4 draws in [-50, 50]"


def check_band_monotonicity():
    rng = _rng(9)
    grid = tc.freq_grid(16, 16)
    order = np.argsort(grid.rho.ravel(), kind="stable")
    for _ in range(50):
        m = spb.band_masks(_random_spectral(rng), grid).value.reshape(3, -1)[:, order]
        if (np.diff(m[0]) > 1e-15).any() or (np.diff(m[2]) < -1e-15).any():
            return False, "low band increases or high band decreases with rho"
    return True, "low non-increasing, high non-decreasing in rho"


def _random_affinity(rng, h=12, w=12):
    band = rng.standard_normal((1, 4, h, w))
    return gm.affinity8(band, rng.uniform(0.1, 2.0)).value


def check_diffusion():
    rng = _rng(10)
    for i in range(100):
        A = _random_affinity(rng)
        seed = rng.uniform(size=(1, 1, 12, 12))
        t = int(rng.integers(0, 8))
        geo = gm.heat_diffuse(seed, A, t).value
        if geo.min() < seed.min() - 1e-12 or geo.max() > seed.max() + 1e-12:
            return False, f"range violated in pair {i}"
        c = np.full_like(seed, rng.uniform())
        if np.abs(gm.heat_diffuse(c, A, t).value - c).max() > 1e-12:
            return False, f"constant not fixed in pair {i}"
        lower = seed * rng.uniform(size=seed.shape)
        if (gm.heat_diffuse(lower, A, t).value > geo + 1e-12).any():
            return False, f"monotonicity violated in pair {i}"
        if not np.array_equal(gm.heat_diffuse(seed, A, 0).value, seed):
            return False, "T=0 is not the identity"
    return True, "range, fixed point, monotonicity, T=0 identity on 100 pairs"


def check_affinity_symmetry():
    rng = _rng(11)
    shifts = ag.NEIGHBOUR_SHIFTS
    opposite = {s: shifts.index((-s[0], -s[1])) for s in shifts}
    for _ in range(20):
        A = _random_affinity(rng, 7, 9)[0]
        for n, (dy, dx) in enumerate(shifts):
            for i in range(7):
                for j in range(9):
                    a, b = i + dy, j + dx
                    if not (0 <= a < 7 and 0 <= b < 9):
                        if A[n, i, j] != 0:
                            return False, "off-grid affinity is nonzero"
                    elif abs(A[n, i, j] - A[opposite[(dy, dx)], a, b]) > 1e-12:
                        return False, f"asymmetric affinity at {(i, j)} shift {(dy, dx)}"
    return True, "A_n(p) = A_-n(p + n), off-grid entries zero"


def check_blend_weights():
    rng = _rng(12)
    S = rng.uniform(-1, 1, size=(2, 3, 6, 6))
    w = gm.blend_weights(S, rng.uniform(0.5, 2, 3), 20.0).value
    err = float(np.abs(w.sum(axis=1) - 1).max())
    return err <= 1e-9 and (w > 0).all(), f"max |sum_k w_k - 1| = {err:.2e}"


def check_fixture_ranking():
    wins = agree = 0
    for seed in range(20):
        fx = oracle.two_cluster_fixture(seed=seed)
        band = fx.band[None]
        cos = gm.cosine_map(band, fx.prototype[None]).value
        geo = gm.heat_diffuse(gm.soft_seed(cos).value, gm.affinity8(band).value, 5).value[0, 0]
        src = cos[0, 0] >= tc.quantile(cos[0, 0], 0.85)
        d = oracle.dijkstra_geo(fx.band, src)
        if geo[fx.A] > geo[fx.B]:
            wins += 1
            agree += d[fx.A] < d[fx.B]
    return wins >= 18 and agree == wins, f"heat ranks A over B in {wins}/20, Dijkstra agrees {agree}/{wins}"


def check_triangle_inequality():
    rng = _rng(13)
    band = oracle.smooth_random_field(10, 10, 4, seed=3)
    pts = [tuple(rng.integers(0, 10, 2)) for _ in range(6)]
    dists = {p: oracle.dijkstra_geo(band, [p]) for p in pts}
    for a in pts:
        for b in pts:
            for c in pts:
                if dists[a][c] > dists[a][b] + dists[b][c] + 1e-12:
                    return False, f"d{a}{c} > d{a}{b} + d{b}{c}"
    return True, "holds on all sampled triples"


def check_nll_oracle():
    rng = _rng(14)
    logits = rng.standard_normal((2, 2, 6, 7))
    pred = tc.softmax(logits, axis=1)
    y = rng.integers(0, 2, size=(2, 6, 7))
    ref = np.mean([-np.log(pred[b, y[b, i, j], i, j])
                   for b in range(2) for i in range(6) for j in range(7)])
    got = float(losses.nll_weighted(pred, y, (1.0, 1.0)).value)
    return abs(got - ref) <= 1e-10, f"|nll - per-pixel CE| = {abs(got - ref):.2e}"


def check_boundary_empty():
    z = np.zeros((1, 1, 16, 16))
    v = float(losses.boundary_loss(z, z).value)
    return v == 0.0, f"boundary loss on empty masks = {v}"


def check_dice():
    rng = _rng(15)
    for _ in range(100):
        a = rng.uniform(size=(12, 12)) > 0.6
        b = rng.uniform(size=(12, 12)) > 0.5
        inter = sum(1 for i in range(12) for j in range(12) if a[i, j] and b[i, j])
        ref = 200.0 * inter / (a.sum() + b.sum())
        if dice(a, b) != ref:
            return False, "dice disagrees with set-count oracle"
    return True, "matches per-pixel set counts"


def check_spb_gradients():
    rng = _rng(16)
    x = rng.standard_normal((1, 2, 8, 8))
    sp = spb.init_spectral_params()
    grid = tc.freq_grid(8, 8)

    def f():
        bands = spb.decompose(x, spb.band_masks(sp, grid))
        return ag.sum(bands[:, :, 0] * bands[:, :, 0]) + ag.sum(bands[:, :, 2] * x)

    rep = ag.gradcheck(f, sp.params())
    return rep.passed(1e-4), f"max relative error {rep.max_error():.2e}"


PROPERTIES: dict[str, Callable] = {
    "fft_roundtrip": check_fft_roundtrip,
    "fft_vs_naive_dft": check_fft_vs_naive,
    "fft_parseval": check_parseval,
    "quantile_vs_sort": check_quantile,
    "softmax_scaled": check_softmax,
    "partition_of_unity": check_partition_of_unity,
    "band_reconstruction": check_reconstruction,
    "radii_ordering": check_radii_ordering,
    "band_monotonicity": check_band_monotonicity,
    "diffusion_contracts": check_diffusion,
    "affinity_symmetry": check_affinity_symmetry,
    "blend_weights": check_blend_weights,
    "fixture_ranking": check_fixture_ranking,
    "dijkstra_triangle": check_triangle_inequality,
    "nll_oracle": check_nll_oracle,
    "boundary_empty": check_boundary_empty,
    "dice_oracle": check_dice,
    "spb_gradcheck": check_spb_gradients,
}


def run_all(names=None) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in PROPERTIES.items():
        if names and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing property is a failing property
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
