import numpy as np
import pytest

from sgpnet import gm, oracle
from sgpnet import tensor as tc


def test_naive_dft_matches_fast(rng):
    x = rng.standard_normal((8, 8))
    assert np.abs(oracle.naive_dft2(x) - tc.rfft2(x)).max() <= 1e-9 * np.abs(tc.rfft2(x)).max()


def test_naive_inverse_point(rng):
    x = rng.standard_normal((4, 5))
    full = np.fft.fft2(x, norm="ortho")
    assert oracle.naive_idft2_point(full, 2, 3).real == pytest.approx(x[2, 3])


def test_uniform_features_have_zero_distance():
    d = oracle.dijkstra_geo(np.ones((3, 6, 6)), [(0, 0)])
    assert (d == 0).all()


def test_dijkstra_straight_line():
    band = np.zeros((2, 1, 4))
    band[0, 0, :2] = 1
    band[1, 0, 2:] = 1
    d = oracle.dijkstra_geo(band, [(0, 0)])
    np.testing.assert_allclose(d[0], [0, 0, 1, 1], atol=1e-7)
    dl = oracle.dijkstra_geo(band, [(0, 0)], lam_len=0.5)
    np.testing.assert_allclose(dl[0], [0, 0.5, 2, 2.5], atol=1e-7)


def test_dijkstra_accepts_mask_and_path_tree(rng):
    band = oracle.smooth_random_field(8, 8, 3, seed=2)
    src = np.zeros((8, 8), dtype=bool)
    src[3, 4] = True
    d1 = oracle.dijkstra_geo(band, src)
    d2, prev = oracle.shortest_path_tree(band, (3, 4))
    np.testing.assert_allclose(d1, d2)
    node, hops = (7, 0), 0
    while node != (3, 4):
        node = prev[node]
        hops += 1
    assert hops >= 4
    with pytest.raises(ValueError):
        oracle.dijkstra_geo(band, np.zeros((8, 8), dtype=bool))


@pytest.mark.parametrize("seed", range(5))
def test_fixture_certificates(seed):
    fx = oracle.two_cluster_fixture(seed=seed)
    cos = gm.cosine_map(fx.band[None], fx.prototype[None]).value[0, 0]
    assert cos[fx.B] > cos[fx.A]
    d = oracle.dijkstra_geo(fx.band, [tuple(p) for p in np.argwhere(fx.cluster1 & (cos > 0.9))])
    assert np.isfinite(d[fx.A]) and d[fx.A] < d[fx.B]
    assert fx.cluster1[fx.A] and fx.cluster2[fx.B]


def test_fixture_rejects_small_grids():
    with pytest.raises(ValueError):
        oracle.two_cluster_fixture(h=8)


def test_rank_correlation():
    rng = np.random.default_rng(0)
    dist = rng.uniform(0, 3, (6, 6))
    assert oracle.rank_correlation(np.exp(-dist), dist) == pytest.approx(1.0)
    assert oracle.rank_correlation(dist, dist) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        oracle.rank_correlation(np.ones((4, 4)), dist[:4, :4])


def test_quantile_sorted():
    assert oracle.quantile_sorted([4, 1, 3, 2], 0.5) == 2.5
    assert oracle.quantile_sorted([4, 1, 3, 2], 1.0) == 4
