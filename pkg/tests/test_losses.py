import math

import numpy as np
import pytest
from scipy import ndimage

from sgpnet import autograd as ag
from sgpnet import losses
from sgpnet import tensor as tc


def pooled_boundary(m, theta):
    k = 2 * theta + 1
    return (ndimage.maximum_filter(m, size=k, mode="nearest")
            - ndimage.minimum_filter(m, size=k, mode="nearest"))


def centered_square(n=16, side=4):
    m = np.zeros((1, 1, n, n))
    a = (n - side) // 2
    m[..., a:a + side, a:a + side] = 1.0
    return m


def test_labels_validated():
    with pytest.raises(ValueError):
        losses.check_labels(np.array([[0, 2]]))


def test_class_weights():
    y = np.zeros((1, 10, 10), dtype=int)
    y[0, :2, :5] = 1
    np.testing.assert_allclose(losses.class_weights(y), [1.0, 9.0])
    y[0, 0, 0] = 0
    y[0, :, :] = 0
    y[0, 0, 0] = 1
    assert losses.class_weights(y)[1] == 20.0
    y[0, 1, 1] = losses.IGNORE
    assert losses.class_weights(y)[1] == 20.0


def test_nll_single_pixel():
    pred = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
    v = losses.nll_weighted(pred, np.ones((1, 1, 1), dtype=int)).value
    assert v == pytest.approx(0.6931, abs=5e-5)
    assert v == pytest.approx(-math.log(0.5), rel=1e-14)


def test_nll_all_ignored_is_zero():
    pred = np.full((1, 2, 3, 3), 0.5)
    assert losses.nll_weighted(pred, np.full((1, 3, 3), 255)).value == 0.0


def test_nll_weighted_oracle(rng):
    pred = tc.softmax(rng.standard_normal((2, 2, 5, 4)), axis=1)
    y = rng.integers(0, 2, (2, 5, 4))
    y[0, 0, :] = 255
    w = (1.0, 3.5)
    terms = [w[y[b, i, j]] * -math.log(pred[b, y[b, i, j], i, j])
             for b in range(2) for i in range(5) for j in range(4) if y[b, i, j] != 255]
    got = losses.nll_weighted(pred, y, w).value
    assert got == pytest.approx(sum(terms) / len(terms), abs=1e-12)


def test_nll_log_is_clamped():
    pred = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    v = losses.nll_weighted(pred, np.ones((1, 1, 1), dtype=int)).value
    assert v == pytest.approx(-math.log(1e-12))


def test_all_one_mask_has_no_boundary():
    # replicate padding: the image border is not an edge
    b = losses.soft_boundary(np.ones((1, 1, 8, 8)), 1).value
    assert (b == 0).all()


def test_square_boundary_matches_pooling_oracle():
    m = centered_square()
    b = losses.soft_boundary(m, 1).value
    np.testing.assert_array_equal(b[0, 0], pooled_boundary(m[0, 0], 1))
    ring = b[0, 0] > 0
    assert ring.sum() == 6 * 6 - 2 * 2
    assert not ring[7, 7] and ring[5, 5] and ring[6, 7]


def test_boundary_loss_square_residual():
    m = centered_square()
    v = losses.boundary_loss(m, m).value
    ref = np.mean((pooled_boundary(m[0, 0], 3) - pooled_boundary(m[0, 0], 5)) ** 2)
    assert v == pytest.approx(ref, abs=1e-15)
    assert 0 < v < 1


def test_boundary_loss_uniform_prediction():
    y = centered_square()
    v = losses.boundary_loss(np.full_like(y, 0.5), y).value
    assert v == pytest.approx(np.mean(pooled_boundary(y[0, 0], 5) ** 2))


def test_boundary_loss_empty():
    z = np.zeros((2, 1, 16, 16))
    assert losses.boundary_loss(z, z).value == 0.0


def test_boundary_loss_gradcheck(rng):
    p = ag.Param("p", rng.permutation(144).reshape(1, 1, 12, 12) / 144.0)
    y = centered_square(12)
    assert ag.gradcheck(lambda: losses.boundary_loss(p, y), [p]).passed(1e-6)


def test_pseudo_mask_values():
    pred = np.array([[[0.2, 0.7], [0.5, 0.9]], [[0.1, 0.2], [0.3, 0.4]]])
    m = losses.pseudo_mask(pred)
    np.testing.assert_array_equal(m[0], [[0, 1], [0, 1]])
    np.testing.assert_array_equal(m[1], 0.5)
    assert set(np.unique(m)) <= {0.0, 0.5, 1.0}


class IdentityModel:
    """Features are the images; prediction copies the support mask statistics."""

    def encode(self, image):
        return ag.as_tensor(image)

    def predict(self, F_s, F_q, M_s):
        m = ag.as_tensor(M_s)
        fg = ag.reshape(m, (m.shape[0], 1) + m.shape[1:]) * 0.8 + 0.1
        return ag.concat([1.0 - fg, fg], axis=1), {}


class Ep:
    def __init__(self, img, mask):
        self.I_s = self.I_q = img
        self.M_s = self.M_q = mask


def test_align_equals_forward_loss_on_symmetric_episode():
    mask = (centered_square(16, 6)[:, 0] > 0).astype(np.int64)
    ep = Ep(np.zeros((1, 1, 16, 16)), mask)
    model = IdentityModel()
    pred, _ = model.predict(None, None, mask.astype(float))
    prim, b = losses.segmentation_loss(pred, mask)
    align = losses.align_loss(model, ep, pred)
    assert align.value == pytest.approx(prim.value + b.value, rel=1e-14)
    total = losses.total_loss(prim, b, align)
    assert total.value == pytest.approx(prim.value + b.value + align.value)


def test_align_cold_start_is_finite():
    mask = (centered_square(16, 6)[:, 0] > 0).astype(np.int64)
    ep = Ep(np.zeros((1, 1, 16, 16)), mask)
    pred = np.concatenate([np.full((1, 1, 16, 16), 0.8), np.full((1, 1, 16, 16), 0.2)], axis=1)
    assert np.isfinite(losses.align_loss(IdentityModel(), ep, pred).value)


def test_threshold_carries_no_gradient():
    p = ag.Param("p", np.linspace(0.1, 0.9, 16).reshape(1, 1, 4, 4))
    mask = np.zeros((1, 4, 4), dtype=np.int64)
    ep = Ep(np.zeros((1, 1, 4, 4)), mask)
    with ag.Tape() as tape:
        pred = ag.concat([1.0 - p, p], axis=1)
        loss = losses.align_loss(IdentityModel(), ep, pred)
    tape.backward(loss)
    assert (p.grad == 0).all()
