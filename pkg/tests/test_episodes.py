import numpy as np
import pytest
from scipy import ndimage

from sgpnet import autograd as ag
from sgpnet import episodes as ep


@pytest.mark.parametrize("seed", range(6))
def test_phantom_contract(seed):
    e = ep.sample_episode(seed)
    assert e.I_s.shape == e.I_q.shape == (1, 1, 64, 64)
    for m, c in [(e.M_s, e.clutter_s), (e.M_q, e.clutter_q)]:
        assert set(np.unique(m)) <= {0, 1}
        assert m.sum() >= 16
        assert ndimage.label(m[0])[1] == 1
        # clutter never touches the organ
        assert not (ndimage.binary_dilation(m[0] == 1) & c[0]).any()
    assert np.isfinite(e.I_s).all()


def test_phantoms_are_seeded():
    a, b = ep.sample_episode(11), ep.sample_episode(11)
    np.testing.assert_array_equal(a.I_q, b.I_q)
    assert not np.array_equal(a.I_q, ep.sample_episode(12).I_q)


def test_small_family_is_16px():
    e = ep.sample_episode(5, ep.SMALL_FAMILY)
    assert e.I_s.shape == (1, 1, 16, 16) and e.M_q.sum() >= 16


def test_dice_examples():
    a = np.zeros((20, 20), bool)
    b = np.zeros((20, 20), bool)
    a[:10, :10] = True
    b[:5, :10] = True
    b[10:15, :10] = True
    assert ep.dice(a, b) == 50.0
    assert ep.dice(a, a) == 100.0
    assert ep.dice(a, ~a) == 0.0
    assert ep.dice(np.zeros(4), np.zeros(4)) == 100.0
    with pytest.raises(ValueError):
        ep.dice(a, b[:5])


def test_model_forward_contract():
    model = ep.ToyModel(seed=0)
    e = ep.sample_episode(3)
    pred, diag = ep.episode_forward(model, e)
    assert pred.shape == (1, 2, 64, 64)
    np.testing.assert_allclose(pred.value.sum(axis=1), 1.0, atol=1e-12)
    assert ((pred.value >= 0) & (pred.value <= 1)).all()
    assert diag["fg"].matched.shape == (1, 2 * 32 + 3, 16, 16)
    for key in ("fg", "bg"):
        assert all(np.isfinite(t.value).all() for t in diag[key].geo + diag[key].cos)
    np.testing.assert_allclose(diag["radii"], [0.25, 0.55])


def test_fg_bg_share_matching_params_not_decoders():
    model = ep.ToyModel(seed=0)
    names = [p.name for p in model.params()]
    assert len(names) == len(set(names))
    assert names.count("gm.alpha_tilde") == 1 and names.count("spb.beta_tilde") == 1
    assert model.dec_fg[0][0] is not model.dec_bg[0][0]


def test_tied_decoders_swap_logits():
    model = ep.ToyModel(ep.ModelConfig(channels=8, decoder_hidden=8, tie_decoders=True), seed=2)
    e = ep.sample_episode(4)
    F_s, F_q = model.encode(e.I_s), model.encode(e.I_q)
    m = e.M_s.astype(float)
    _, d1 = model.predict(F_s, F_q, m)
    _, d2 = model.predict(F_s, F_q, 1.0 - m)
    np.testing.assert_allclose(d1["logit_fg"].value, d2["logit_bg"].value, atol=1e-12)
    np.testing.assert_allclose(d1["logit_bg"].value, d2["logit_fg"].value, atol=1e-12)


def test_losses_recompose():
    model = ep.ToyModel(ep.ModelConfig(channels=8, decoder_hidden=8), seed=0)
    terms = ep.episode_losses(model, ep.sample_episode(9))
    total = terms["L_prim"].value + terms["L_b"].value + terms["L_align"].value
    assert terms["L_total"].value == pytest.approx(total, rel=1e-14)


def test_zero_lr_keeps_everything_constant():
    model = ep.ToyModel(ep.ModelConfig(channels=8, decoder_hidden=8), seed=0)
    before = {p.name: p.value.copy() for p in model.params()}
    res = ep.train(model, 3, cfg=ep.TrainConfig(lr=0.0, eval_every=0))
    for p in model.params():
        np.testing.assert_array_equal(p.value, before[p.name])
    assert len({(r1, r2) for _, r1, r2 in res.radii}) == 1


def test_shared_params_are_single_objects_after_step():
    model = ep.ToyModel(ep.ModelConfig(channels=8, decoder_hidden=8), seed=0)
    ids = [id(p) for p in model.spectral.params() + model.gm.params()]
    ep.train(model, 2, cfg=ep.TrainConfig(eval_every=0))
    assert [id(p) for p in model.spectral.params() + model.gm.params()] == ids


def test_training_is_deterministic():
    def run():
        m = ep.ToyModel(ep.ModelConfig(channels=8, decoder_hidden=8), seed=3)
        return ep.train(m, 4, cfg=ep.TrainConfig(seed=5, eval_every=0)).total_losses()

    np.testing.assert_array_equal(run(), run())


def test_train_rejects_zero_iterations():
    with pytest.raises(ValueError):
        ep.train(ep.ToyModel(seed=0), 0)


def test_nan_loss_aborts_with_diagnostics():
    model = ep.ToyModel(ep.ModelConfig(channels=8, decoder_hidden=8), seed=0)
    model.encoder[0][0].value[...] = np.nan
    with pytest.raises(ep.TrainingDiverged) as info:
        ep.train(model, 2, cfg=ep.TrainConfig(eval_every=0))
    assert info.value.diagnostics["iter"] == 1 and "episode_seed" in info.value.diagnostics


def test_lr_schedule():
    cfg = ep.TrainConfig(lr=1.0, step_size=1000, gamma=0.9)
    assert ep.learning_rate(cfg, 1) == 1.0
    assert ep.learning_rate(cfg, 1000) == 1.0
    assert ep.learning_rate(cfg, 1001) == pytest.approx(0.9)


def test_smoothed_trailing_mean():
    np.testing.assert_allclose(ep.smoothed([1, 2, 3, 4], window=2), [1, 1.5, 2.5, 3.5])


def test_cosine_baseline_has_no_diffusion():
    model = ep.ToyModel(ep.ModelConfig(channels=8, decoder_hidden=8, k=1, matcher="cosine"))
    _, diag = ep.episode_forward(model, ep.sample_episode(1))
    assert diag["fg"].geo == [] and diag["masks"].shape[0] == 1
    with pytest.raises(ValueError):
        ep.ModelConfig(matcher="other")


def test_ablate_small_table():
    tiny = ep.ModelConfig(channels=4, decoder_hidden=4)
    rows = ep.ablate("T", [0, 2], 1, [0], base=tiny,
                     train_cfg=ep.TrainConfig(n_eval=1), family=ep.SMALL_FAMILY, workers=1)
    assert [r["value"] for r in rows] == [0, 2]
    assert all(0 <= r["dice_mean"] <= 100 and r["dice_std"] == 0 for r in rows)
    with pytest.raises(ValueError):
        ep.ablate("X", [1], 1, [0])


def test_end_to_end_gradients_flow_to_every_param():
    model = ep.ToyModel(ep.ModelConfig(channels=4, decoder_hidden=4), seed=1)
    e = ep.sample_episode(5, ep.SMALL_FAMILY)
    ag.zero_grads(model.params())
    with ag.Tape() as tape:
        loss = ep.episode_losses(model, e)["L_total"]
    tape.backward(loss)
    for p in model.params():
        assert np.isfinite(p.grad).all()
        assert np.abs(p.grad).max() > 0, p.name
