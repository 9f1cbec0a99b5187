import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dmcmtl import autodiff as ad
from dmcmtl import biophysical as bp
from dmcmtl import training as tr
from dmcmtl.data import make_split
from dmcmtl.evaluation import evaluate, mean_rmse
from dmcmtl.network import init_weights


# ---------------------------------------------------------------- losses

def test_masked_mse_examples():
    assert tr.masked_mse([1.0, 2.0, 3.0], [1.0, 9.0, 5.0], [1, 0, 1]).item() == 2.0
    assert tr.masked_mse([1.0, 2.0], [1.0, 2.0], [1, 1]).item() == 0.0
    with pytest.raises(ValueError):
        tr.masked_mse([1.0], [1.0], [0])
    with pytest.raises(ValueError):
        tr.masked_mse([1.0, 2.0], [1.0], [1])


def test_masked_days_do_not_affect_gradient():
    pred = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.backward(tr.masked_mse(pred, [0.0, 1e9, 0.0], [1, 0, 1]))
    assert pred.grad[1] == 0
    other = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    ad.backward(tr.masked_mse(other, [0.0, np.nan, 0.0], [1, 0, 1]))
    np.testing.assert_array_equal(pred.grad, other.grad)


def test_cross_entropy_examples():
    assert tr.cross_entropy(np.zeros((4, 6)), [0, 2, 3, 4], np.ones(4)).item() == \
        pytest.approx(math.log(6))
    losses = []
    for margin in (1.0, 5.0, 20.0):
        logits = np.zeros((2, 6))
        logits[[0, 1], [2, 3]] = margin
        losses.append(tr.cross_entropy(logits, [2, 3], [1, 1]).item())
    assert losses[0] > losses[1] > losses[2] and losses[2] < 1e-7
    with pytest.raises(ValueError):
        tr.cross_entropy(np.zeros((1, 6)), [6], [1])


def test_pinn_loss_examples():
    assert tr.pinn_loss([3.0], [2.0], [1.0], 0.5, [1]).item() == 2.5
    pred, y, phys, m = [1.0, 4.0], [2.0, 2.0], [0.0, 5.0], [1, 1]
    assert tr.pinn_loss(pred, y, phys, 0.0, m).item() == tr.masked_mse(pred, y, m).item()
    assert tr.pinn_loss(pred, y, phys, 1.0, m).item() == tr.masked_mse(pred, phys, m).item()
    with pytest.raises(ValueError):
        tr.pinn_loss(pred, y, phys, 1.5, m)


# ---------------------------------------------------------------- readout

def test_readout_hits_labels_mid_stage():
    y = np.array([0.5, 1.5, 2.5, 3.5, 4.5, 5.0])
    np.testing.assert_allclose(tr.phenology_readout(y).value, [0, 0, 2, 3, 4, 4], atol=1e-4)


def test_readout_is_centered_on_transitions():
    for stage in (1, 2, 3):
        lo, hi = tr.STAGE_LABEL[stage], tr.STAGE_LABEL[stage + 1]
        at = tr.phenology_readout(np.array([stage + 1.0 - 1e-12, stage + 1.0])).value
        np.testing.assert_allclose(at, 0.5 * (lo + hi), atol=1e-9)


@settings(max_examples=50)
@given(st.floats(0, 4.99), st.floats(1e-6, 1e-3))
def test_readout_is_monotone(y, dy):
    a, b = tr.phenology_readout(np.array([y, y + dy])).value
    assert b >= a - 1e-12


# ---------------------------------------------------------------- optimizer

def test_adam_first_step():
    w = [np.array([0.0])]
    state = tr.OptimizerState.zeros_like(w)
    tr.adam_step(w, [np.array([1.0])], state, 0.001)
    assert w[0][0] == pytest.approx(-0.001, rel=1e-6)
    assert state.step == 1


def test_adam_state_from_generator_updates_every_weight():
    x = ad.Tensor(np.zeros(3), requires_grad=True)
    opt = tr.Adam([x], lr=0.1)
    assert len(opt.state.m) == len(opt.state.v) == 1
    x.grad = np.ones(3)
    opt.step()
    np.testing.assert_allclose(x.value, -0.1)


def test_adam_zero_gradient():
    w = [np.array([0.3, -1.0])]
    state = tr.OptimizerState.zeros_like(w)
    tr.adam_step(w, [np.zeros(2)], state, 0.001)
    np.testing.assert_array_equal(w[0], [0.3, -1.0])
    assert state.step == 1


def test_adam_rejects_nonfinite_gradient():
    w = [np.zeros(2)]
    with pytest.raises(FloatingPointError):
        tr.adam_step(w, [np.array([1.0, np.nan])], tr.OptimizerState.zeros_like(w), 0.001)


def test_adam_is_deterministic():
    def run():
        x = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = tr.Adam([x], lr=0.1)
        for _ in range(20):
            opt.zero_grad()
            ad.backward(ad.sum(ad.square(ad.sub(x, [3.0, 0.5]))))
            opt.step()
        return x.value
    assert np.array_equal(run(), run())


# ---------------------------------------------------------------- scheduler

def test_plateau_examples():
    assert tr.lr_plateau(np.linspace(1, 0.1, 30)) == 2e-4
    assert tr.lr_plateau([1.0] * 11) == pytest.approx(2e-4 * 0.95)
    assert tr.lr_plateau([1.0] * 21) == pytest.approx(2e-4 * 0.95 ** 2)
    assert tr.lr_plateau([1.0] * 10) == 2e-4


def test_improvement_resets_patience():
    losses = [1.0] * 9 + [0.5] + [0.5] * 9
    assert tr.lr_plateau(losses) == 2e-4


# ---------------------------------------------------------------- config

def test_config_defaults_and_validation():
    c = tr.TrainConfig()
    assert (c.epochs, c.lr, c.plateau_factor, c.plateau_patience, c.pinn_p) == (400, 2e-4, 0.95, 10, 0.5)
    assert tr.TrainConfig(variant="pinn_mtl").loss_kind == "pinn"
    assert tr.TrainConfig(variant="classification_mtl").loss_kind == "cross_entropy"
    for bad in (dict(lr=0), dict(pinn_p=1.1), dict(variant="lstm")):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


# ---------------------------------------------------------------- training

SMOKE = dict(epochs=2, lr=1e-3, scale="desk", seed=0)


@pytest.fixture(scope="module")
def gdd_split(gdd_dataset):
    return make_split(gdd_dataset, 0)


def test_dmc_mtl_smoke(gdd_dataset, gdd_split):
    seen = []
    res = tr.train("dmc_mtl", gdd_dataset, gdd_split, tr.TrainConfig(**SMOKE),
                   on_epoch=lambda e, loss, w: seen.append(e))
    assert len(res.history) == 2 and seen == [0, 1]
    assert all(np.isfinite(res.history.loss))
    assert res.weights.config.multitask and res.weights.config.n_cultivars == 2
    assert res.weights.digest() != init_weights(res.weights.config, 0).digest()


@pytest.mark.parametrize("variant", ["regression_mtl", "classification_mtl", "dmc_agg"])
def test_baseline_smoke(gdd_dataset, gdd_split, variant):
    res = tr.train(variant, gdd_dataset, gdd_split, tr.TrainConfig(epochs=1, scale=1 / 32))
    assert len(res.history) == 1
    preds = [tr.predict_season(res, r) for r in gdd_split.test_records(gdd_dataset)]
    assert all(p.stages.shape == p.series.shape for p in preds)


def test_dmc_stl_has_one_model_per_cultivar(gdd_dataset, gdd_split):
    res = tr.train("dmc_stl", gdd_dataset, gdd_split, tr.TrainConfig(epochs=1, scale=1 / 32))
    assert sorted(res.per_cultivar) == gdd_dataset.cultivars
    assert all(not w.config.multitask for w in res.per_cultivar.values())


def test_pinn_smoke_on_cold_hardiness(ferguson_dataset):
    split = make_split(ferguson_dataset, 0)
    cfg = tr.TrainConfig(epochs=1, scale=1 / 32, stationary_steps=3, lr=1e-3)
    res = tr.train("pinn_mtl", ferguson_dataset, split, cfg)
    assert res.physics_source is not None
    assert np.isfinite(res.history.loss[0])


def test_classification_needs_phenology(ferguson_dataset):
    with pytest.raises(ValueError):
        tr.train("classification_mtl", ferguson_dataset, make_split(ferguson_dataset, 0),
                 tr.TrainConfig(epochs=1))


def test_training_is_deterministic(gdd_dataset, gdd_split):
    cfg = tr.TrainConfig(epochs=2, scale=1 / 32, lr=1e-3)
    a = tr.train("dmc_mtl", gdd_dataset, gdd_split, cfg)
    b = tr.train("dmc_mtl", gdd_dataset, gdd_split, cfg)
    assert a.weights.digest() == b.weights.digest()
    test = gdd_split.test_records(gdd_dataset)
    assert mean_rmse(evaluate(a, test)) == mean_rmse(evaluate(b, test))


def test_divergence_aborts_with_epoch(gdd_dataset, gdd_split):
    bad = dataclasses.replace(gdd_dataset, records=[
        dataclasses.replace(r, labels=np.full_like(r.labels, np.nan)) for r in gdd_dataset.records])
    with pytest.raises(tr.TrainingDiverged) as info:
        tr.train("regression_mtl", bad, gdd_split, tr.TrainConfig(epochs=3, scale=1 / 32))
    assert info.value.epoch == 0
    assert len(info.value.history) == 0


def test_stationary_fit_recovers_onsets(gdd_dataset, gdd_split):
    cfg = tr.TrainConfig(epochs=600, lr=0.05)
    res = tr.train("stationary_gd", gdd_dataset, gdd_split, cfg)
    assert mean_rmse(evaluate(res, gdd_split.train_records(gdd_dataset))) <= 1.0


def test_stationary_loss_decreases_at_tiny_lr(gdd_dataset, gdd_split):
    recs = gdd_split.train_records(gdd_dataset, "C00")
    _, hist = tr.train_stationary(gdd_dataset, recs, tr.TrainConfig(lr=1e-5), steps=10)
    assert np.all(np.diff(hist.loss) <= 0)


def test_physics_series_uses_label_scale(gdd_dataset, gdd_synthetic):
    st_params = tr.StationaryParams("gdd", {c: np.array(v) for c, v in gdd_synthetic.truth.items()})
    for r in gdd_dataset.select("WA"):
        np.testing.assert_array_equal(tr.physics_series(st_params, r), r.labels)


def test_result_round_trip(tmp_path, gdd_dataset, gdd_split):
    res = tr.train("dmc_mtl", gdd_dataset, gdd_split, tr.TrainConfig(epochs=1, scale=1 / 32))
    tr.save_result(res, tmp_path)
    back = tr.load_result(tmp_path)
    assert back.config == res.config
    assert back.weights.digest() == res.weights.digest()
    r = gdd_split.test_records(gdd_dataset)[0]
    np.testing.assert_array_equal(tr.predict_season(back, r).series, tr.predict_season(res, r).series)


def test_truth_parameters_give_zero_error(gdd_dataset, gdd_synthetic, gdd_split):
    st_params = tr.StationaryParams("gdd", {c: np.array(v) for c, v in gdd_synthetic.truth.items()})
    res = tr.TrainResult("stationary_gd", tr.TrainConfig(variant="stationary_gd"), None,
                         tr.TrainHistory(), stationary=st_params)
    assert mean_rmse(evaluate(res, gdd_dataset.records)) == 0.0
    pred = bp.run_season("gdd", st_params.params["C00"], gdd_dataset.records[0].temperature)
    assert pred.onsets == gdd_dataset.records[0].onsets
