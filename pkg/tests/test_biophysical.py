import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dmcmtl import autodiff as ad
from dmcmtl import biophysical as bp
from dmcmtl.biophysical import FERGUSON_SPACE, GDD_SPACE

GDD_MID = GDD_SPACE.midpoint()
FERG = FERGUSON_SPACE.vector({"HCINIT": -10, "HCMIN": -3, "HCMAX": -30, "TENDO": 5, "TECO": 5,
                              "ENACCLIM": 0.2, "ECACCLIM": 0.2, "ENDEACCLIM": 0.2,
                              "ECDEACCLIM": 0.2, "ECOBOUND": -300})


def seasonal_temps(n=250, seed=0):
    rng = np.random.default_rng(seed)
    day = np.arange(n)
    return 12 - 12 * np.cos(2 * np.pi * day / 365) + rng.normal(0, 3, n)


# ---------------------------------------------------------------- parameter spaces

def test_space_shapes_and_frozen_rates():
    assert GDD_SPACE.k == 7 and FERGUSON_SPACE.k == 10
    frozen = [p.name for p in FERGUSON_SPACE.params if p.frozen]
    assert frozen == ["ENACCLIM", "ECACCLIM", "ENDEACCLIM", "ECDEACCLIM"]


def test_rescale_examples():
    z = np.zeros(7)
    z[0] = -1
    z[1] = 1
    v = bp.rescale_params(z, GDD_SPACE).value
    assert v[0] == 0.0
    assert v[1] == 45.0
    assert v[GDD_SPACE.index("TSUM2")] == 550.0


def test_rescale_rejects_out_of_range():
    with pytest.raises(ValueError):
        bp.rescale_params(np.full(7, 1.01), GDD_SPACE)
    with pytest.raises(ValueError):
        bp.rescale_params(np.zeros(6), GDD_SPACE)


@given(arrays(np.float64, 7, elements=st.floats(-1, 1)))
def test_rescale_normalize_round_trip(z):
    v = bp.rescale_params(z, GDD_SPACE).value
    assert GDD_SPACE.contains(v)
    np.testing.assert_allclose(bp.normalize_params(v, GDD_SPACE), z, atol=1e-12)


def test_rescale_is_monotone_per_component():
    grid = np.linspace(-1, 1, 11)
    for i in range(GDD_SPACE.k):
        z = np.zeros((11, 7))
        z[:, i] = grid
        assert np.all(np.diff(bp.rescale_params(z, GDD_SPACE).value[:, i]) > 0)


def test_space_save_load(tmp_path):
    FERGUSON_SPACE.save(tmp_path / "f.json")
    assert bp.ParameterSpace.load(tmp_path / "f.json") == FERGUSON_SPACE


def test_space_rejects_inverted_range():
    with pytest.raises(ValueError):
        bp.ParameterSpace("bad", [bp.Param("X", 2.0, 1.0)])


# ---------------------------------------------------------------- GDD

@pytest.mark.parametrize("t, expected", [(25.0, 15.0), (10.0, 0.0), (5.0, 0.0), (50.0, 30.0)])
def test_daily_increment(t, expected):
    assert bp.gdd_daily_increment(t, 10.0, 30.0).value == expected


THRESH = np.array([50.0, 200.0, 100.0, 300.0, 400.0])


def test_gdd_step_fractional_progress():
    state = bp.PhenologyState(2, ad.Tensor(40.0))
    state, y = bp.gdd_step(state, 0.0, THRESH)
    assert state.stage == 2
    assert y.value == pytest.approx(2.4)


def test_gdd_step_carries_excess_over():
    state = bp.PhenologyState(2, ad.Tensor(95.0))
    state, _ = bp.gdd_step(state, 10.0, THRESH)
    assert state.stage == 3
    assert state.accumulator.value == pytest.approx(5.0)


def test_gdd_step_rejects_nonpositive_threshold():
    with pytest.raises(ValueError):
        bp.gdd_step(bp.PhenologyState.initial(), 1.0, np.array([0.0, 1, 1, 1, 1]))


def test_zero_increments_stay_dormant():
    p = GDD_MID.copy()
    temps = np.full(60, p[0])
    pred = bp.run_season("gdd", p, temps)
    assert np.all(pred.stages == 0)
    assert np.all(pred.state.value == 0)
    assert pred.onsets == (None, None, None)


def loop_rollout(p, temps):
    state, ys, stages = bp.PhenologyState.initial(), [], []
    for t in range(len(temps)):
        inc = bp.gdd_daily_increment(temps[t], p[t, 0], p[t, 1])
        state, y = bp.gdd_step(state, inc, p[t, 2:])
        ys.append(y)
        stages.append(state.stage)
    return ad.stack(ys), np.array(stages)


@pytest.mark.parametrize("seed", range(5))
def test_vectorized_rollout_matches_daily_steps(seed):
    rng = np.random.default_rng(seed)
    temps = seasonal_temps(200, seed)
    z = rng.uniform(-0.6, 0.6, size=(200, 7))
    p_val = bp.rescale_params(z, GDD_SPACE).value

    p1 = ad.Tensor(p_val.copy(), requires_grad=True)
    fast = bp.run_season("gdd", p1, temps)
    p2 = ad.Tensor(p_val.copy(), requires_grad=True)
    slow, stages = loop_rollout(p2, temps)

    np.testing.assert_array_equal(fast.stages, stages)
    np.testing.assert_allclose(fast.state.value, slow.value, atol=1e-12)
    w = np.linspace(0.5, 1.5, 200)
    ad.backward(ad.sum(ad.mul(fast.state, w)))
    ad.backward(ad.sum(ad.mul(slow, w)))
    np.testing.assert_allclose(p1.grad, p2.grad, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(z=arrays(np.float64, (120, 7), elements=st.floats(-1, 1)),
       noise=arrays(np.float64, 120, elements=st.floats(-15, 15)))
def test_gdd_stage_is_monotone_for_daily_parameters(z, noise):
    pred = bp.run_season("gdd", bp.rescale_params(z, GDD_SPACE), 15 + noise)
    assert np.all(np.diff(pred.stages) >= 0)


@settings(max_examples=40, deadline=None)
@given(z=arrays(np.float64, 7, elements=st.floats(-1, 1)),
       noise=arrays(np.float64, 120, elements=st.floats(-15, 15)))
def test_gdd_development_is_monotone_for_fixed_parameters(z, noise):
    pred = bp.run_season("gdd", bp.rescale_params(z, GDD_SPACE), 15 + noise)
    assert np.all(np.diff(pred.stages) >= 0)
    assert np.all(np.diff(pred.state.value) >= -1e-12)


def test_development_can_dip_when_threshold_grows():
    # the fraction acc / theta falls if theta rises faster than acc
    p = np.tile(GDD_MID, (3, 1))
    p[2, 2] = GDD_SPACE.hi[2]
    y = bp.run_season("gdd", p, np.full(3, GDD_MID[0] + 5)).state.value
    assert y[2] < y[1]


def test_gdd_rollout_gradient_matches_finite_differences():
    temps = seasonal_temps(200, 3)
    base = GDD_MID.copy()
    stages = bp.run_season("gdd", base, temps).stages

    def f(p):
        return ad.sum(bp.run_season("gdd", p, temps).state)

    # perturbations must not move any transition day
    for i in range(7):
        for s in (-1e-5, 1e-5):
            q = base.copy()
            q[i] += s
            assert np.array_equal(bp.run_season("gdd", q, temps).stages, stages)
    assert ad.grad_check(f, base) < 1e-4


def test_full_season_onsets_match_generator(gdd_synthetic, gdd_dataset):
    for record in gdd_dataset.select(region="WA"):
        truth = gdd_synthetic.truth[record.cultivar]
        pred = bp.run_season("gdd", truth, record.temperature)
        assert pred.onsets == record.onsets
        np.testing.assert_array_equal(bp.stage_to_label(pred.stages), record.labels)


# ---------------------------------------------------------------- onsets

def test_extract_onsets_examples():
    assert bp.extract_onsets([0, 0, 2, 2, 3, 4]) == (2, 4, 5)
    assert bp.extract_onsets([0, 0, 0]) == (None, None, None)
    with pytest.raises(ValueError):
        bp.extract_onsets([0, 3, 1])
    assert bp.extract_onsets([0, 3, 1], strict=False) == (1, 1, None)


def test_stage_to_label_collapses_chain():
    np.testing.assert_array_equal(bp.stage_to_label([0, 1, 2, 3, 4, 5]), [0, 0, 2, 3, 4, 4])


# ---------------------------------------------------------------- Ferguson

def test_ferguson_acclimation_example():
    state = bp.ColdHardinessState(ad.Tensor(-10.0))
    _, h = bp.ferguson_step(state, 0.0, FERG)
    # hardening room is (H - HCMAX) / (HCMIN - HCMAX) = 20/27
    assert h.value == pytest.approx(-10.0 - 0.2 * 5 * 20 / 27)


def test_ferguson_saturates_at_hcmax():
    state = bp.ColdHardinessState(ad.Tensor(-30.0))
    _, h = bp.ferguson_step(state, 0.0, FERG)
    assert h.value == -30.0


def test_ferguson_deacclimation_stalls_at_hcmin():
    state = bp.ColdHardinessState(ad.Tensor(-3.0))
    _, h = bp.ferguson_step(state, 20.0, FERG)
    assert h.value == -3.0


def test_ferguson_rejects_inverted_bounds():
    p = FERG.copy()
    p[1], p[2] = -30, -3
    with pytest.raises(ValueError):
        bp.ferguson_step(bp.ColdHardinessState(ad.Tensor(-10.0)), 0.0, p)


def test_eco_dormancy_triggers_once():
    temps = np.concatenate([np.full(40, 0.0), np.full(40, 15.0), np.full(40, -5.0)])
    state = bp.ColdHardinessState(ad.Tensor(-10.0))
    flags, chill = [], []
    for t in temps:
        state, _ = bp.ferguson_step(state, t, FERG)
        flags.append(state.eco)
        chill.append(state.chill_sum)
    first = int(np.argmax(np.array(chill) <= -300))
    assert not any(flags[:first])
    assert all(flags[first:])


@settings(max_examples=30, deadline=None)
@given(z=arrays(np.float64, (80, 10), elements=st.floats(-1, 1)),
       temps=arrays(np.float64, 80, elements=st.floats(-25, 30)))
def test_ferguson_rollout_stays_in_bounds(z, temps):
    p = bp.rescale_params(z, FERGUSON_SPACE).value
    h = bp.run_season("ferguson", p, temps).state.value
    hcmin, hcmax = p[:, 1], p[:, 2]
    assert np.all(h <= hcmin + 1e-12) and np.all(h >= hcmax - 1e-12)


def test_ferguson_frozen_rates_get_zero_gradient():
    z = ad.Tensor(np.zeros((30, 10)), requires_grad=True)
    p = bp.rescale_params(z, FERGUSON_SPACE)
    ad.backward(ad.sum(bp.run_season("ferguson", p, seasonal_temps(30)).state))
    frozen = [FERGUSON_SPACE.index(n) for n in ("ENACCLIM", "ECACCLIM", "ENDEACCLIM", "ECDEACCLIM")]
    assert np.all(z.grad[:, frozen] == 0)
    assert np.any(z.grad != 0)


def test_ferguson_uses_hcinit_on_day_zero_only():
    temps = seasonal_temps(20)
    p = np.tile(FERG, (20, 1))
    q = p.copy()
    q[1:, 0] = 3.0
    a = bp.run_season("ferguson", p, temps).state.value
    b = bp.run_season("ferguson", q, temps).state.value
    np.testing.assert_array_equal(a, b)


def test_run_season_errors():
    with pytest.raises(ValueError):
        bp.run_season("gdd", GDD_MID, np.array([]))
    with pytest.raises(ValueError):
        bp.run_season("wofost", GDD_MID, np.ones(3))
    with pytest.raises(ValueError):
        bp.run_season("gdd", np.ones((4, 7)), np.ones(3))
