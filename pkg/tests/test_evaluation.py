import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dmcmtl import evaluation as ev


def test_phenology_rmse_examples():
    assert ev.phenology_rmse((100, 150, 200), (102, 148, 206)) == pytest.approx(math.sqrt(44 / 3))
    assert ev.phenology_rmse((100, 150, 200), (100, 150, 200)) == 0.0


def test_missing_stage_counts_at_window_end():
    # veraison never reached: error is 249 - 200
    assert ev.phenology_rmse((100, 150, None), (100, 150, 200), window_end=249) == \
        pytest.approx(math.sqrt(49 ** 2 / 3))
    with pytest.raises(ValueError):
        ev.phenology_rmse((100, None, None), (100, 150, 200))


@given(st.lists(st.integers(-30, 30), min_size=3, max_size=3))
def test_rmse_is_symmetric_in_sign(errs):
    obs = np.array([100, 150, 200])
    plus = ev.phenology_rmse(tuple(obs + errs), tuple(obs))
    minus = ev.phenology_rmse(tuple(obs - errs), tuple(obs))
    assert plus == pytest.approx(minus)


def test_series_rmse():
    assert ev.series_rmse([1, 2, 3], [1, 9, 5], [1, 0, 1]) == pytest.approx(math.sqrt(2))
    with pytest.raises(ValueError):
        ev.series_rmse([1], [1], [0])


@pytest.mark.parametrize("stages, days", [
    ([0, 0, 2, 3, 4], []),
    ([3, 4, 3, 4], [1]),
    ([0, 2, 1, 3, 2, 4], [1, 3]),
    ([5], []),
])
def test_consistency_audit_locations(stages, days):
    audit = ev.consistency_audit(stages)
    assert audit.days == days and audit.violations == len(days)


def season(cultivar, errors, season_id=0):
    return ev.SeasonEval(cultivar, season_id, "WA", tuple(float(e) for e in errors))


def test_cultivar_rmse_pools_stages_and_seasons():
    evals = [season("A", (1, 1, 1), 0), season("A", (3, 3, 3), 1), season("B", (2, 2, 2))]
    per = ev.cultivar_rmse(evals)
    assert per["A"] == pytest.approx(math.sqrt(5))
    assert per["B"] == 2.0
    assert ev.mean_rmse(evals) == pytest.approx((math.sqrt(5) + 2) / 2)


def test_cultivar_rmse_is_order_free():
    evals = [season("A", (1, -2, 4), 0), season("A", (0, 3, 5), 1)]
    assert ev.cultivar_rmse(evals) == ev.cultivar_rmse(evals[::-1])


def test_per_stage_error():
    evals = [season("A", (1, 2, 3)), season("B", (3, 2, 1))]
    out = ev.per_stage_error(evals)
    assert out["A"] == {"budbreak": 1.0, "bloom": 2.0, "veraison": 3.0}
    assert out["all"]["budbreak"] == pytest.approx(math.sqrt(5))


def test_threshold_curve():
    np.testing.assert_allclose(ev.threshold_curve([1.0, 2.0, 3.0], [0.5, 2.0, 3.0]), [0, 2 / 3, 1])
    with pytest.raises(ValueError):
        ev.threshold_curve([], [1.0])


@given(st.lists(st.floats(0, 50), min_size=1, max_size=30))
def test_threshold_curve_is_a_cdf(rmses):
    curve = ev.threshold_curve(rmses, np.arange(1, 21))
    assert np.all((curve >= 0) & (curve <= 1))
    assert np.all(np.diff(curve) >= 0)


def test_aggregate_seeds():
    s = ev.aggregate_seeds([7.0, 9.0])
    assert (s.mean, s.n) == (8.0, 2)
    assert s.std == pytest.approx(math.sqrt(2))
    same = ev.aggregate_seeds([3.5, 3.5, 3.5])
    assert same.mean == 3.5 and same.std == 0.0
    with pytest.raises(ValueError):
        ev.aggregate_seeds([1.0])


def test_paired_t_test():
    degenerate = ev.paired_t_test([2, 2, 2, 2, 2], [1, 1, 1, 1, 1])
    assert degenerate.degenerate and degenerate.t == math.inf and not degenerate.significant
    res = ev.paired_t_test([1.0, 2.0, 3.0, 4.5], [1.5, 2.0, 3.5, 5.5])
    d = np.array([-0.5, 0.0, -0.5, -1.0])
    assert res.t == pytest.approx(d.mean() / (d.std(ddof=1) / 2))
    assert not res.degenerate


def test_report_csv_round_trip(tmp_path):
    evals = [season("A", (1, 2, 3)), season("B", (0, 0, 1))]
    rows = ev.report_rows("dmc_mtl", 0, evals)
    path = ev.write_csv(tmp_path / "r.csv", rows, ev.REPORT_COLUMNS)
    back = ev.read_csv(path)
    assert [float(r["rmse"]) for r in back] == [r["rmse"] for r in rows]
    table, text = ev.summary_table(back + [dict(r, seed=1) for r in back])
    overall = [t for t in table if t["cultivar"] == "all"][0]
    assert overall["n"] == 2 and overall["std"] == 0.0
    assert "dmc_mtl" in text


def test_season_rows_flatten_errors():
    rows = ev.season_rows([season("A", (1, 2, 3))])
    assert rows[0]["veraison_error"] == 3.0
    assert rows[0]["rmse"] == pytest.approx(math.sqrt(14 / 3))
