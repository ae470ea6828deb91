import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from rul_uq.metrics import (
    CalibrationCurve,
    EvalRows,
    aggregate_runs,
    build_report,
    calibration_curve,
    compare_reports,
    entropy,
    export_curves,
    format_comparison,
    gaussian_cdf,
    group_aggregate,
    lifetime_bin_edges,
    lifetime_binned,
    miscalibration_area,
    mixture_nll_values,
    nll_metric,
    point_metrics,
    read_report,
    rmse_vs_confidence,
    rmsce,
    sharpness,
    summary_metrics,
    svg_line_chart,
    write_report,
)
from rul_uq.predictors import Prediction, PredictiveSampleSet, decompose


def rows_from(y, mu, var, unit_id=None, lifetime=None, samples=None):
    n = len(y)
    pred = decompose(samples) if samples is not None else Prediction(
        np.asarray(mu, float), np.zeros(n), np.asarray(var, float))
    return EvalRows(np.zeros(n, int) if unit_id is None else np.asarray(unit_id),
                    np.arange(n), np.linspace(0, 1, n) if lifetime is None else np.asarray(lifetime, float),
                    np.asarray(y, float), pred)


def random_rows(seed, n=200, n_pass=4, n_units=3):
    rng = np.random.default_rng(seed)
    mu = rng.normal(50, 10, size=(n_pass, n))
    var = rng.uniform(1, 20, size=(n_pass, n))
    samples = PredictiveSampleSet(mu, var)
    y = mu.mean(axis=0) + rng.normal(0, 4, size=n)
    return rows_from(y, None, None, unit_id=rng.integers(1, n_units + 1, size=n),
                     lifetime=rng.uniform(0, 1, size=n), samples=samples)


UNITS = {u: {"unit_id": u, "dataset_id": 1 + (u % 2), "flight_class": 1 + u % 3, "ood_flag": u == 3}
         for u in range(1, 4)}


# --- point metrics -----------------------------------------------------------------------------------


def test_point_metric_examples():
    assert point_metrics([3.0, 4.0], [3.0, 4.0]) == (0.0, 0.0)
    assert point_metrics([0.0, 0.0], [-1.0, 1.0]) == (1.0, 1.0)
    mae, rmse = point_metrics([0.0, 0.0], [0.0, 2.0])
    assert mae == 1.0 and rmse == pytest.approx(math.sqrt(2), rel=1e-15)


def test_point_metrics_reject_mismatched_or_empty_inputs():
    with pytest.raises(ValueError):
        point_metrics([1.0, 2.0], [1.0])
    with pytest.raises(ValueError, match="empty"):
        point_metrics([], [])


# --- likelihood --------------------------------------------------------------------------------------


def test_nll_modes_agree_for_a_single_pass():
    rng = np.random.default_rng(0)
    mu, var = rng.normal(size=(1, 30)), rng.uniform(0.2, 3, size=(1, 30))
    y = rng.normal(size=30)
    pred = decompose(PredictiveSampleSet(mu, var))
    assert nll_metric(y, pred, "moment") == pytest.approx(nll_metric(y, pred, "mixture"), rel=1e-13)


def test_moment_nll_of_a_standard_normal_at_its_mean():
    pred = Prediction(np.zeros(3), np.zeros(3), np.ones(3))
    assert nll_metric(np.zeros(3), pred) == pytest.approx(0.5 * math.log(2 * math.pi), rel=1e-15)


@settings(max_examples=40)
@given(st.integers(0, 10_000))
def test_mixture_nll_matches_a_direct_density_sum(seed):
    rng = np.random.default_rng(seed)
    n_pass, n = rng.integers(1, 6), rng.integers(1, 8)
    mu = rng.normal(0, 3, size=(n_pass, n))
    var = rng.uniform(0.1, 4, size=(n_pass, n))
    y = rng.normal(0, 3, size=n)
    dens = np.exp(-(y - mu) ** 2 / (2 * var)) / np.sqrt(2 * math.pi * var)
    oracle = -np.log(dens.mean(axis=0))
    np.testing.assert_allclose(mixture_nll_values(y, PredictiveSampleSet(mu, var)), oracle, rtol=1e-10, atol=1e-10)


def test_nll_mode_errors():
    pred = Prediction(np.zeros(2), np.zeros(2), np.ones(2))
    with pytest.raises(ValueError, match="sample set"):
        nll_metric(np.zeros(2), pred, "mixture")
    with pytest.raises(ValueError, match="unknown"):
        nll_metric(np.zeros(2), pred, "median")


# --- CDF and calibration ------------------------------------------------------------------------------


def test_cdf_examples_use_the_standard_deviation():
    np.testing.assert_allclose(gaussian_cdf([0.0, 1.0, -2.0], [0.0, 0.0, 0.0], [1.0, 1.0, 1.0]),
                               [0.5, 0.8413447460685429, 0.022750131948179195], rtol=1e-12)
    # sigma = 2: one unit above the mean is half a standard deviation, not a quarter
    assert gaussian_cdf([1.0], [0.0], [4.0])[0] == pytest.approx(norm.cdf(0.5), rel=1e-12)


def test_cdf_rejects_non_positive_variance():
    with pytest.raises(ValueError, match="strictly positive"):
        gaussian_cdf([0.0], [0.0], [0.0])


def test_calibration_curve_examples():
    curve = calibration_curve([0.1, 0.4, 0.6, 0.9], m=3)
    np.testing.assert_array_equal(curve.levels, [0.0, 0.5, 1.0])
    assert curve.observed[1] == 0.5
    zero = calibration_curve(np.zeros(10), m=11)
    np.testing.assert_array_equal(zero.observed, 1.0)


def test_uniform_grid_of_pit_values_tracks_the_diagonal():
    t = 1000
    pit = (np.arange(t) + 0.5) / t
    curve = calibration_curve(pit, m=101)
    assert np.max(np.abs(curve.observed - curve.levels)) <= 1.0 / t


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50), st.integers(2, 30))
def test_calibration_curve_is_monotone_and_ends_at_one(pit, m):
    curve = calibration_curve(pit, m)
    assert np.all(np.diff(curve.observed) >= 0)
    assert curve.observed[-1] == 1.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=50))
def test_rmsce_ignores_row_order(pit):
    a = rmsce(calibration_curve(pit, 21))
    b = rmsce(calibration_curve(pit[::-1], 21))
    assert a == b


def test_calibration_curve_errors():
    with pytest.raises(ValueError):
        calibration_curve([0.5], m=1)
    with pytest.raises(ValueError):
        calibration_curve([], m=5)
    with pytest.raises(ValueError):
        calibration_curve([1.2], m=5)


def test_rmsce_examples():
    levels = np.linspace(0, 1, 11)
    assert rmsce(CalibrationCurve(levels, levels.copy())) == 0.0
    three = calibration_curve(np.zeros(5), m=3)
    assert rmsce(three) == pytest.approx(math.sqrt((1 + 0.25 + 0) / 3), rel=1e-15)
    assert rmsce(three) == pytest.approx(0.6455, abs=5e-5)
    fine = np.linspace(0, 1, 100_001)
    assert rmsce(CalibrationCurve(fine, 1 - fine)) == pytest.approx(math.sqrt(1 / 3), rel=1e-4)


def test_miscalibration_area_examples():
    levels = np.linspace(0, 1, 101)
    assert miscalibration_area(CalibrationCurve(levels, levels.copy())) == 0.0
    assert miscalibration_area(calibration_curve(np.zeros(7), m=101)) == pytest.approx(0.5, rel=1e-12)
    # |1 - 2p| is piecewise linear with its kink on the grid, so the trapezoid rule is exact
    assert miscalibration_area(CalibrationCurve(levels, 1 - levels)) == pytest.approx(0.5, rel=1e-12)


def test_well_specified_predictor_is_calibrated():
    rng = np.random.default_rng(2024)
    t = 10_000
    mu = rng.normal(0, 5, size=t)
    var = rng.uniform(0.5, 9, size=t)
    y = rng.normal(mu, np.sqrt(var))
    curve = calibration_curve(gaussian_cdf(y, mu, var), m=101)
    assert rmsce(curve) < 0.02
    assert miscalibration_area(curve) < 0.015


# --- sharpness and entropy ------------------------------------------------------------------------------


def test_sharpness_examples():
    assert sharpness(np.full(5, 9.0)) == 3.0
    assert sharpness([1.0, 3.0]) == pytest.approx(math.sqrt(2), rel=1e-15)
    var = np.random.default_rng(0).uniform(0.1, 5, 20)
    assert sharpness(var * 2.5**2) == pytest.approx(2.5 * sharpness(var), rel=1e-14)


def test_entropy_examples():
    assert entropy([1 / (2 * math.pi * math.e)])[0] == pytest.approx(0.0, abs=1e-15)
    var = np.array([0.3, 2.0, 11.0])
    np.testing.assert_allclose(entropy(4 * var) - entropy(var), math.log(2), rtol=1e-13)
    grid = np.geomspace(1e-6, 1e6, 200)
    assert np.all(np.diff(entropy(grid)) > 0)


def test_entropy_sharpness_and_variance_are_consistent():
    var = np.random.default_rng(1).uniform(0.1, 30, 100)
    np.testing.assert_allclose(entropy(var), 0.5 * np.log(2 * math.pi * math.e * var), rtol=1e-15)
    assert sharpness(var) ** 2 == pytest.approx(var.mean(), rel=1e-13)


# --- RMSE versus confidence -------------------------------------------------------------------------------


def test_homoscedastic_predictions_give_a_flat_curve():
    rng = np.random.default_rng(3)
    n = 20_000
    y = rng.normal(0, 2, size=n)
    var = np.full(n, 4.0) * (1 + 1e-9 * rng.uniform(size=n))  # break ties at random
    curve = rmse_vs_confidence(y, np.zeros(n), var, levels=11)
    _, rmse = curve.valid()
    rmse = rmse[1:]  # the smallest retained set (10%) is the noisiest
    assert np.max(np.abs(rmse - 2.0)) < 0.1


def test_errors_proportional_to_sigma_give_a_strictly_decreasing_curve():
    n = 2000
    sigma = np.linspace(0.5, 5.0, n)
    y = sigma * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    curve = rmse_vs_confidence(y, np.zeros(n), sigma**2, levels=21)
    conf, rmse = curve.valid()
    # entries run from the tightest threshold to the loosest, so confidence falls and RMSE rises
    assert np.all(np.diff(conf) < 0)
    assert np.all(np.diff(rmse) > 0)
    assert curve.spearman() == pytest.approx(-1.0)


def test_confidence_curve_endpoints():
    rng = np.random.default_rng(4)
    y, mu, var = rng.normal(size=50), rng.normal(size=50), rng.uniform(1, 2, 50)
    curve = rmse_vs_confidence(y, mu, var, levels=6)
    assert curve.retained_fraction[-1] == 1.0
    assert curve.rmse[-1] == pytest.approx(point_metrics(y, mu)[1], rel=1e-14)
    assert curve.rmse[0] is None  # empty retained set is recorded as a gap
    with pytest.raises(ValueError):
        rmse_vs_confidence(y, mu, var, levels=1)


# --- grouping and lifetime bins ------------------------------------------------------------------------------


def _same_metrics(a, b, rtol=1e-12):
    assert a.keys() == b.keys()
    for k in a:
        if a[k] is None:
            assert b[k] is None
        else:
            assert a[k] == pytest.approx(b[k], rel=rtol, abs=1e-14), k


def test_single_group_equals_overall():
    rows = random_rows(0, n_units=1)
    groups = group_aggregate(rows, "unit", UNITS)
    assert list(groups) == ["1"]
    _same_metrics(groups["1"], summary_metrics(rows))


def test_identical_groups_give_identical_rows():
    base = random_rows(1, n=60, n_units=1)
    both = EvalRows(np.concatenate([base.unit_id, base.unit_id + 1]), np.tile(base.cycle, 2),
                    np.tile(base.lifetime_fraction, 2), np.tile(base.y, 2),
                    Prediction(np.tile(base.pred.mu, 2), np.tile(base.pred.var_epistemic, 2),
                               np.tile(base.pred.var_aleatoric, 2),
                               samples=PredictiveSampleSet(np.tile(base.pred.samples.mu, 2),
                                                           np.tile(base.pred.samples.var, 2))))
    groups = group_aggregate(both, "unit", UNITS)
    _same_metrics(groups["1"], groups["2"])


@pytest.mark.parametrize("key", ["unit", "dataset", "flight_class"])
def test_groups_pool_rows_and_their_union_is_the_whole(key):
    rows = random_rows(2)
    groups = group_aggregate(rows, key, UNITS)
    assert sum(g["n"] for g in groups.values()) == len(rows)
    # pooling means the squared-error totals add up across groups
    sse = sum(g["n"] * g["rmse"] ** 2 for g in groups.values())
    assert sse == pytest.approx(len(rows) * summary_metrics(rows)["rmse"] ** 2, rel=1e-12)


def test_unknown_group_key_is_an_error():
    with pytest.raises(ValueError, match="unknown group key"):
        group_aggregate(random_rows(3), "engine_type", UNITS)
    with pytest.raises(ValueError, match="manifest"):
        group_aggregate(random_rows(3), "dataset", {1: UNITS[1]})


def test_one_lifetime_bin_is_the_overall_view():
    rows = random_rows(5)
    (only,) = lifetime_binned(rows, bins=1)
    s = summary_metrics(rows)
    assert only["n"] == len(rows)
    assert (only["rmse"], only["sharpness"], only["rmsce"], only["nll"]) == (
        s["rmse"], s["sharpness"], s["rmsce"], s["nll_moment"])


def test_error_shrinking_over_life_gives_decreasing_bin_rmse():
    n = 5000
    lf = np.linspace(0, 1, n)
    err = (2.0 - 1.9 * lf) * np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
    rows = rows_from(err, np.zeros(n), np.ones(n), lifetime=lf)
    rmse = [b["rmse"] for b in lifetime_binned(rows, bins=10)]
    assert all(a > b for a, b in zip(rmse, rmse[1:]))


def test_bin_edges_cover_the_unit_interval():
    for bins in (1, 2, 7, 10):
        edges = lifetime_bin_edges(bins)
        assert edges[0] == 0.0 and edges[-1] == 1.0 and len(edges) == bins + 1
        assert np.all(np.diff(edges) > 0)
    with pytest.raises(ValueError):
        lifetime_bin_edges(0)


def test_empty_lifetime_bin_is_null():
    rows = rows_from(np.zeros(4), np.zeros(4), np.ones(4), lifetime=[0.0, 0.1, 0.95, 1.0])
    bins = lifetime_binned(rows, bins=4)
    assert [b["n"] for b in bins] == [2, 0, 0, 2]
    assert bins[1]["rmse"] is None and bins[2]["nll"] is None


# --- reports ---------------------------------------------------------------------------------------------


def test_report_round_trip_and_curve_export(tmp_path):
    rows = random_rows(6)
    report = build_report("bnn-lrt", 3, "abc", rows, UNITS, m=11, confidence_levels=5, bins=4)
    path = tmp_path / "r.json"
    write_report(path, report)
    back = read_report(path)
    assert back["overall"] == pytest.approx(report["overall"])
    assert back["method"] == "bnn-lrt" and back["seed"] == 3
    assert set(back["per_unit"]) == {"1", "2", "3"}
    assert back["rmse_vs_confidence"]["rmse"][0] is None
    assert back["mean_entropy_by_ood"]["ood"] is not None
    json.loads(path.read_text())  # strictly valid JSON
    cal, conf = export_curves(back, tmp_path, "x")
    assert cal.read_text().splitlines()[0] == "level,observed"
    assert len(cal.read_text().splitlines()) == 12
    assert conf.read_text().splitlines()[1].endswith(",")


def test_report_version_is_checked(tmp_path):
    path = tmp_path / "r.json"
    path.write_text(json.dumps({"format_version": 99}))
    with pytest.raises(ValueError, match="format_version"):
        read_report(path)


def _fake_report(method, seed, fingerprint, nll):
    return {"method": method, "seed": seed, "dataset_fingerprint": fingerprint,
            "overall": {"mae": 1.0, "rmse": 2.0, "nll_moment": nll, "nll_mixture": None, "rmsce": 0.1,
                        "miscalibration_area": 0.05, "sharpness": 3.0, "mean_entropy": 2.0}}


def test_compare_refuses_reports_from_different_datasets():
    with pytest.raises(ValueError, match="different datasets"):
        compare_reports([_fake_report("hnn", 0, "a", 1.0), _fake_report("mcd", 0, "b", 1.0)])


def test_compare_ranks_methods_and_reports_standard_deviation():
    reports = [_fake_report("hnn", 0, "f", 3.0), _fake_report("hnn", 1, "f", 5.0),
               _fake_report("mcd", 0, "f", 2.0)]
    rows = compare_reports(reports)
    assert [r["method"] for r in rows] == ["mcd", "hnn"]
    assert rows[1]["metrics"]["nll_moment"] == {"mean": 4.0, "std": pytest.approx(math.sqrt(2)), "n": 2}
    assert rows[0]["metrics"]["nll_moment"]["std"] == 0.0
    assert rows[0]["metrics"]["nll_mixture"]["mean"] is None
    assert "mean +- sd" in format_comparison(rows)


def test_aggregate_of_nothing_is_an_error():
    with pytest.raises(ValueError):
        aggregate_runs([])


def test_svg_export(tmp_path):
    path = tmp_path / "c.svg"
    svg_line_chart({"a": [(0, 1), (1, None), (2, 3)]}, path, title="t")
    text = path.read_text()
    assert text.startswith("<svg") and "polyline" in text
    with pytest.raises(ValueError):
        svg_line_chart({"a": [(0, None)]}, path)
