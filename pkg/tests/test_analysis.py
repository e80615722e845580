from __future__ import annotations

import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kubesim.analysis import (
    Experiment,
    chi2_sf,
    compare,
    kruskal_wallis,
    parse_filter,
    scenario_variability,
    success_std,
    write_aggregates_csv,
    write_analysis_csv,
    write_densities_csv,
)
from kubesim.engine import SeededRng
from kubesim.scenario import preset
from oracles import chi2_sf_series, hand_h, permutation_p, population_std, variance_form_h


def test_separated_triples():
    r = kruskal_wallis([[1, 2, 3], [4, 5, 6]])
    assert r.H == pytest.approx(12 / 42 * (12 + 75) - 21, abs=1e-12)
    assert round(r.H, 3) == 3.857
    assert r.p == pytest.approx(0.0495, abs=5e-5)
    assert r.dof == 1 and not r.tie_corrected


def test_exact_permutation_p_of_separated_triples():
    # the chi-square approximation is close to, but not equal to, the exact null
    assert permutation_p([[1, 2, 3], [4, 5, 6]]) == pytest.approx(0.1)


def test_identical_samples():
    r = kruskal_wallis([[5, 5], [5, 5, 5]])
    assert (r.H, r.p) == (0.0, 1.0)


@pytest.mark.parametrize("groups", [[[1, 2, 3]], [[], [1, 2]], [[1], [2]]])
def test_invalid_inputs(groups):
    with pytest.raises(ValueError):
        kruskal_wallis(groups)


def test_nonfinite_rejected():
    with pytest.raises(ValueError):
        kruskal_wallis([[1, math.nan], [2, 3]])


def test_ties_match_both_oracles():
    groups = [[1, 1, 2, 3], [2, 2, 4], [3, 5, 5, 5]]
    r = kruskal_wallis(groups)
    assert r.tie_corrected
    assert r.H == pytest.approx(hand_h(groups), abs=1e-10)
    assert r.H == pytest.approx(variance_form_h(groups), abs=1e-10)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.integers(min_value=0, max_value=5), min_size=1, max_size=6), min_size=2, max_size=4)
       .filter(lambda gs: sum(map(len, gs)) >= 3))
def test_h_matches_oracles_on_random_tied_data(groups):
    r = kruskal_wallis(groups)
    assert r.H == pytest.approx(hand_h(groups), abs=1e-10)
    assert r.H == pytest.approx(variance_form_h(groups), abs=1e-10)
    assert r.H >= 0 and 0 <= r.p <= 1


@settings(max_examples=100, deadline=None)
@given(st.lists(st.lists(st.integers(min_value=-100, max_value=100), min_size=1, max_size=8),
                min_size=2, max_size=4).filter(lambda gs: sum(map(len, gs)) >= 3))
def test_h_is_invariant_under_monotone_transforms(groups):
    base = kruskal_wallis(groups).H
    mapped = [[math.atan(v / 50.0) * 7 + 3 for v in g] for g in groups]
    cubed = [[v ** 3 for v in g] for g in groups]
    assert kruskal_wallis(mapped).H == pytest.approx(base, abs=1e-9)
    assert kruskal_wallis(cubed).H == pytest.approx(base, abs=1e-9)


@pytest.mark.parametrize("dof", range(1, 11))
def test_chi2_tail_matches_series(dof):
    for x in np.linspace(0.0, 50.0, 101):
        assert chi2_sf(float(x), dof) == pytest.approx(chi2_sf_series(float(x), dof), abs=1e-8)


def test_chi2_edge_cases():
    assert chi2_sf(0.0, 3) == 1.0
    with pytest.raises(ValueError):
        chi2_sf(1.0, 0)


def test_null_comparisons_have_calibrated_size():
    rng = SeededRng(2024, "null")
    small = 0
    for _ in range(200):
        data = [rng.gauss(0, 1) for _ in range(60)]
        small += kruskal_wallis([data[:30], data[30:]]).p < 0.05
    assert 0.01 <= small / 200 <= 0.10


def test_variability_closed_forms():
    assert success_std([100] * 50) == 0.0
    trace = [90, 110] * 30
    assert success_std(trace) == pytest.approx(10.0)
    assert success_std(trace) == pytest.approx(population_std(trace))


def experiment(eid, name, successes, spec=None):
    spec = spec or preset("paper-native", name=name)
    frames = [{"second": i, "successes": s} for i, s in enumerate(successes)]
    return Experiment(eid, name, spec, frames)


def test_scenario_variability_reports_both_averages():
    exps = [experiment("1", "a", [90, 110]), experiment("2", "a", [100, 100, 100, 100]),
            experiment("3", "b", [5, 5])]
    aggs = {a.scenario_name: a for a in scenario_variability(exps)}
    a = aggs["a"]
    assert a.n_experiments == 2
    assert a.per_experiment_stds == [10.0, 0.0]
    assert a.std_success_rate == 5.0
    assert a.mean_success_rate == pytest.approx(100.0)
    assert a.mean_of_experiment_means == pytest.approx(100.0)
    assert aggs["b"].std_success_rate == 0.0


def test_compare_direction_and_filters():
    native = preset("paper-native")
    mesh = preset("paper-istio")
    exps = [experiment(f"n{i}", "paper-native", [200 + i] * 20 + [190] * 5, native) for i in range(3)]
    exps += [experiment(f"m{i}", "paper-istio", [150 + i] * 25, mesh) for i in range(3)]
    c = compare(exps, parse_filter("dataplane=native"), parse_filter("dataplane=mesh"))
    assert c.higher == "a"
    assert c.test.p < 0.05
    assert c.n_experiments_a == c.n_experiments_b == 3
    with pytest.raises(ValueError, match="overlap"):
        compare(exps, parse_filter("pods=10"), parse_filter("dataplane=mesh"))
    with pytest.raises(ValueError, match="no experiments"):
        compare(exps, parse_filter("pods=20"), parse_filter("dataplane=mesh"))


def test_compare_of_disjoint_halves_is_usually_null():
    rng = SeededRng(7, "halves")
    exps = [experiment(f"e{i}", f"s{i}", [round(rng.gauss(100, 5)) for _ in range(100)],
                       preset("paper-native", name=f"s{i}")) for i in range(8)]
    c = compare(exps, parse_filter("scenario=s0,pods=10"), parse_filter("scenario=s1"))
    assert c.test.p > 0.05


def test_parse_filter_errors():
    with pytest.raises(ValueError):
        parse_filter("")
    with pytest.raises(ValueError):
        parse_filter("colour=red")
    with pytest.raises(ValueError):
        parse_filter("pods")


def test_csv_outputs(tmp_path):
    exps = [experiment("1", "a", [1, 2, 3]), experiment("2", "b", [4, 5, 6])]
    aggs = scenario_variability(exps)
    write_aggregates_csv(tmp_path / "agg.csv", aggs)
    rows = list(csv.DictReader(open(tmp_path / "agg.csv")))
    assert [r["scenario_name"] for r in rows] == ["a", "b"]
    c = compare(exps, parse_filter("scenario=a"), parse_filter("scenario=b"))
    write_analysis_csv(tmp_path / "an.csv", [c])
    row = next(csv.DictReader(open(tmp_path / "an.csv")))
    assert float(row["H"]) == pytest.approx(3.857, abs=1e-3)
    assert {"group_a", "group_b", "metric", "dof", "p", "mean_a", "mean_b"} <= set(row)
    assert write_densities_csv(tmp_path / "d.csv", exps) == 6
    assert next(csv.reader(open(tmp_path / "d.csv"))) == ["scenario", "second", "successes"]
