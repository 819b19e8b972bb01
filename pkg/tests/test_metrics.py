import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import feasible_return_oracle, time_to_feasible_oracle
from safecoord.metrics import (
    EvalCheckpoint,
    MetricsReport,
    episodic_aggregate,
    feasible_indicator,
    feasible_return,
    fmt,
    peak_cost,
    read_checkpoints_csv,
    summarize,
    time_to_feasible,
    violation_rate,
    write_checkpoints_csv,
)


def ck(step, r, c):
    return EvalCheckpoint(step, r, c)


# -- aggregation --------------------------------------------------------------


def test_episodic_aggregate_example():
    R, C = episodic_aggregate([[1, 3], [2, 4]], [[0, 0], [0, 0]])
    assert R == 5.0 and C == 0.0


def test_episodic_aggregate_single_agent_is_plain_sum():
    R, _ = episodic_aggregate([[1.5], [2.0], [-0.5]], np.zeros((3, 1)))
    assert R == 3.0


def test_episodic_aggregate_rejects_ragged():
    with pytest.raises(ValueError):
        episodic_aggregate([[1, 2], [3]], [[0, 0], [0]])
    with pytest.raises(ValueError):
        episodic_aggregate(np.zeros((3, 2)), np.zeros((3, 1)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(1, 5), st.floats(-10, 10), st.integers(0, 1000))
def test_episodic_aggregate_linear(T, n, alpha, seed):
    r = np.random.default_rng(seed).normal(size=(T, n))
    R, _ = episodic_aggregate(r, np.zeros_like(r))
    Ra, _ = episodic_aggregate(alpha * r, np.zeros_like(r))
    assert Ra == pytest.approx(alpha * R, abs=1e-9)


# -- checkpoint metrics -------------------------------------------------------


def test_feasible_return_examples():
    cks = [ck(1, 100, 30), ck(2, 80, 20), ck(3, 90, 24)]
    assert feasible_return(cks, 25) == 90
    assert feasible_return([ck(1, 5, 1), ck(2, 7, 2)], 25) == 7
    assert feasible_return([ck(1, 5, 30), ck(2, 7, 40)], 25) is None


def test_peak_violation_and_time_examples():
    assert peak_cost([ck(1, 0, 2), ck(2, 0, 7), ck(3, 0, 5)]) == 7
    assert violation_rate([10, 30, 26], 25) == pytest.approx(2 / 3)
    assert time_to_feasible([ck(16000, 0, 30), ck(32000, 0, 20)], 25) == 32000


def test_boundary_conventions():
    assert violation_rate([25.0], 25.0) == 0.0  # strict for violations
    assert time_to_feasible([ck(5, 0, 25.0)], 25.0) == 5  # non-strict for feasibility


def test_feasible_indicator_examples():
    assert feasible_indicator(5, 25, 25) == 5
    assert feasible_indicator(5, 26, 25) == 0
    assert feasible_indicator(0, 10, 25) == 0 and feasible_indicator(0, 30, 25) == 0


def test_empty_inputs_rejected():
    for fn in (lambda: feasible_return([], 1), lambda: peak_cost([]), lambda: time_to_feasible([], 1), lambda: violation_rate([], 1)):
        with pytest.raises(ValueError):
            fn()


def test_checkpoint_invariants():
    with pytest.raises(ValueError):
        EvalCheckpoint(1, 1.0, 2.0, [(1.0, 1.0), (1.0, 1.0)])
    with pytest.raises(ValueError):
        EvalCheckpoint(1, 1.0, -1.0)
    c = EvalCheckpoint.from_episodes(10, [(1.0, 30.0), (3.0, 10.0)], 25.0)
    assert c.mean_return == 2.0 and c.mean_cost == 20.0 and c.violations == 1 and c.n_eval == 2


checkpoint_sets = st.lists(
    st.tuples(st.integers(0, 10**6), st.floats(-100, 100), st.floats(0, 60)), min_size=1, max_size=15
)


def test_metrics_match_oracles_on_random_sets():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m = int(rng.integers(1, 12))
        steps = np.sort(rng.choice(10**6, size=m, replace=False))
        rs, cs = rng.normal(50, 30, m), rng.uniform(0, 50, m)
        cks = [ck(int(s), float(r), float(c)) for s, r, c in zip(steps, rs, cs)]
        assert feasible_return(cks, 25) == feasible_return_oracle(zip(rs, cs), 25)
        assert peak_cost(cks) == max(cs)
        assert time_to_feasible(cks, 25) == time_to_feasible_oracle(zip(steps.tolist(), cs), 25)
        ep = rng.uniform(0, 50, int(rng.integers(1, 20)))
        assert violation_rate(ep, 25) == sum(1 for c in ep if c > 25) / len(ep)


@settings(max_examples=200, deadline=None)
@given(checkpoint_sets, st.floats(0, 60))
def test_feasible_return_attained_and_monotone_under_removal(points, budget):
    cks = [ck(s, r, c) for s, r, c in points]
    best = feasible_return(cks, budget)
    if best is None:
        assert all(c.mean_cost > budget for c in cks)
        return
    winners = [i for i, c in enumerate(cks) if c.mean_return == best and c.mean_cost <= budget]
    assert winners
    rest = cks[: winners[0]] + cks[winners[0] + 1 :]
    if rest:
        after = feasible_return(rest, budget)
        assert after is None or after <= best


@settings(max_examples=200, deadline=None)
@given(checkpoint_sets, checkpoint_sets, st.floats(0, 60))
def test_time_to_feasible_stable_under_appending(head, tail, budget):
    first = [ck(s, r, c) for s, r, c in head]
    found = time_to_feasible(first, budget)
    later_start = max(c.step for c in first) + 1
    more = first + [ck(later_start + s, r, c) for s, r, c in tail]
    if found is not None:
        assert time_to_feasible(more, budget) == found


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.floats(0, 100))
def test_violation_rate_bounds(costs, budget):
    v = violation_rate(costs, budget)
    assert 0.0 <= v <= 1.0
    assert (v == 0.0) == all(c <= budget for c in costs)


# -- report -------------------------------------------------------------------


def test_report_fields_and_json_round_trip(tmp_path):
    cks = [
        EvalCheckpoint.from_episodes(16000, [(10.0, 40.0), (12.0, 30.0)], 25.0),
        EvalCheckpoint.from_episodes(32000, [(20.0, 20.0), (22.0, 26.0)], 25.0),
    ]
    rep = MetricsReport.from_checkpoints(cks, 25.0)
    assert rep.r_final == 21.0 and rep.c_final == 23.0 and rep.c_peak == 35.0
    assert rep.violation_rate == 0.5 and rep.r_feas == 21.0 and rep.time_to_feasible == 32000
    assert rep.j_feasible == 21.0
    rep.write_json(tmp_path / "r.json")
    assert MetricsReport.read_json(tmp_path / "r.json") == rep


def test_report_without_feasible_checkpoint():
    rep = MetricsReport.from_checkpoints([EvalCheckpoint.from_episodes(1, [(5.0, 40.0)], 25.0)], 25.0)
    assert rep.r_feas is None and rep.time_to_feasible is None and rep.j_feasible == 0.0


def test_summarize_across_seeds():
    a = MetricsReport(25, 10, 20, 30, 0.0, 10, 100, 10, 2)
    b = MetricsReport(25, 20, 30, 30, 1.0, None, None, 0, 2)
    s = summarize([a, b])
    assert s["r_final"]["mean"] == 15 and s["r_final"]["std"] == 5
    assert s["r_feas"] == {"mean": 10.0, "std": 0.0, "present": 1, "total": 2}


def test_checkpoint_csv_round_trip(tmp_path):
    cks = [EvalCheckpoint.from_episodes(16000, [(1 / 3, 2 / 3)], 25.0)]
    write_checkpoints_csv(tmp_path / "c.csv", cks)
    text = (tmp_path / "c.csv").read_text()
    assert text.splitlines() == ["step,mean_return,mean_cost,violations,n_eval", "16000,0.333333333,0.666666667,0,1"]
    assert read_checkpoints_csv(tmp_path / "c.csv")[0]["step"] == 16000


def test_fmt_nine_significant_digits():
    assert fmt(1 / 3) == "0.333333333" and fmt(12345678912.0) == "1.23456789e+10"
    assert fmt(7) == "7" and fmt(True) == "1" and fmt(float("nan")) == "nan" and fmt(None) == ""
