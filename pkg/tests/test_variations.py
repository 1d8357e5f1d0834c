from __future__ import annotations

import json

import numpy as np
import pytest

from qcinf.errors import ConfigurationError, PhaseMixed
from qcinf.grid import Grid, sample_map
from qcinf.maps import get_map, power_map
from qcinf.variations import (
    VERDICT,
    ball_points,
    battery_csv,
    battery_summary,
    counterexample_report,
    directed_search,
    loglog_slope,
    normal_free_trial,
    normal_point_change,
    rank_one_battery,
    rank_one_trial,
    sup_estimate,
)


def test_ball_points_inside():
    pts = ball_points(np.array([0.5, 0.5]), 0.1, 21)
    assert np.all(np.linalg.norm(pts - 0.5, axis=1) <= 0.1 + 1e-12)
    assert len(pts) > 0.7 * 21 * 21


def test_sup_estimate_finds_smooth_max():
    c = np.array([0.03, -0.02])
    val = sup_estimate(lambda p: -np.sum((p - c) ** 2, axis=1), np.zeros(2), 0.1, res=17)
    assert val == pytest.approx(0.0, abs=1e-8)


def test_identity_rank_one_never_decreases():
    trials = rank_one_battery(get_map("identity"), trials=20, seed=1)
    assert min(t.delta_k for t in trials) >= -1e-12
    assert all(t.converged for t in trials)


def test_power_map_rank_one_minimal():
    trials = rank_one_battery(power_map(1.0), trials=20, seed=2)
    assert min(t.delta_k for t in trials) >= -1e-8


def test_cubic_directed_search_decreases():
    best = directed_search(get_map("cubic-y"))
    assert best.delta_k <= -1e-6


def test_trial_validation():
    m = get_map("identity")
    with pytest.raises(ConfigurationError):
        rank_one_trial(m, [0.05, 0.5], 0.1, [1.0, 0.0], 0.01)
    with pytest.raises(ConfigurationError):
        rank_one_trial(m, [0.5, 0.5], 0.1, [0.0, 0.0], 0.01)
    with pytest.raises(ConfigurationError):
        rank_one_trial(m, [0.5, 0.5], 0.1, [1.0, 0.0], -1.0)


def test_refinement_agreement_and_shrink():
    t = rank_one_trial(get_map("cubic-y"), [1.5, 1.5], 0.1, [1.0, 0.0], 0.05)
    assert t.converged
    # a huge delta folds the map; it is halved until the variation is an immersion
    big = rank_one_trial(get_map("identity"), [0.5, 0.5], 0.2, [1.0, 0.0], 50.0)
    assert big.shrinks > 0 and big.delta < 50.0


def test_sampled_field_source():
    f = sample_map(power_map(1.0), Grid.square(0.2, 1.0, 33))
    t = rank_one_trial(f, [0.6, 0.6], 0.1, [0.3, 1.0], 0.01)
    assert np.isfinite(t.delta_k)
    with pytest.raises(ConfigurationError):
        rank_one_trial(f, [0.25, 0.6], 0.1, [0.3, 1.0], 0.01)


def test_normal_trial_degenerate_without_codimension():
    t = normal_free_trial(power_map(1.0), [0.5, 0.4], 0.05)
    assert t.degenerate and t.delta_k == 0.0


def test_flat_graph_changes_at_second_order():
    m = get_map("graph")
    x = np.array([0.5, 0.5])
    deltas = np.array([1e-1, 3e-2, 1e-2, 3e-3])
    _, ch, pred = normal_point_change(m, x, deltas, {"kind": "ramp", "c": 1.0, "a": [1.0, 0.5]})
    assert pred == 0.0
    assert np.all(ch >= 0.0)
    assert loglog_slope(deltas, ch) >= 2.0 - 1e-3
    _, ch, _ = normal_point_change(m, x, deltas)
    assert np.max(np.abs(ch)) <= 1e-14


def test_first_order_normal_change():
    m = get_map("graph", a=1.0, b=0.2, c=0.3)
    x = np.array([0.4, 0.3])
    deltas = np.array([1e-3, 5e-4, 2.5e-4])
    _, ch, pred = normal_point_change(m, x, deltas)
    assert abs(pred) > 1e-3
    slopes = ch / deltas
    assert slopes[-1] == pytest.approx(pred, rel=1e-2)
    # the error of the first-order model is O(delta)
    err = np.abs(slopes - pred)
    assert err[0] > err[1] > err[2]
    # choosing the sign of h against the prediction lowers K
    sign = -np.sign(pred)
    _, down, _ = normal_point_change(m, x, deltas, {"kind": "constant", "c": sign})
    assert np.all(down < 0.0)


def test_normal_trial_on_curved_graph():
    m = get_map("graph", a=1.0, b=0.2, c=0.3)
    t = normal_free_trial(m, [0.4, 0.3], 0.05, delta=1e-3)
    assert not t.degenerate and np.isfinite(t.delta_k)
    with pytest.raises(PhaseMixed):
        normal_free_trial(m, [0.0, 0.0], 0.05)


def test_counterexample_gamma_one():
    rep = counterexample_report(1.0, samples=500, trials=10)
    assert rep.comparison == "2 < 2.5"
    assert rep.verdict == VERDICT
    assert rep.boundary_gap <= 1e-12 and rep.puncture_gap <= 1e-6
    assert rep.rank_one["min_delta_k"] >= -1e-8
    assert json.loads(rep.to_json())["gamma"] == 1.0
    assert "2 < 2.5" in rep.table()


def test_counterexample_gap_vanishes_as_gamma_shrinks():
    rep = counterexample_report(1.0 / 3.0, samples=200, trials=4)
    assert rep.power_sup == pytest.approx(2 + (1 / 9) / (4 / 3), abs=1e-10)
    gaps = [counterexample_report(g, samples=200, trials=2).power_sup - 2.0 for g in (0.5, 0.1, 0.01)]
    assert gaps[0] > gaps[1] > gaps[2] > 0.0
    with pytest.raises(ConfigurationError):
        counterexample_report(0.0)


def test_battery_output_deterministic():
    a = rank_one_battery(get_map("cubic-y"), trials=5, seed=9)
    b = rank_one_battery(get_map("cubic-y"), trials=5, seed=9)
    assert battery_csv(a) == battery_csv(b)
    s = battery_summary(a, 9)
    assert s["trials"] == 5 and s["min_delta_k"] <= s["max_delta_k"]
    assert battery_csv(a).splitlines()[0].startswith("kind,x,eps,xi,delta,delta_k")
