from collections import Counter

import numpy as np
import pytest

from trimanual.errors import StepOutOfRange
from trimanual.kincore import planar_chain, sample_reachable_set
from trimanual.orchestrator import MissionCache
from trimanual.scenario import load_scenario
from trimanual.simworld import (PendulumTarget, TrialRecord, WindField, advance_pendulum,
                                cartesian_to_spherical, run_trials, small_angle_period,
                                spherical_to_cartesian, step_pendulum, workspace_contains)


def swing(theta0, L=0.3, damping=0.0):
    return PendulumTarget(np.zeros(3), L, damping=damping, state=(theta0, 0.0, 0.0, 0.0))


# --- physics ---------------------------------------------------------------------

def test_small_angle_period():
    L = 0.3
    p = swing(0.02, L)
    dt = 1e-3
    xs = [p.position[0]]
    for _ in range(4000):
        p = step_pendulum(p, dt)
        xs.append(p.position[0])
    xs = np.array(xs)
    # downward zero crossings, linearly interpolated
    idx = np.nonzero((xs[:-1] > 0) & (xs[1:] <= 0))[0]
    tc = (idx + xs[idx] / (xs[idx] - xs[idx + 1])) * dt
    period = np.mean(np.diff(tc))
    assert period == pytest.approx(small_angle_period(L), rel=0.01)


def test_energy_conserved_without_damping():
    p = swing(0.6)
    p = p.with_cartesian(p.position - p.anchor, np.array([0.0, 0.4, 0.0]))
    e0 = p.energy()
    p = advance_pendulum(p, 0.0, 10_000, 1e-3)
    assert abs(p.energy() - e0) / abs(e0) < 1e-3


def test_damping_removes_energy():
    p = swing(0.4, damping=0.5)
    e0 = p.energy()
    assert advance_pendulum(p, 0.0, 3000, 1e-3).energy() < e0


def test_hanging_target_stays_put():
    p = PendulumTarget.hanging([1.5, 0.0, 0.7], 0.3)
    q = advance_pendulum(p, 0.0, 2000, 1e-3)
    np.testing.assert_allclose(q.position, [1.5, 0.0, 0.7], atol=1e-12)


def test_wind_moves_the_fruit():
    rng = np.random.default_rng(0)
    p = PendulumTarget.hanging([0.0, 0.0, 0.0], 0.3)
    q = advance_pendulum(p, 0.0, 2000, 1e-3, WindField.draw(0.5, rng))
    assert np.linalg.norm(q.position - p.position) > 1e-3


@pytest.mark.parametrize("dt", [0.0, -1e-3, 0.02])
def test_step_out_of_range(dt):
    with pytest.raises(StepOutOfRange):
        step_pendulum(swing(0.1), dt)


def test_spherical_cartesian_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = (rng.uniform(0.1, 2.5), rng.uniform(-3, 3), rng.normal(), rng.normal())
        r, v = spherical_to_cartesian(0.4, s)
        r2, v2 = spherical_to_cartesian(0.4, cartesian_to_spherical(r, v, 0.4))
        np.testing.assert_allclose(r2, r, atol=1e-12)
        np.testing.assert_allclose(v2, v, atol=1e-9)


def test_peduncle_point_lies_on_the_cord():
    p = PendulumTarget.hanging([0.0, 0.0, 1.0], 0.3)
    np.testing.assert_allclose(p.peduncle_point(0.1), [0.0, 0.0, 1.1], atol=1e-12)


# --- workspace -----------------------------------------------------------------------

def test_workspace_contains_needs_both_arms():
    c = planar_chain((0.3, 0.2), "two")
    rs = sample_reachable_set(c, 20000, seed=0)
    summ = {"left": rs, "right": rs}
    assert workspace_contains(summ, [0.3, 0.0, 0.0], offset=(0.0, 0.1, 0.0))
    assert not workspace_contains(summ, [0.45, 0.0, 0.0], offset=(0.2, 0.0, 0.0))
    assert not workspace_contains(summ, [0.9, 0.0, 0.0], offset=(0.0, 0.0, 0.0))


# --- execution outcomes ------------------------------------------------------------------

def test_record_rejects_unknown_cause():
    with pytest.raises(ValueError):
        TrialRecord(0, 0, "indoor", failure_cause="Gremlins")


def test_certain_slip_always_fails():
    sc = load_scenario("indoor_ideal").with_noise(slip_probability=1.0)
    recs, summary = run_trials(sc, 3, 0, MissionCache())
    assert [r.failure_cause for r in recs] == ["Slip"] * 3
    assert summary["indoor"]["success_rate"] == 0.0


def test_pose_noise_mostly_misses_the_grasp():
    sc = load_scenario("indoor_ideal").with_noise(pose_noise_sigma=0.03)
    recs, _ = run_trials(sc, 20, 0, MissionCache())
    causes = Counter(r.failure_cause for r in recs)
    assert causes.most_common(1)[0][0] == "MissedGrasp"


def test_success_is_monotone_in_slip_probability():
    base = load_scenario("indoor")
    cache = MissionCache()
    low, _ = run_trials(base.with_noise(slip_probability=0.1), 40, 0, cache)
    high, _ = run_trials(base.with_noise(slip_probability=0.4), 40, 0, cache)
    for a, b in zip(low, high):
        assert a.success or not b.success
    assert sum(r.success for r in high) <= sum(r.success for r in low)


def test_csv_row_matches_fields():
    rec = TrialRecord(3, 7, "indoor", {"hold": "ok"}, True, None, 12.5)
    row = rec.csv_row()
    assert len(row) == len(TrialRecord.CSV_FIELDS)
    assert row[:5] == [3, 7, "indoor", 1, ""]
