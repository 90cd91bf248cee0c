import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rampsim.core import Params
from rampsim.dynamics import (SAFETY, SPEED_TRACKING, ControllerParams, MergePrediction, VehicleState,
                              assign_virtual_leader, is_free_flow, jerk_limited, merge_headway_multiple,
                              predict_crossing_time, ramp_run_for_speed, safety_distance,
                              safety_mode_accel, speed_tracking_profile, update_mode)

P = Params()
CTRL = ControllerParams()


# ------------------------------------------------------ safety distance

def test_safety_distance_free_flow():
    assert safety_distance(15, 15, P) == pytest.approx(26.5)


def test_safety_distance_unequal_speeds():
    assert safety_distance(15, 10, P) == pytest.approx(22.5 + 4 + 12.5)


def test_safety_distance_rejects_negative_speed():
    with pytest.raises(ValueError):
        safety_distance(-1, 3, P)


@given(st.floats(0, 15))
def test_safety_distance_equal_speeds(v):
    assert safety_distance(v, v, P) == pytest.approx(P.h * v + P.S0, abs=1e-12)


# ---------------------------------------------------- speed tracking

def test_profile_identity_at_vf():
    prof = speed_tracking_profile(P.Vf, 0.0, P)
    assert prof.duration == 0.0
    assert prof.state(3.0) == pytest.approx((45.0, 15.0, 0.0))


def test_profile_from_rest_phases():
    prof = speed_tracking_profile(0.0, 0.0, P)
    assert prof.phase_times == pytest.approx((1.0, 6.5, 1.0))
    assert prof.duration == pytest.approx(8.5)
    _, v, a = prof.state(prof.duration)
    assert v == pytest.approx(15.0) and a == pytest.approx(0.0, abs=1e-12)


def _oracle_integrate(prof, dt=1e-3):
    # independent integration: finite differences of the sampled state
    ts = np.arange(0.0, prof.duration + 2.0, dt)
    S = prof.sample(ts)
    x, v, a = S[:, 0], S[:, 1], S[:, 2]
    return ts, x, v, a


@given(st.floats(0.0, 15.0), st.floats(-5.0, 2.0))
def test_profile_terminal_state_and_continuity(v0, a0):
    prof = speed_tracking_profile(v0, a0, P)
    _, v, a = prof.state(prof.duration)
    assert v == pytest.approx(P.Vf, abs=1e-9)
    assert a == pytest.approx(0.0, abs=1e-9)
    ts, x, vv, aa = _oracle_integrate(prof)
    dt = ts[1] - ts[0]
    assert np.all(np.diff(x) >= -1e-12)
    # x' = v and v' = a up to trapezoid error
    np.testing.assert_allclose(np.diff(x), 0.5 * (vv[1:] + vv[:-1]) * dt, atol=1e-6)
    np.testing.assert_allclose(np.diff(vv), 0.5 * (aa[1:] + aa[:-1]) * dt, atol=1e-6)
    # jerk and acceleration limits
    assert np.all(np.abs(np.diff(aa)) <= P.J_max * dt + 1e-9)
    assert np.all(aa <= P.a_max + 1e-9)


def test_profile_above_vf_slows_down():
    prof = speed_tracking_profile(18.0, 0.0, P)
    _, v, a = prof.state(prof.duration)
    assert v == pytest.approx(P.Vf) and a == pytest.approx(0.0, abs=1e-12)
    assert prof.state(0.5)[2] < 0


# ---------------------------------------------------------- prediction

def test_crossing_time_example():
    ego = VehicleState(p=-70.0, v=15.0)
    assert predict_crossing_time(ego, 0.0, P) == pytest.approx(4.67, abs=0.01)


def test_crossing_time_at_point():
    assert predict_crossing_time(VehicleState(p=12.0, v=3.0), 12.0, P) == 0.0


def test_crossing_time_safety_mode():
    veh = VehicleState(p=0.0, v=10.0, mode=SAFETY)
    assert predict_crossing_time(veh, 50.0, P) == pytest.approx(5.0)
    assert predict_crossing_time(VehicleState(p=0.0, v=0.0, mode=SAFETY), 50.0, P) == math.inf


def test_crossing_time_upstream_point_rejected():
    with pytest.raises(ValueError):
        predict_crossing_time(VehicleState(p=10.0, v=5.0), 0.0, P)


def test_crossing_time_from_rest_matches_profile():
    veh = VehicleState(p=0.0, v=0.0)
    t = predict_crossing_time(veh, 63.75, P)
    assert t == pytest.approx(8.5, abs=1e-6)


def _example_layout():
    vehicles = [VehicleState(p=-d, v=15.0, vid=k + 1) for k, d in enumerate((5, 36, 70, 101, 132))]
    return vehicles, vehicles[2]


def test_virtual_leader_example():
    area, ego = _example_layout()
    pred = assign_virtual_leader(ego, area, 0.0, P)
    assert pred.t_m == pytest.approx(70 / 15)
    assert pred.leader == 2
    assert pred.follower == 4
    assert pred.gap_leader == pytest.approx(29.5)
    assert pred.safe_gap_leader == pytest.approx(26.5)
    assert pred.leader_ok and pred.follower_ok
    # the follower sits 31 m upstream at the merge instant
    assert pred.gap_follower == pytest.approx(31 - P.L)


def test_virtual_leader_single_vehicle():
    ego = VehicleState(p=-70.0, v=15.0)
    far = VehicleState(p=400.0, v=15.0, vid=9)
    pred = assign_virtual_leader(ego, [far], 0.0, P)
    assert pred.leader == 9 and pred.follower is None and pred.gap_follower == math.inf


def test_virtual_leader_empty_area():
    pred = assign_virtual_leader(VehicleState(p=-70.0, v=15.0), [], 0.0, P)
    assert pred.leader is None and pred.gap_leader == math.inf


def test_virtual_leader_straddling_slot():
    pitch = P.pitch
    ego = VehicleState(p=-70.0, v=15.0)
    lead = VehicleState(p=-70.0 + pitch, v=15.0, vid=1)
    foll = VehicleState(p=-70.0 - pitch, v=15.0, vid=2)
    pred = assign_virtual_leader(ego, [lead, foll], 0.0, P)
    assert pred.gap_leader == pytest.approx(pitch - P.L)
    assert pred.gap_follower == pytest.approx(pitch - P.L)


def test_virtual_leader_skips_vehicles_exiting_first():
    ego = VehicleState(p=-70.0, v=15.0)
    gone = VehicleState(p=-10.0, v=15.0, vid=1, exit_pos=20.0)
    pred = assign_virtual_leader(ego, [gone], 0.0, P)
    assert pred.leader is None


@given(st.lists(st.tuples(st.floats(-300, 300), st.floats(0.0, 15.0), st.booleans()), min_size=2, max_size=12),
       st.floats(-150, -1), st.floats(0.0, 15.0))
def test_virtual_leader_order_consistent(others, ego_p, ego_v):
    ego = VehicleState(p=ego_p, v=ego_v)
    area = [VehicleState(p=x, v=v, mode=SAFETY if s else SPEED_TRACKING, vid=k)
            for k, (x, v, s) in enumerate(others)]
    pred = assign_virtual_leader(ego, area, 0.0, P)
    if pred.leader is not None and pred.follower is not None:
        # leader ahead of the merge point, follower behind: leader strictly ahead
        lead_pos = pred.gap_leader + P.L
        foll_pos = -(pred.gap_follower + P.L)
        assert lead_pos > foll_pos


# -------------------------------------------------------------- modes

def test_update_mode_example_gap_check():
    ego = VehicleState(p=0.0, v=15.0)
    assert update_mode(ego, 29.5, 15.0, None, P) == SPEED_TRACKING


def test_update_mode_boundary_is_strict():
    ego = VehicleState(p=0.0, v=15.0)
    assert update_mode(ego, 26.5, 15.0, None, P) == SPEED_TRACKING


def test_update_mode_predicted_violation():
    ego = VehicleState(p=-50.0, v=15.0)
    pred = MergePrediction(t_m=3.0, leader=1, gap_leader=20.0, safe_gap_leader=26.5)
    assert update_mode(ego, None, None, pred, P) == SAFETY


def test_update_mode_switch_back_needs_margin():
    ego = VehicleState(p=0.0, v=15.0, mode=SAFETY)
    assert update_mode(ego, 26.7, 15.0, None, P) == SAFETY
    assert update_mode(ego, 27.0, 15.0, None, P) == SPEED_TRACKING


@given(st.sampled_from([SAFETY, SPEED_TRACKING]), st.floats(0, 15), st.floats(0, 15),
       st.one_of(st.none(), st.floats(0, 80)), st.one_of(st.none(), st.floats(0, 80)))
def test_update_mode_idempotent(mode, v, vl, gap, pgap):
    ego = VehicleState(p=0.0, v=v, mode=mode)
    pred = None
    if pgap is not None:
        pred = MergePrediction(t_m=1.0, leader=1, gap_leader=pgap, safe_gap_leader=safety_distance(v, vl, P))
    once = update_mode(ego, gap, vl if gap is not None else None, pred, P)
    ego.mode = once
    assert update_mode(ego, gap, vl if gap is not None else None, pred, P) == once


# ---------------------------------------------------- safety controller

def test_safety_accel_equilibrium():
    ego = VehicleState(p=0.0, v=10.0, mode=SAFETY)
    assert safety_mode_accel(ego, P.h * 10 + P.S0, 10.0, P) == pytest.approx(0.0)


def test_safety_accel_default_gains():
    ego = VehicleState(p=0.0, v=15.0, mode=SAFETY)
    assert safety_mode_accel(ego, 20.0, 15.0, P) == pytest.approx(-0.65)


def test_safety_accel_most_restrictive():
    ego = VehicleState(p=0.0, v=15.0, mode=SAFETY)
    both = safety_mode_accel(ego, 40.0, 15.0, P, virtual_gap=20.0, v_virtual=15.0)
    assert both == pytest.approx(-0.65)


def test_safety_accel_no_leader():
    assert safety_mode_accel(VehicleState(p=0.0, v=12.0, mode=SAFETY), None, None, P) is None


def test_safety_accel_clamped():
    ego = VehicleState(p=0.0, v=15.0, mode=SAFETY)
    assert safety_mode_accel(ego, 0.5, 0.0, P) == P.a_min


def _platoon(n=10, v0=10.0, dt=0.05, T=120.0, lead=None):
    x = np.zeros(n + 1)
    v = np.full(n + 1, v0)
    a = np.zeros(n + 1)
    v[0] = P.Vf
    for k in range(1, n + 1):
        x[k] = x[k - 1] - (P.h * v0 + P.S0 + P.L)
    hist = []
    for step in range(int(T / dt)):
        new_a = np.zeros_like(a)
        for k in range(1, n + 1):
            ego = VehicleState(p=x[k], v=v[k], a=a[k], mode=SAFETY)
            cmd = safety_mode_accel(ego, x[k - 1] - x[k] - P.L, v[k - 1], P, CTRL)
            new_a[k] = jerk_limited(a[k], cmd, P, dt)
        a = new_a
        if lead is not None:
            v[0] = lead(step * dt)
        x = x + v * dt
        v = np.maximum(v + a * dt, 0.0)
        hist.append(v.copy())
    return np.array(hist)


def test_platoon_converges_exponentially():
    H = _platoon()
    err = np.abs(H[:, 1:] - P.Vf).max(axis=1)
    t = np.arange(len(err)) * 0.05
    assert err[-1] < 0.01
    sel = (err > 1e-4) & (t > 20)
    r2 = np.corrcoef(t[sel], np.log(err[sel]))[0, 1] ** 2
    assert r2 > 0.95


def test_platoon_string_stable():
    def lead(s):
        return P.Vf - 2.0 * math.sin(math.pi * s / 4) ** 2 if s < 4 else P.Vf

    H = _platoon(v0=P.Vf, lead=lead, T=60.0)
    dev = np.abs(H - P.Vf).max(axis=0)
    assert np.all(np.diff(dev) <= 1e-9)


# ------------------------------------------------------------ free flow

def test_free_flow_cases():
    assert is_free_flow([], P)
    slots = [VehicleState(p=-k * P.pitch, v=P.Vf) for k in range(5)]
    assert is_free_flow(slots, P, gaps=[math.inf] + [P.pitch - P.L] * 4)
    slow = [VehicleState(p=0.0, v=14.0, mode=SAFETY)]
    assert not is_free_flow(slow, P)


# ---------------------------------------------------- merge headway

def test_merge_headway_at_vf():
    assert merge_headway_multiple(P.Vf, P) == 2


def test_merge_headway_low_merge():
    assert merge_headway_multiple(5.0, P) == 3
    assert ramp_run_for_speed(5.0, P) == pytest.approx(19 / 3)


def test_merge_headway_monotone():
    speeds = np.linspace(0.5, P.Vf, 20)
    k = [merge_headway_multiple(v, P) for v in speeds]
    assert all(b <= a for a, b in zip(k, k[1:]))
    assert min(k) >= 2


def test_merge_headway_rejects_zero_speed():
    with pytest.raises(ValueError):
        merge_headway_multiple(0.0, P)
