"""Vehicle kinematics, mode logic and merge prediction.

Vehicles run in one of two modes.  In speed tracking they follow a
jerk-limited profile up to the free-flow speed; in safety mode they regulate
a constant time headway behind their leader (and virtual leader when
merging).  The functions here operate on plain value objects and are shared
by the simulation engines and the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kin
from .core import Params

SPEED_TRACKING = 0
SAFETY = 1
NEVER = math.inf
GAP_TOL = 1e-9


@dataclass(frozen=True)
class ControllerParams:
    """Safety-mode controller gains and switching constants."""

    k_p: float = 0.1
    k_v: float = 0.6
    hysteresis_margin: float = 0.5
    overshoot: float = 1.05
    dt: float = 0.05


@dataclass
class VehicleState:
    p: float
    v: float
    a: float = 0.0
    mode: int = SPEED_TRACKING
    ever_safety: bool = False
    origin: int = -1
    destination: int = -1
    release_time: float = 0.0
    slot: Optional[int] = None
    vid: int = -1
    exit_pos: float = math.inf


@dataclass
class SpeedProfile:
    """Jerk-limited trajectory from (v0, a0) to (Vf, 0)."""

    v0: float
    a0: float
    v_target: float
    durations: np.ndarray
    jerks: np.ndarray

    @property
    def phase_times(self) -> tuple[float, float, float]:
        return tuple(float(d) for d in self.durations)

    @property
    def duration(self) -> float:
        return float(self.durations.sum())

    def state(self, t: float) -> tuple[float, float, float]:
        """Distance travelled, speed and acceleration after ``t`` seconds."""
        return _kin.profile_state(float(t), self.v0, self.a0, self.durations, self.jerks, self.v_target)

    def time_to(self, dist: float) -> float:
        return _kin.profile_time_to(float(dist), self.v0, self.a0, self.durations, self.jerks, self.v_target)

    def sample(self, ts) -> np.ndarray:
        return np.array([self.state(t) for t in np.atleast_1d(ts)])


@dataclass
class MergePrediction:
    t_m: float
    leader: Optional[int] = None
    follower: Optional[int] = None
    gap_leader: float = math.inf
    gap_follower: float = math.inf
    v_ego: float = 0.0
    v_leader: float = math.nan
    v_follower: float = math.nan
    safe_gap_leader: float = -math.inf
    safe_gap_follower: float = -math.inf

    @property
    def leader_ok(self) -> bool:
        return self.gap_leader >= self.safe_gap_leader - GAP_TOL

    @property
    def follower_ok(self) -> bool:
        return self.gap_follower >= self.safe_gap_follower - GAP_TOL


def safety_distance(v_e, v_l, params: Params):
    """Emergency-stop spacing the follower must keep behind its leader."""
    v_e = np.asarray(v_e, dtype=float)
    v_l = np.asarray(v_l, dtype=float)
    if np.any(v_e < 0) or np.any(v_l < 0):
        raise ValueError("speeds must be non-negative")
    out = params.h * v_e + params.S0 + (v_e**2 - v_l**2) / (2.0 * abs(params.a_min))
    return float(out) if out.ndim == 0 else out


def speed_tracking_profile(v0: float, a0: float, params: Params, v_target: float | None = None) -> SpeedProfile:
    """Closed-form jerk-limited profile ending at exactly (Vf, 0)."""
    if v_target is None:
        v_target = params.Vf
    a0 = float(_kin.clamp_initial_accel(float(v0), float(a0), params.J_max))
    dur = np.zeros(_kin.NPHASE)
    jerk = np.zeros(_kin.NPHASE)
    _kin.build_profile(float(v0), a0, float(v_target), params.a_max, params.J_max, dur, jerk)
    return SpeedProfile(float(v0), a0, float(v_target), dur, jerk)


def predict_state(veh: VehicleState, dt: float, params: Params) -> tuple[float, float]:
    """Position and speed ``dt`` seconds ahead under the prediction rule.

    Speed-tracking vehicles are assumed to keep tracking; safety-mode
    vehicles keep their current speed.  A profile rebuilt from a
    mid-trajectory state continues the original one, so the profile is
    always derived from the current (v, a).
    """
    if veh.mode == SAFETY:
        return veh.p + veh.v * dt, veh.v
    x, v, _a = speed_tracking_profile(veh.v, veh.a, params).state(dt)
    return veh.p + x, v


def predict_crossing_time(veh: VehicleState, point: float, params: Params) -> float:
    """Seconds until the front bumper reaches ``point`` (``inf`` if never)."""
    dist = point - veh.p
    if dist < -GAP_TOL:
        raise ValueError("point lies upstream of the vehicle")
    if dist <= 0.0:
        return 0.0
    if veh.mode == SAFETY:
        return dist / veh.v if veh.v > 0 else NEVER
    return speed_tracking_profile(veh.v, veh.a, params).time_to(dist)


def assign_virtual_leader(ego: VehicleState, merge_area: Sequence[VehicleState], merge_point: float,
                          params: Params, t_m: float | None = None) -> MergePrediction:
    """Predict the ego's merge instant and its neighbours at that instant.

    Every vehicle in ``merge_area`` (ego excluded, matched by identity) is
    extrapolated to the ego's crossing time; vehicles whose exit position is
    reached before then are dropped.  Positions share one coordinate with
    the merge point, so vehicles on the ramp and on the mainline compare
    directly.
    """
    if t_m is None:
        t_m = predict_crossing_time(ego, merge_point, params)
    if not math.isfinite(t_m):
        return MergePrediction(t_m=t_m, v_ego=ego.v)
    _, v_e = predict_state(ego, t_m, params)
    lead = foll = None
    lead_p = math.inf
    foll_p = -math.inf
    lead_v = foll_v = math.nan
    for k, other in enumerate(merge_area):
        if other is ego:
            continue
        p_hat, v_hat = predict_state(other, t_m, params)
        if p_hat >= other.exit_pos:
            continue
        if p_hat >= merge_point:
            if p_hat < lead_p:
                lead, lead_p, lead_v = k, p_hat, v_hat
        elif p_hat > foll_p:
            foll, foll_p, foll_v = k, p_hat, v_hat

    def ident(k):
        vid = merge_area[k].vid
        return vid if vid >= 0 else k

    pred = MergePrediction(t_m=t_m, v_ego=v_e)
    if lead is not None:
        pred.leader = ident(lead)
        pred.gap_leader = lead_p - merge_point - params.L
        pred.v_leader = lead_v
        pred.safe_gap_leader = safety_distance(v_e, lead_v, params)
    if foll is not None:
        pred.follower = ident(foll)
        pred.gap_follower = merge_point - foll_p - params.L
        pred.v_follower = foll_v
        pred.safe_gap_follower = safety_distance(foll_v, v_e, params)
    return pred


def update_mode(ego: VehicleState, gap: float | None, v_leader: float | None,
                prediction: MergePrediction | None, params: Params,
                ctrl: ControllerParams = ControllerParams()) -> int:
    """Mode for the next control tick.

    ``gap``/``v_leader`` describe the physical leader (``None`` when there
    is none).  A speed-tracking vehicle switches to safety when its spacing
    or its predicted merge spacing falls strictly below the safe distance.
    A safety-mode vehicle returns to speed tracking once its spacing exceeds
    the safe distance by the hysteresis margin and the merge prediction
    computed as if it were tracking again is safe.
    """
    if ego.mode == SPEED_TRACKING:
        if gap is not None and gap < safety_distance(ego.v, v_leader, params):
            return SAFETY
        if prediction is not None and math.isfinite(prediction.gap_leader):
            if prediction.gap_leader < prediction.safe_gap_leader:
                return SAFETY
        return SPEED_TRACKING
    if gap is not None and gap < safety_distance(ego.v, v_leader, params) + ctrl.hysteresis_margin:
        return SAFETY
    if prediction is not None and math.isfinite(prediction.gap_leader) and not prediction.leader_ok:
        return SAFETY
    return SPEED_TRACKING


def safety_mode_accel(ego: VehicleState, gap: float | None, v_leader: float | None, params: Params,
                      ctrl: ControllerParams = ControllerParams(),
                      virtual_gap: float | None = None, v_virtual: float | None = None) -> float | None:
    """Clamped headway law; the most restrictive of leader and virtual leader.

    The command is also capped by a pull towards Vf so a safety-mode
    vehicle never accelerates past the free-flow speed.  Returns ``None``
    when there is nothing to follow, in which case the vehicle reverts to
    speed tracking.
    """
    cmds = []
    for g, vl in ((gap, v_leader), (virtual_gap, v_virtual)):
        if g is None:
            continue
        cmds.append(_kin.headway_accel(g, ego.v, vl, params.h, params.S0, ctrl.k_p, ctrl.k_v,
                                       params.a_min, params.a_max))
    if not cmds:
        return None
    return min(min(cmds), max(ctrl.k_v * (params.Vf - ego.v), params.a_min))


def jerk_limited(a: float, a_cmd: float, params: Params, dt: float) -> float:
    step = params.J_max * dt
    return a + min(max(a_cmd - a, -step), step)


def is_free_flow(vehicles: Sequence[VehicleState], params: Params, gaps: Sequence[float] | None = None,
                 leader_speeds: Sequence[float] | None = None, tol: float = 1e-6) -> bool:
    """True when no vehicle will need to leave its current behaviour.

    Safety-mode vehicles must cruise at Vf with zero acceleration and keep at
    least h*Vf + S0 to their leader.  Speed-tracking vehicles must hold a
    safe gap; those still accelerating are taken to stay safe, which is
    exact for slot-aligned traffic.  ``gaps``/``leader_speeds`` are the
    physical spacings (``inf`` for no leader).
    """
    target = params.h * params.Vf + params.S0
    for k, veh in enumerate(vehicles):
        gap = math.inf if gaps is None else gaps[k]
        if veh.mode == SAFETY:
            if abs(veh.v - params.Vf) > tol or abs(veh.a) > tol or gap < target - tol:
                return False
        elif math.isfinite(gap):
            vl = params.Vf if leader_speeds is None else leader_speeds[k]
            if gap < safety_distance(veh.v, vl, params) - tol:
                return False
    return True


def _merge_trajectory(merge_speed: float, params: Params, dt: float):
    """Ego speed-tracking trajectory from the merge point until it reaches Vf."""
    prof = speed_tracking_profile(0.0, 0.0, params)
    if merge_speed >= params.Vf - 1e-12:
        t_m = prof.duration
    else:
        lo, hi = 0.0, prof.duration
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if prof.state(mid)[1] < merge_speed:
                lo = mid
            else:
                hi = mid
        t_m = hi
    t_f = prof.duration
    n = max(int(math.ceil((t_f - t_m) / dt)), 1)
    ts = np.linspace(t_m, t_f, n + 1)
    states = prof.sample(ts)
    return ts - t_m, states[:, 0], states[:, 1], prof.state(t_f)[0]


def merge_window(merge_speed: float, params: Params, k_max: int = 12, dt: float = 1e-3) -> tuple[int, int, int]:
    """Smallest safe headway multiple and its (leader, follower) split.

    Returns ``(k, ahead, behind)``: the leader sits ``ahead`` slots in front
    of the slot the ego eventually occupies and the follower ``behind``
    slots behind it, with ``ahead + behind = k``.
    """
    if not 0 < merge_speed <= params.Vf + 1e-12:
        raise ValueError("merge speed must lie in (0, Vf]")
    rel_t, x, v, x_end = _merge_trajectory(merge_speed, params, dt)
    t_end = rel_t[-1]
    pitch = params.pitch
    # the slot the ego lands on, expressed in the ego's own distance frame
    slot_x = x_end - params.Vf * (t_end - rel_t)
    for k in range(2, k_max + 1):
        for ahead in range(1, k):
            behind = k - ahead
            lead_x = slot_x + ahead * pitch
            foll_x = slot_x - behind * pitch
            gap_l = lead_x - x - params.L
            gap_f = x - foll_x - params.L
            ok_l = np.all(gap_l > 0) and np.all(gap_l >= safety_distance(v, np.full_like(v, params.Vf), params) - GAP_TOL)
            ok_f = np.all(gap_f > 0) and np.all(gap_f >= safety_distance(np.full_like(v, params.Vf), v, params) - GAP_TOL)
            if ok_l and ok_f:
                return k, ahead, behind
    raise ValueError("no safe headway multiple up to k_max")


def merge_headway_multiple(merge_speed: float, params: Params) -> int:
    """Integer k such that ramp releases need a k*tau mainline headway."""
    return merge_window(merge_speed, params)[0]


def merge_speed_for_run(ramp_run: float, params: Params) -> float:
    """Speed reached at the merge point by a vehicle released from rest."""
    prof = speed_tracking_profile(0.0, 0.0, params)
    t = prof.time_to(ramp_run)
    return float(prof.state(t)[1])


def ramp_run_for_speed(merge_speed: float, params: Params) -> float:
    """Meter-to-merge distance that yields ``merge_speed`` at the merge point."""
    prof = speed_tracking_profile(0.0, 0.0, params)
    if merge_speed >= params.Vf:
        return float(prof.state(prof.duration)[0])
    lo, hi = 0.0, prof.duration
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if prof.state(mid)[1] < merge_speed:
            lo = mid
        else:
            hi = mid
    return float(prof.state(hi)[0])
