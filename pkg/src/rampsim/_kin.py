"""Jerk-limited speed-tracking kinematics compiled with numba.

A profile is stored as three phases of constant jerk.  Phase one ramps the
acceleration to its peak, phase two holds it and phase three ramps it back to
zero, after which the vehicle cruises at the target speed.  Decelerating and
overshooting cases are handled by mirroring the speed axis.
"""

import math

import numpy as np
from numba import njit

NPHASE = 3


@njit(cache=True)
def clamp_initial_accel(v0, a0, jerk_max):
    # a negative acceleration at low speed would drive the speed below zero
    # before the jerk limit can bring it back; relax it to the largest
    # admissible value
    if a0 < 0.0:
        floor = -math.sqrt(2.0 * jerk_max * max(v0, 0.0))
        if a0 < floor:
            return floor
    return a0


@njit(cache=True)
def build_profile(v0, a0, v_target, a_max, jerk_max, dur, jerk):
    """Fill ``dur`` and ``jerk`` (length 3) with the phase schedule."""
    for k in range(NPHASE):
        dur[k] = 0.0
        jerk[k] = 0.0
    a0 = clamp_initial_accel(v0, a0, jerk_max)
    if a0 >= 0.0:
        v_flat = v0 + a0 * a0 / (2.0 * jerk_max)
    else:
        v_flat = v0 - a0 * a0 / (2.0 * jerk_max)
    if abs(v_flat - v_target) <= 1e-12:
        if a0 != 0.0:
            dur[0] = abs(a0) / jerk_max
            jerk[0] = -jerk_max if a0 > 0.0 else jerk_max
        return
    s = 1.0 if v_flat < v_target else -1.0
    u0 = s * v0
    b0 = s * a0
    du = s * v_target - u0
    b_peak = a_max
    if b0 > a_max:
        dv1 = (b0 * b0 - a_max * a_max) / (2.0 * jerk_max)
    else:
        dv1 = (a_max * a_max - b0 * b0) / (2.0 * jerk_max)
    dv3 = a_max * a_max / (2.0 * jerk_max)
    hold = (du - dv1 - dv3) / a_max
    if hold < 0.0:
        # triangular profile: the peak is never reached
        b_peak = math.sqrt(max(jerk_max * du + 0.5 * b0 * b0, 0.0))
        hold = 0.0
    dur[0] = abs(b_peak - b0) / jerk_max
    jerk[0] = s * (jerk_max if b_peak >= b0 else -jerk_max)
    dur[1] = hold
    jerk[1] = 0.0
    dur[2] = b_peak / jerk_max
    jerk[2] = -s * jerk_max


@njit(cache=True)
def advance(x, v, a, j, dt):
    x1 = x + v * dt + 0.5 * a * dt * dt + j * dt * dt * dt / 6.0
    v1 = v + a * dt + 0.5 * j * dt * dt
    a1 = a + j * dt
    return x1, v1, a1


@njit(cache=True)
def profile_state(t, v0, a0, dur, jerk, v_target):
    """Distance, speed and acceleration ``t`` seconds into a profile."""
    x = 0.0
    v = v0
    a = a0
    if t <= 0.0:
        return 0.0, v0, a0
    remaining = t
    for k in range(NPHASE):
        d = dur[k]
        if d <= 0.0:
            continue
        if remaining <= d:
            return advance(x, v, a, jerk[k], remaining)
        x, v, a = advance(x, v, a, jerk[k], d)
        remaining -= d
    # cruise; snap the terminal state to remove rounding drift
    return x + v_target * remaining, v_target, 0.0


@njit(cache=True)
def profile_duration(dur):
    total = 0.0
    for k in range(NPHASE):
        total += dur[k]
    return total


@njit(cache=True)
def profile_time_to(dist, v0, a0, dur, jerk, v_target):
    """Time needed to cover ``dist`` metres; ``inf`` if never reached."""
    if dist <= 0.0:
        return 0.0
    x = 0.0
    v = v0
    a = a0
    elapsed = 0.0
    for k in range(NPHASE):
        d = dur[k]
        if d <= 0.0:
            continue
        xe, ve, ae = advance(x, v, a, jerk[k], d)
        if xe >= dist:
            lo = 0.0
            hi = d
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                xm, _vm, _am = advance(x, v, a, jerk[k], mid)
                if xm < dist:
                    lo = mid
                else:
                    hi = mid
            return elapsed + hi
        x, v, a = xe, ve, ae
        elapsed += d
    if v_target <= 0.0:
        return np.inf
    return elapsed + (dist - x) / v_target


@njit(cache=True)
def safety_distance(v_e, v_l, h, s0, a_min):
    return h * v_e + s0 + (v_e * v_e - v_l * v_l) / (2.0 * abs(a_min))


@njit(cache=True)
def headway_accel(gap, v_e, v_l, h, s0, k_p, k_v, a_min, a_max):
    cmd = k_p * (gap - (h * v_e + s0)) + k_v * (v_l - v_e)
    if cmd < a_min:
        return a_min
    if cmd > a_max:
        return a_max
    return cmd


@njit(cache=True)
def time_to_collision(gap, v_f, v_l):
    """Gap over closing speed; ``inf`` when the follower is not closing in."""
    if v_f <= v_l:
        return np.inf
    return gap / (v_f - v_l)
