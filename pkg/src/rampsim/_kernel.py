"""Compiled sub-step kernel of the continuous engine.

Vehicle state lives in two row-per-vehicle tables, ``F`` (floats) and ``I``
(ints), indexed by the column constants below.  Positions are unwrapped
arc lengths: on a ring a vehicle's position keeps growing and its place on
the road is the position modulo ``P``.  A vehicle still on an acceleration
lane sits at ``merge - remaining run`` in the same coordinate, with
``lane`` set to its ramp; mainline vehicles have ``lane == -1``.

Speed-tracking vehicles are evaluated in closed form from their profile
anchor; safety-mode vehicles are integrated with piecewise-constant jerk.
"""

import math

import numpy as np
from numba import njit

from ._kin import (build_profile, clamp_initial_accel, headway_accel, profile_state,
                   profile_time_to, safety_distance, time_to_collision)

# float columns
S, V, A, EXIT, MERGE, T0, S0A, V0, A0, D0, J0, TCR, DEL, DHAT, SHORT, PSHORT = (
    0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 12, 15, 16, 17, 18, 19)
NF = 20
# int columns
ALIVE, LANE, MODE, EVER, VID, ORIG, DEST, CONN, COMMIT = range(9)
NI = 9
# scratch columns
GAP, VLS, VG, VS, VPROJ, VVL, SPREV = range(7)
NSC = 7
LEAD, HASV, FOLBAD, GATE, PRED, BLOCK = range(6)
NSI = 6
# parameter vector
(P_P, P_RING, P_L, P_H, P_S0, P_VF, P_AMIN, P_AMAX, P_J, P_KP, P_KV, P_HYST, P_DT, P_TOL,
 P_TTC, P_STOPB, P_EMERG, P_DET) = range(18)
NPR = 18
# ramp table
R_MERGE, R_RUN, R_UP, R_DOWN, R_TM, R_LINK = range(6)
NRM = 6
# meta counters
M_NORD, M_NEX, M_NMG, M_NTTC, M_TTCDROP, M_COLL, M_GAPV, M_EMERG, M_OVERRUN, M_TOSAFE = range(10)
NMETA = 10
# float accumulators; per-ramp occupancy and per-link exited shortfall follow
F_MINGAP, F_MINMARG = 0, 1
F_BASE = 2

INF = np.inf


@njit(cache=True)
def wrap(x, P):
    return x - P * math.floor(x / P)


@njit(cache=True)
def rel(x, ref, P, ring):
    d = x - ref
    if ring:
        d -= P * math.floor(d / P + 0.5)
    return d


@njit(cache=True)
def required_gap(v_e, v_l, h, s0, amin):
    # the spacing rule turns negative when the leader is much faster; never
    # accept an overlap
    return max(safety_distance(v_e, v_l, h, s0, amin), 0.0)


@njit(cache=True)
def st_state(F, k, T, Vf):
    x, v, a = profile_state(T - F[k, T0], F[k, V0], F[k, A0], F[k, D0:D0 + 3], F[k, J0:J0 + 3], Vf)
    return F[k, S0A] + x, v, a


@njit(cache=True)
def anchor(F, I, k, T, PR):
    """Start a speed-tracking profile from the vehicle's current state."""
    Vf = PR[P_VF]
    a = clamp_initial_accel(F[k, V], F[k, A], PR[P_J])
    F[k, A] = a
    F[k, T0] = T
    F[k, S0A] = F[k, S]
    F[k, V0] = F[k, V]
    F[k, A0] = a
    build_profile(F[k, V], a, Vf, PR[P_AMAX], PR[P_J], F[k, D0:D0 + 3], F[k, J0:J0 + 3])
    if I[k, LANE] >= 0:
        dist = F[k, MERGE] - F[k, S]
        F[k, TCR] = T + profile_time_to(dist, F[k, V], a, F[k, D0:D0 + 3], F[k, J0:J0 + 3], Vf)
    else:
        F[k, TCR] = np.nan


@njit(cache=True)
def predict(F, I, k, Tnow, Tf, Vf):
    """Predicted (position, speed): profile if speed tracking, else constant speed."""
    if I[k, MODE] == 0:
        s, v, _a = st_state(F, k, Tf, Vf)
        return s, v
    dt = Tf - Tnow
    if dt < 0.0:
        dt = 0.0
    return F[k, S] + F[k, V] * dt, F[k, V]


@njit(cache=True)
def cross_time(F, I, k, p, Tnow, Vf):
    d = p - F[k, S]
    if d <= 0.0:
        return Tnow
    if I[k, MODE] == 0:
        if I[k, LANE] >= 0 and p == F[k, MERGE] and not math.isnan(F[k, TCR]):
            return max(F[k, TCR], Tnow)
        total = F[k, D0] + F[k, D0 + 1] + F[k, D0 + 2]
        if Tnow - F[k, T0] >= total:
            return Tnow + d / Vf
        t = profile_time_to(p - F[k, S0A], F[k, V0], F[k, A0], F[k, D0:D0 + 3], F[k, J0:J0 + 3], Vf)
        return max(F[k, T0] + t, Tnow)
    v = F[k, V]
    if v <= 1e-9:
        return INF
    return Tnow + d / v


@njit(cache=True)
def window_start(KEY, n, lo, P, ring):
    if ring:
        lo = wrap(lo, P)
    a = 0
    b = n
    while a < b:
        mid = (a + b) // 2
        if KEY[mid] < lo:
            a = mid + 1
        else:
            b = mid
    if ring and a == n:
        a = 0
    return a, lo


@njit(cache=True)
def link_of(arc, RM, m, P, ring):
    d = arc - RM[0, R_MERGE]
    if ring:
        d = wrap(d, P)
    link = 0
    for i in range(m):
        if RM[i, R_LINK] <= d:
            link = i
    return link


@njit(cache=True)
def _reset_virtual(F, SC, SI, k):
    SI[k, HASV] = 0
    SI[k, FOLBAD] = 0
    SI[k, GATE] = 1
    SI[k, PRED] = -1
    SI[k, BLOCK] = 0
    SC[k, VG] = INF
    SC[k, VS] = 0.0
    SC[k, VPROJ] = INF
    SC[k, VVL] = 0.0
    F[k, PSHORT] = 0.0


@njit(cache=True)
def prepare(F, I, SC, SI, ORD, KEY, RL, RN, meta, PR, RM, T, cap):
    """Order the mainline, find leaders and evaluate merge-area predictions."""
    P = PR[P_P]
    ring = PR[P_RING] > 0.5
    L = PR[P_L]
    h = PR[P_H]
    s0 = PR[P_S0]
    Vf = PR[P_VF]
    amin = PR[P_AMIN]
    tol = PR[P_TOL]
    m = RM.shape[0]

    n = 0
    for r in range(meta[M_NORD]):
        k = ORD[r]
        if I[k, ALIVE] == 1 and I[k, LANE] == -1:
            ORD[n] = k
            n += 1
    meta[M_NORD] = n
    for r in range(n):
        KEY[r] = wrap(F[ORD[r], S], P) if ring else F[ORD[r], S]
    for r in range(1, n):
        kk = ORD[r]
        kv = KEY[r]
        q = r - 1
        while q >= 0 and KEY[q] > kv:
            ORD[q + 1] = ORD[q]
            KEY[q + 1] = KEY[q]
            q -= 1
        ORD[q + 1] = kk
        KEY[q + 1] = kv

    for r in range(n):
        k = ORD[r]
        _reset_virtual(F, SC, SI, k)
        l = -1
        dist = 0.0
        if r + 1 < n:
            l = ORD[r + 1]
            dist = KEY[r + 1] - KEY[r]
        elif ring and n > 1:
            l = ORD[0]
            dist = KEY[0] + P - KEY[r]
        SI[k, LEAD] = l
        if l >= 0:
            gap = dist - L
            SC[k, GAP] = gap
            SC[k, VLS] = F[l, V]
            short = required_gap(F[k, V], F[l, V], h, s0, amin) - gap
            # round-off on exact slot spacing must not register
            if short < tol:
                short = 0.0
        else:
            SC[k, GAP] = INF
            SC[k, VLS] = 0.0
            short = 0.0
        F[k, SHORT] = short
        if short > F[k, DEL]:
            F[k, DEL] = short

    for i in range(m):
        RN[i] = 0
    for k in range(cap):
        if I[k, ALIVE] == 1 and I[k, LANE] >= 0:
            i = I[k, LANE]
            RL[i, RN[i]] = k
            RN[i] += 1
            _reset_virtual(F, SC, SI, k)
            SI[k, LEAD] = -1
            SC[k, GAP] = INF
            F[k, SHORT] = 0.0
    for i in range(m):
        # front of the ramp first
        for r in range(1, RN[i]):
            kk = RL[i, r]
            q = r - 1
            while q >= 0 and F[RL[i, q], S] < F[kk, S]:
                RL[i, q + 1] = RL[i, q]
                q -= 1
            RL[i, q + 1] = kk

    for i in range(m):
        nr = RN[i]
        if nr == 0:
            continue
        mi = RM[i, R_MERGE]
        up = RM[i, R_UP]
        down = RM[i, R_DOWN]
        r0, lo = window_start(KEY, n, mi - up, P, ring)

        for q in range(nr):
            e = RL[i, q]
            me = F[e, MERGE]
            if q > 0:
                p = RL[i, q - 1]
                SI[e, PRED] = p
                if I[p, MODE] == 1:
                    SI[e, BLOCK] = 1
            tm = cross_time(F, I, e, me, T, Vf)
            if tm < INF:
                _pe, ve = predict(F, I, e, T, tm, Vf)
                bestL = INF
                lidx = -1
                vL = 0.0
                bestF = -INF
                fidx = -1
                vF = 0.0
                for cnt in range(n):
                    r = r0 + cnt
                    if ring:
                        r %= n
                    elif r >= n:
                        break
                    off = KEY[r] - lo
                    if ring:
                        off = wrap(off, P)
                    if off > up + down:
                        break
                    c = ORD[r]
                    pc, vc = predict(F, I, c, T, tm, Vf)
                    if pc >= F[c, EXIT]:
                        continue
                    rr = rel(pc, me, P, ring)
                    if rr >= 0.0:
                        if rr < bestL:
                            bestL = rr
                            lidx = c
                            vL = vc
                    elif rr > bestF:
                        bestF = rr
                        fidx = c
                        vF = vc
                for qq in range(q):
                    c = RL[i, qq]
                    pc, vc = predict(F, I, c, T, tm, Vf)
                    rr = pc - F[c, MERGE]
                    if rr >= 0.0 and pc < F[c, EXIT] and rr < bestL:
                        bestL = rr
                        lidx = c
                        vL = vc
                if lidx >= 0:
                    yhat = bestL - L
                    shat = required_gap(ve, vL, h, s0, amin)
                    SI[e, HASV] = 1
                    SC[e, VG] = yhat
                    SC[e, VS] = shat
                    ps = shat - yhat
                    if ps > tol:
                        F[e, PSHORT] = ps
                        if ps > F[e, DHAT]:
                            F[e, DHAT] = ps
                    if I[lidx, LANE] >= 0:
                        SC[e, VPROJ] = F[lidx, S] - F[lidx, MERGE] - (me - F[e, S]) - L
                    else:
                        SC[e, VPROJ] = rel(F[lidx, S], me, P, ring) - (me - F[e, S]) - L
                    SC[e, VVL] = F[lidx, V]
                if fidx >= 0:
                    yf = -bestF - L
                    need = max(vF * vF - ve * ve, 0.0) / (2.0 * abs(amin)) + 0.5 * s0
                    if yf < need - tol:
                        SI[e, FOLBAD] = 1

            if I[e, MODE] == 1 and I[e, COMMIT] == 0:
                gate = 1
                if q > 0:
                    gate = 0
                else:
                    d = me - F[e, S]
                    ve = F[e, V]
                    tc = 0.0
                    if d > 0.0:
                        tc = d / max(ve, 1.0)
                    bestL = INF
                    vL = 0.0
                    bestF = -INF
                    vF = 0.0
                    for cnt in range(n):
                        r = r0 + cnt
                        if ring:
                            r %= n
                        elif r >= n:
                            break
                        off = KEY[r] - lo
                        if ring:
                            off = wrap(off, P)
                        if off > up + down:
                            break
                        c = ORD[r]
                        pc, vc = predict(F, I, c, T, T + tc, Vf)
                        if pc >= F[c, EXIT]:
                            continue
                        rr = rel(pc, me, P, ring)
                        if rr >= 0.0:
                            if rr < bestL:
                                bestL = rr
                                vL = vc
                        elif rr > bestF:
                            bestF = rr
                            vF = vc
                    b2 = 2.0 * abs(amin)
                    if bestL < INF and bestL - L < max(ve * ve - vL * vL, 0.0) / b2 + PR[P_EMERG]:
                        gate = 0
                    if bestF > -INF and -bestF - L < max(vF * vF - ve * ve, 0.0) / b2 + s0:
                        gate = 0
                    # past the last point where a stop at the hold line is possible
                    if gate == 1 and d - 0.5 <= ve * ve / b2 + ve * PR[P_DT] + 0.05:
                        I[e, COMMIT] = 1
                SI[e, GATE] = gate

        # mainline vehicles approaching the merge point
        for cnt in range(n):
            r = r0 + cnt
            if ring:
                r %= n
            elif r >= n:
                break
            off = KEY[r] - lo
            if ring:
                off = wrap(off, P)
            if off >= up:
                break
            c = ORD[r]
            dist = up - off
            mc = F[c, S] + dist
            if mc > F[c, EXIT]:
                continue
            tc = cross_time(F, I, c, mc, T, Vf)
            if tc == INF:
                continue
            best = INF
            eidx = -1
            vE = 0.0
            for q in range(nr):
                e = RL[i, q]
                pe, vv = predict(F, I, e, T, tc, Vf)
                rr = pe - F[e, MERGE]
                if rr < 0.0 and I[e, COMMIT] == 1:
                    # committed vehicles will cross however slowly they move
                    rr = 0.0
                    pe = F[e, MERGE]
                if rr >= 0.0 and pe < F[e, EXIT] and rr < best:
                    best = rr
                    eidx = e
                    vE = vv
            if eidx < 0:
                continue
            l = SI[c, LEAD]
            if l >= 0:
                pl, _vl = predict(F, I, l, T, tc, Vf)
                if pl < F[l, EXIT]:
                    rl = rel(pl, mc, P, ring)
                    if rl < best:
                        continue
            _pc, vc = predict(F, I, c, T, tc, Vf)
            yhat = best - L
            shat = required_gap(vc, vE, h, s0, amin)
            if SI[c, HASV] == 0 or yhat - shat < SC[c, VG] - SC[c, VS]:
                SI[c, HASV] = 1
                SC[c, VG] = yhat
                SC[c, VS] = shat
                SC[c, VPROJ] = (F[eidx, S] - F[eidx, MERGE]) + dist - L
                SC[c, VVL] = F[eidx, V]
                ps = shat - yhat
                if ps < tol:
                    ps = 0.0
                if ps > F[c, PSHORT]:
                    F[c, PSHORT] = ps
                if ps > F[c, DHAT]:
                    F[c, DHAT] = ps


@njit(cache=True)
def _update_mode(F, I, SC, SI, k, T, PR, meta):
    h = PR[P_H]
    s0 = PR[P_S0]
    amin = PR[P_AMIN]
    tol = PR[P_TOL]
    hyst = PR[P_HYST]
    l = SI[k, LEAD]
    if I[k, MODE] == 0:
        bad = False
        if l >= 0 and SC[k, GAP] < required_gap(F[k, V], SC[k, VLS], h, s0, amin) - tol:
            bad = True
        if SI[k, HASV] == 1 and SC[k, VG] < SC[k, VS] - tol:
            bad = True
        if I[k, LANE] >= 0 and (SI[k, FOLBAD] == 1 or SI[k, BLOCK] == 1):
            bad = True
        if bad:
            I[k, MODE] = 1
            I[k, EVER] = 1
            I[k, COMMIT] = 0
            meta[M_TOSAFE] += 1
        return
    if I[k, LANE] >= 0:
        return
    if l >= 0 and SC[k, GAP] < required_gap(F[k, V], SC[k, VLS], h, s0, amin) + hyst:
        return
    if SI[k, HASV] == 1 and SC[k, VG] < SC[k, VS] + hyst:
        return
    I[k, MODE] = 0
    anchor(F, I, k, T, PR)


@njit(cache=True)
def _safety_step(F, I, SC, SI, k, PR, meta):
    L = PR[P_L]
    h = PR[P_H]
    s0 = PR[P_S0]
    Vf = PR[P_VF]
    amin = PR[P_AMIN]
    amax = PR[P_AMAX]
    kp = PR[P_KP]
    kv = PR[P_KV]
    dt = PR[P_DT]
    s = F[k, S]
    v = F[k, V]
    a = F[k, A]
    cmd = INF
    l = SI[k, LEAD]
    if l >= 0:
        cmd = min(cmd, headway_accel(SC[k, GAP], v, SC[k, VLS], h, s0, kp, kv, amin, amax))
    # a ramp vehicle yields even to a virtual leader still level with or
    # behind it; a mainline vehicle only follows a ramp vehicle already ahead
    if SI[k, HASV] == 1 and SC[k, VPROJ] < INF and (SC[k, VPROJ] > 0.0 or I[k, LANE] >= 0):
        cmd = min(cmd, headway_accel(SC[k, VPROJ], v, SC[k, VVL], h, s0, kp, kv, amin, amax))
    hard = INF
    if I[k, LANE] >= 0 and I[k, COMMIT] == 0 and SI[k, GATE] == 0:
        # hold short of the merge point (or the vehicle queued ahead)
        target = F[k, MERGE] - 0.5
        p = SI[k, PRED]
        if p >= 0:
            target = min(target, F[p, S] - L - 1.0)
        d = target - s
        if d <= 0.0:
            cmd = min(cmd, 0.0 if v <= 0.0 else amin)
            if v > 0.0:
                hard = amin
        else:
            need = v * v / (2.0 * d)
            if need >= PR[P_STOPB]:
                cmd = min(cmd, -need)
                if need >= 0.8 * abs(amin):
                    hard = max(-need, amin)
    cap = max(kv * (Vf - v), amin)
    if cmd == INF:
        cmd = cap
    else:
        cmd = min(cmd, cap)
    cmd = min(max(cmd, amin), amax)
    da = cmd - a
    lim = PR[P_J] * dt
    if da > lim:
        da = lim
    elif da < -lim:
        da = -lim
    a1 = a + da
    if hard < INF:
        a1 = hard
    if l >= 0:
        vl = SC[k, VLS]
        need = max(v * v - vl * vl, 0.0) / (2.0 * abs(amin)) + PR[P_EMERG] + v * dt
        if SC[k, GAP] < need:
            a1 = amin
            meta[M_EMERG] += 1
    if SI[k, HASV] == 1 and 0.0 < SC[k, VPROJ] < INF:
        vl = SC[k, VVL]
        need = max(v * v - vl * vl, 0.0) / (2.0 * abs(amin)) + PR[P_EMERG] + v * dt
        if SC[k, VPROJ] < need:
            a1 = amin
            meta[M_EMERG] += 1
    j = (a1 - a) / dt
    s1 = s + v * dt + 0.5 * a * dt * dt + j * dt * dt * dt / 6.0
    v1 = v + a * dt + 0.5 * j * dt * dt
    if v1 <= 0.0:
        # stopped within the sub-step
        v1 = 0.0
        s1 = s + 0.5 * v * dt
        if a1 < 0.0:
            a1 = 0.0
    if s1 < s:
        s1 = s
    F[k, S] = s1
    F[k, V] = v1
    F[k, A] = a1


@njit(cache=True)
def _move(F, I, SC, SI, k, T1, PR, meta):
    SC[k, SPREV] = F[k, S]
    if I[k, MODE] == 0:
        s1, v1, a1 = st_state(F, k, T1, PR[P_VF])
        F[k, S] = s1
        F[k, V] = v1
        F[k, A] = a1
    else:
        _safety_step(F, I, SC, SI, k, PR, meta)


@njit(cache=True)
def advance(F, I, SC, SI, ORD, KEY, RL, RN, meta, facc, flowc, PR, RM, FP, ZT,
            EVX, EVM, TTC, t_start, nsub, cap):
    """Integrate ``nsub`` sub-steps starting at ``t_start``."""
    P = PR[P_P]
    ring = PR[P_RING] > 0.5
    L = PR[P_L]
    h = PR[P_H]
    s0 = PR[P_S0]
    Vf = PR[P_VF]
    amin = PR[P_AMIN]
    dt = PR[P_DT]
    tol = PR[P_TOL]
    det = PR[P_DET]
    m = RM.shape[0]
    nz = ZT.shape[0]
    npnt = FP.shape[0]
    for jj in range(nsub):
        T = t_start + jj * dt
        T1 = t_start + (jj + 1) * dt
        prepare(F, I, SC, SI, ORD, KEY, RL, RN, meta, PR, RM, T, cap)
        n = meta[M_NORD]

        for r in range(n):
            k = ORD[r]
            l = SI[k, LEAD]
            if l < 0:
                continue
            gap = SC[k, GAP]
            if jj == 0:
                margin = gap - required_gap(F[k, V], F[l, V], h, s0, amin)
                if margin < -tol:
                    meta[M_GAPV] += 1
                if margin < facc[F_MINMARG]:
                    facc[F_MINMARG] = margin
            if gap <= 0.0:
                meta[M_COLL] += 1
            if gap < facc[F_MINGAP]:
                facc[F_MINGAP] = gap
            vf = F[k, V]
            vl = F[l, V]
            if vf > vl:
                for z in range(nz):
                    rr = rel(KEY[r], ZT[z, 0], P, ring)
                    if ZT[z, 1] <= rr <= ZT[z, 2]:
                        ttc = time_to_collision(gap, vf, vl)
                        if ttc <= PR[P_TTC]:
                            nt = meta[M_NTTC]
                            if nt < TTC.shape[0]:
                                TTC[nt, 0] = T
                                TTC[nt, 1] = I[l, VID]
                                TTC[nt, 2] = I[k, VID]
                                TTC[nt, 3] = ttc
                                meta[M_NTTC] = nt + 1
                            else:
                                meta[M_TTCDROP] += 1
                        break

        for i in range(m):
            tot = 0.0
            for r in range(n):
                rr = rel(KEY[r], RM[i, R_MERGE], P, ring)
                lo = max(rr - L, 0.0)
                hi = min(rr, det)
                if hi > lo:
                    tot += hi - lo
            facc[F_BASE + i] += 100.0 * tot / det

        for r in range(n):
            _update_mode(F, I, SC, SI, ORD[r], T, PR, meta)
        for i in range(m):
            for q in range(RN[i]):
                _update_mode(F, I, SC, SI, RL[i, q], T, PR, meta)

        for r in range(n):
            _move(F, I, SC, SI, ORD[r], T1, PR, meta)
        for i in range(m):
            for q in range(RN[i]):
                _move(F, I, SC, SI, RL[i, q], T1, PR, meta)

        # merges
        for i in range(m):
            for q in range(RN[i]):
                e = RL[i, q]
                me = F[e, MERGE]
                if F[e, S] < me:
                    continue
                if I[e, MODE] == 1 and I[e, COMMIT] == 0:
                    F[e, S] = me - 0.01
                    F[e, V] = 0.0
                    F[e, A] = 0.0
                    meta[M_OVERRUN] += 1
                    continue
                if q > 0 and I[RL[i, q - 1], LANE] >= 0:
                    # never overtake the vehicle queued ahead
                    F[e, S] = me - 0.01
                    F[e, V] = 0.0
                    F[e, A] = 0.0
                    if I[e, MODE] == 0:
                        I[e, MODE] = 1
                        I[e, EVER] = 1
                        meta[M_TOSAFE] += 1
                    meta[M_OVERRUN] += 1
                    continue
                if I[e, MODE] == 0 and not math.isnan(F[e, TCR]):
                    tcr = min(max(F[e, TCR], T), T1)
                else:
                    sp = SC[e, SPREV]
                    tcr = T + dt * (me - sp) / max(F[e, S] - sp, 1e-12)
                I[e, LANE] = -1
                I[e, COMMIT] = 0
                F[e, TCR] = np.nan
                nm = meta[M_NMG]
                EVM[nm, 0] = I[e, VID]
                EVM[nm, 1] = tcr
                meta[M_NMG] = nm + 1
                no = meta[M_NORD]
                ORD[no] = e
                meta[M_NORD] = no + 1

        # crossings and exits
        for r in range(meta[M_NORD]):
            k = ORD[r]
            if I[k, ALIVE] == 0 or I[k, LANE] != -1:
                continue
            sp = SC[k, SPREV]
            s1 = F[k, S]
            for p in range(npnt):
                if ring:
                    c = math.floor((s1 - FP[p]) / P) - math.floor((sp - FP[p]) / P)
                    if c > 0:
                        flowc[p] += c
                elif sp < FP[p] <= s1:
                    flowc[p] += 1
            if s1 >= F[k, EXIT]:
                tx = T + dt * (F[k, EXIT] - sp) / max(s1 - sp, 1e-12)
                tx = min(max(tx, T), T1)
                I[k, ALIVE] = 0
                nx = meta[M_NEX]
                EVX[nx, 0] = I[k, VID]
                EVX[nx, 1] = tx
                EVX[nx, 2] = k
                meta[M_NEX] = nx + 1
                if I[k, CONN] == 1:
                    lk = link_of(wrap(F[k, EXIT], P) if ring else F[k, EXIT], RM, m, P, ring)
                    facc[F_BASE + m + lk] += F[k, DEL] + F[k, DHAT]

    prepare(F, I, SC, SI, ORD, KEY, RL, RN, meta, PR, RM, t_start + nsub * dt, cap)


@njit(cache=True)
def release_check(F, I, cap, T, i, me, s_meter, rdur, rjerk, t_m, t_end, extra, mode, PR, sample_dt):
    """M3 (always) and M4 (``mode`` 1: merge to full speed, 2: merge instant)."""
    P = PR[P_P]
    ring = PR[P_RING] > 0.5
    L = PR[P_L]
    h = PR[P_H]
    s0 = PR[P_S0]
    Vf = PR[P_VF]
    amin = PR[P_AMIN]
    # M3 against the last vehicle released from this ramp, if it is held
    back = -1
    for c in range(cap):
        if I[c, ALIVE] == 1 and I[c, LANE] == i:
            if back < 0 or F[c, S] < F[back, S]:
                back = c
    if back >= 0 and I[back, MODE] == 1:
        gap = F[back, S] - s_meter - L
        if gap < required_gap(0.0, F[back, V], h, s0, amin) + extra - 1e-9:
            return False
    if mode == 0:
        return True
    Tm = T + t_m
    bestL = INF
    lidx = -1
    bestF = -INF
    fidx = -1
    for c in range(cap):
        if I[c, ALIVE] == 0:
            continue
        lane = I[c, LANE]
        pc, _vc = predict(F, I, c, T, Tm, Vf)
        if lane == i and pc < F[c, MERGE]:
            # would still be queued on the ramp when the ego reaches the merge point
            return False
        if I[c, CONN] == 0 or pc >= F[c, EXIT]:
            continue
        if lane >= 0 and pc < F[c, MERGE]:
            continue
        rr = rel(pc, me, P, ring)
        if rr >= 0.0:
            if rr < bestL:
                bestL = rr
                lidx = c
        elif rr > bestF:
            bestF = rr
            fidx = c
    if lidx < 0 and fidx < 0:
        return True
    t = t_m
    while True:
        xe, ve, _ae = profile_state(t, 0.0, 0.0, rdur, rjerk, Vf)
        pe = s_meter + xe - me
        Tt = T + t
        if lidx >= 0:
            pl, vl = predict(F, I, lidx, T, Tt, Vf)
            if pl < F[lidx, EXIT]:
                gap = rel(pl, me, P, ring) - pe - L
                if gap < required_gap(ve, vl, h, s0, amin) + extra - 1e-9:
                    return False
        if fidx >= 0:
            pf, vf = predict(F, I, fidx, T, Tt, Vf)
            if pf < F[fidx, EXIT]:
                gap = pe - rel(pf, me, P, ring) - L
                if gap < required_gap(vf, ve, h, s0, amin) + extra - 1e-9:
                    return False
        if mode == 2 or t >= t_end:
            break
        t = min(t + sample_dt, t_end)
    return True


@njit(cache=True)
def merge_area_count(F, I, cap, i, me, up, down, PR):
    P = PR[P_P]
    ring = PR[P_RING] > 0.5
    cnt = 0
    for c in range(cap):
        if I[c, ALIVE] == 0 or I[c, CONN] == 0:
            continue
        lane = I[c, LANE]
        if lane == i:
            cnt += 1
        elif lane == -1:
            rr = rel(F[c, S], me, P, ring)
            if -up <= rr <= down:
                cnt += 1
    return cnt
