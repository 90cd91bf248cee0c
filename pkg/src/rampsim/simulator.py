"""Continuous, sub-stepped world engine.

Every τ step runs exits (during the previous sub-steps), the policy's
releases, then ``n_sub`` sub-steps of vehicle dynamics, and finally the
step's arrivals.  Vehicle tables and the sub-step loop live in
:mod:`rampsim._kernel`; this module owns queues, policies, the trace and
the run manifest.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from . import _kernel as K
from . import dynamics as dyn
from .core import ArrivalStream, DemandSpec, check_routing, stream
from .lattice import SlotSystem
from .policies import MonitorSample, Policy, compute_monitors
from .trace import Trace

FREE_FLOW_TOL = 1e-3
TTC_MAX = 20.0
STOP_BRAKE = 0.5
EMERGENCY_MARGIN = 1.0
DETECTOR_LEN = 100.0
M4_SAMPLE_DT = 0.05


def substeps(tau: float, dt: float) -> int:
    return int(math.ceil(tau / dt - 1e-9))


def _link_offsets(system: SlotSystem) -> np.ndarray:
    g = system.geometry
    return np.array([g.along(g.merge_point[0], x) for x in g.merge_point])


class _SimContext:
    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.m = sim.m
        self.tau = sim.tau
        self.shape = sim.system.geometry.shape
        self.step = 0
        self.time = 0.0
        self.merge_tx = 0

    @property
    def queues(self):
        return [len(q) for q in self.sim.queues]

    def free_flow(self) -> bool:
        return self.sim.free_flow()

    def monitor(self, tick: bool = False) -> MonitorSample:
        return self.sim.monitor(tick)

    def dsg_spacing(self) -> float:
        return self.sim.dsg_spacing()

    def occupancy(self, i: int) -> float:
        return self.sim.occupancy(i)

    def try_release(self, i: int, extra_gap: float = 0.0, check_m4=True) -> bool:
        return self.sim.try_release(i, extra_gap, check_m4)


class Simulator:
    """One run of the continuous engine.

    ``initial`` is ``"empty"``, ``"free_flow"`` (every slot occupied), an
    integer number of randomly chosen occupied slots, or a dict with
    ``kind`` ``"congested"`` (``n``, ``v0``, optional ``gap``) or
    ``"random"`` (``n`` and ``v`` ranges).
    """

    def __init__(self, system: SlotSystem, R, demand: DemandSpec, policy: Policy,
                 initial="empty", ctrl: dyn.ControllerParams | None = None,
                 flow_points=None, ttc_ramps=(1,), ttc_zone=(-100.0, None),
                 penetration: float = 1.0, idle_steps: int = 0):
        self.system = system
        self.params = system.params
        self.geometry = system.geometry
        self.m = system.m
        self.tau = self.params.tau
        self.ctrl = ctrl or dyn.ControllerParams()
        self.n_sub = substeps(self.tau, self.ctrl.dt)
        self.dt = self.tau / self.n_sub
        self.R = check_routing(R)
        if self.geometry.shape == "straight" and np.any(np.tril(self.R, -1) > 0):
            raise ValueError("straight road routing must be upper triangular")
        self.demand = demand
        self.arrivals = ArrivalStream(demand, self.R)
        self.policy = policy
        self.penetration = float(penetration)
        self.idle_steps = int(idle_steps)
        self._pen_rng = stream(demand.seed, "penetration")
        self.queues = [deque() for _ in range(self.m)]
        self.trace = Trace(self.m, self.tau, getattr(policy, "kind", ""))
        self.t = 0
        self.ctx = _SimContext(self)
        self._setup_tables()
        self._setup_ramps(flow_points, ttc_ramps, ttc_zone)
        self._place_initial(initial)
        if self.idle_steps > 0:
            # vehicles keep circulating until the idle period ends
            self.F[self._alive(), K.EXIT] = math.inf
        self._prepare()

    # ----------------------------------------------------------- set-up
    def _setup_tables(self, cap: int | None = None):
        cap = cap or max(4 * self.system.n_c + 64 * self.m, 128)
        self.cap = cap
        self.F = np.zeros((cap, K.NF))
        self.I = np.zeros((cap, K.NI), dtype=np.int64)
        self.SC = np.zeros((cap, K.NSC))
        self.SI = np.zeros((cap, K.NSI), dtype=np.int64)
        self.ORD = np.zeros(cap, dtype=np.int64)
        self.KEY = np.zeros(cap)
        self.RL = np.zeros((self.m, cap), dtype=np.int64)
        self.RN = np.zeros(self.m, dtype=np.int64)
        self.EVX = np.zeros((cap, 3))
        self.EVM = np.zeros((cap, 2))
        self.free = list(range(cap - 1, -1, -1))
        if not hasattr(self, "meta"):
            self.meta = np.zeros(K.NMETA, dtype=np.int64)

    def _grow(self):
        old = (self.F, self.I, self.SC, self.SI, self.ORD, self.KEY, self.RL, self.cap)
        self._setup_tables(2 * self.cap)
        F, I, SC, SI, ORD, KEY, RL, cap = old
        self.F[:cap] = F
        self.I[:cap] = I
        self.SC[:cap] = SC
        self.SI[:cap] = SI
        self.ORD[:cap] = ORD
        self.KEY[:cap] = KEY
        self.RL[:, :cap] = RL
        self.free = list(range(self.cap - 1, cap - 1, -1))
        self.TTC = np.zeros((self.n_sub * self.cap // 2, 4))

    def _setup_ramps(self, flow_points, ttc_ramps, ttc_zone):
        p = self.params
        c = self.ctrl
        g = self.geometry
        pitch = self.system.slot_pitch
        self.PR = np.zeros(K.NPR)
        vals = {
            K.P_P: g.P, K.P_RING: 1.0 if g.shape == "ring" else 0.0, K.P_L: p.L, K.P_H: p.h,
            K.P_S0: p.S0, K.P_VF: p.Vf, K.P_AMIN: p.a_min, K.P_AMAX: p.a_max, K.P_J: p.J_max,
            K.P_KP: c.k_p, K.P_KV: c.k_v, K.P_HYST: c.hysteresis_margin, K.P_DT: self.dt,
            K.P_TOL: 1e-6, K.P_TTC: TTC_MAX, K.P_STOPB: STOP_BRAKE,
            K.P_EMERG: EMERGENCY_MARGIN, K.P_DET: DETECTOR_LEN,
        }
        for k, v in vals.items():
            self.PR[k] = v
        self.RM = np.zeros((self.m, K.NRM))
        offs = _link_offsets(self.system)
        self.up = np.zeros(self.m)
        self.down = np.zeros(self.m)
        for i, r in enumerate(self.system.ramps):
            run = g.ramp_run[i]
            up, down = self.system.merge_area(i)
            self.up[i], self.down[i] = up, down
            self.RM[i] = (g.merge_point[i], run, up, down, r.t_merge, offs[i])
        prof = dyn.speed_tracking_profile(0.0, 0.0, p)
        self.rest_dur = np.ascontiguousarray(prof.durations, dtype=float)
        self.rest_jerk = np.ascontiguousarray(prof.jerks, dtype=float)
        self.t_full = prof.duration
        if flow_points is None:
            flow_points = [
                (g.merge_point[i] - g.ramp_run[i] + r.land_offset + pitch / 2) % g.P
                if g.shape == "ring" else
                min(g.merge_point[i] - g.ramp_run[i] + r.land_offset + pitch / 2, g.P)
                for i, r in enumerate(self.system.ramps)
            ]
        self.FP = np.asarray(flow_points, dtype=float)
        self.flowc = np.zeros(len(self.FP), dtype=np.int64)
        self.trace.flow_points = [float(x) for x in self.FP]
        zones = []
        for i in ttc_ramps or ():
            if i >= self.m:
                continue
            lo, hi = ttc_zone
            zones.append((g.merge_point[i], lo, self.down[i] if hi is None else hi))
        self.ZT = np.asarray(zones, dtype=float).reshape(-1, 3)
        self.TTC = np.zeros((self.n_sub * self.cap // 2, 4))
        self.facc = np.zeros(K.F_BASE + 2 * self.m)
        self.facc[K.F_MINGAP] = math.inf
        self.facc[K.F_MINMARG] = math.inf
        self.occ_ticks = np.zeros(self.m, dtype=np.int64)
        self.exit_pos = np.array(g.offramp_pos)

    def _connected(self) -> int:
        if self.penetration >= 1.0:
            return 1
        return int(self._pen_rng.random() < self.penetration)

    def _alloc(self) -> int:
        if not self.free:
            self._grow()
        return self.free.pop()

    def _exit_coord(self, s: float, dest: int) -> float:
        g = self.geometry
        arc = s % g.P if g.shape == "ring" else s
        return s + g.along(arc, self.exit_pos[dest])

    def _add(self, s, v, mode, origin, dest, vid, lane=-1, ever=0):
        k = self._alloc()
        F, I = self.F, self.I
        F[k] = 0.0
        I[k] = 0
        F[k, K.S] = s
        F[k, K.V] = v
        F[k, K.TCR] = math.nan
        I[k, K.ALIVE] = 1
        I[k, K.LANE] = lane
        I[k, K.MODE] = mode
        I[k, K.EVER] = ever
        I[k, K.VID] = vid
        I[k, K.ORIG] = origin
        I[k, K.DEST] = dest
        I[k, K.CONN] = self.conn[vid]
        if lane >= 0:
            F[k, K.MERGE] = self.geometry.merge_point[lane]
            F[k, K.EXIT] = F[k, K.MERGE] + self.geometry.along(F[k, K.MERGE], self.exit_pos[dest])
        else:
            F[k, K.MERGE] = math.nan
            F[k, K.EXIT] = self._exit_coord(s, dest)
            n = self.meta[K.M_NORD]
            self.ORD[n] = k
            self.meta[K.M_NORD] = n + 1
        if mode == dyn.SPEED_TRACKING:
            K.anchor(F, I, k, self.t * self.tau, self.PR)
        return k

    def _new_vehicle(self, origin, dest, t_arr) -> int:
        vid = self.trace.add_vehicle(origin, dest, t_arr)
        self.conn.append(self._connected())
        return vid

    def _link_of(self, pos: float) -> int:
        g = self.geometry
        d = g.along(g.merge_point[0], pos)
        offs = self.RM[:, K.R_LINK]
        return int(max(np.searchsorted(offs, d, side="right") - 1, 0))

    def _random_dest(self, rng, cdf, link):
        return int(min(np.searchsorted(cdf[link], rng.random(), side="right"), self.m - 1))

    def _place_initial(self, initial):
        self.conn: list[int] = []
        if initial in ("empty", 0, None):
            return
        rng = stream(self.demand.seed, "initial")
        cdf = np.cumsum(self.R, axis=1)
        p = self.params
        if isinstance(initial, dict):
            kind = initial.get("kind")
            if kind == "congested":
                n = int(initial["n"])
                v0 = float(initial["v0"])
                gap = float(initial.get("gap", p.h * v0 + p.S0))
                if gap < dyn.safety_distance(v0, v0, p) - 1e-9:
                    raise ValueError("congested gap violates the safe spacing")
                spacing = gap + p.L
                if n * spacing > self.geometry.P + 1e-9:
                    raise ValueError("congested platoon does not fit on the road")
                pos = [float(initial.get("start", 0.0)) + q * spacing for q in range(n)]
                speeds = [v0] * n
            elif kind == "random":
                pos, speeds = self._random_platoon(rng, initial)
            else:
                raise ValueError(f"unknown initial condition {kind!r}")
            for s, v in zip(pos, speeds):
                s = s % self.geometry.P if self.geometry.shape == "ring" else s
                link = self._link_of(s)
                dest = self._random_dest(rng, cdf, link)
                vid = self._new_vehicle(link, dest, math.nan)
                self._add(s, v, dyn.SAFETY, link, dest, vid, ever=1)
            return
        n_c = self.system.n_c
        n = n_c if initial in ("free_flow", "full") else int(initial)
        if not 0 <= n <= n_c:
            raise ValueError("initial vehicle count exceeds slot capacity")
        # same draw order as the slot chain so both engines start identically
        ids = np.sort(rng.choice(n_c, size=n, replace=False)) if n < n_c else np.arange(n_c)
        for s in ids:
            pos = float(self.system.slot_position(s, 0))
            link = self._link_of(pos)
            dest = self._random_dest(rng, cdf, link)
            vid = self._new_vehicle(link, dest, math.nan)
            self._add(pos, p.Vf, dyn.SPEED_TRACKING, link, dest, vid)

    def _random_platoon(self, rng, spec):
        """Random speeds, safe spacing, leftover road spread at random.

        Gap ``q`` sits behind vehicle ``q``; the last gap closes the ring.
        Speeds are redrawn a few times when the platoon does not fit.
        """
        p = self.params
        lo, hi = spec.get("n", (20, 60))
        vlo, vhi = spec.get("v", (0.0, p.Vf))
        n = int(rng.integers(lo, hi + 1))
        for _ in range(100):
            speeds = rng.uniform(vlo, vhi, size=n)
            # the spacing rule can go negative behind a fast leader; keep at least S0
            sd = dyn.safety_distance(np.roll(speeds, -1), speeds, p)
            need = np.maximum(sd, p.S0) + p.L
            slack = self.geometry.P - need.sum()
            if slack >= 0:
                break
        else:
            raise ValueError("random platoon does not fit on the road; lower n")
        gaps = need + slack * rng.dirichlet(np.ones(n))
        pos = np.concatenate([[0.0], np.cumsum(gaps[:-1])])
        # vehicle 0 leads; the others follow upstream
        return [float((-x) % self.geometry.P) for x in pos], [float(v) for v in speeds]

    def _prepare(self):
        K.prepare(self.F, self.I, self.SC, self.SI, self.ORD, self.KEY, self.RL, self.RN,
                  self.meta, self.PR, self.RM, self.t * self.tau, self.cap)

    # ------------------------------------------------------ policy hooks
    def _alive(self) -> np.ndarray:
        return np.flatnonzero(self.I[:, K.ALIVE] == 1)

    def _links(self, idx) -> np.ndarray:
        lane = self.I[idx, K.LANE]
        g = self.geometry
        arc = self.F[idx, K.S]
        d = arc - g.merge_point[0]
        if g.shape == "ring":
            d = np.mod(d, g.P)
        link = np.searchsorted(self.RM[:, K.R_LINK], d, side="right") - 1
        link = np.clip(link, 0, self.m - 1)
        return np.where(lane >= 0, lane, link)

    def monitor(self, tick: bool = False) -> MonitorSample:
        idx = self._alive()
        F, I = self.F, self.I
        exd = self.facc[K.F_BASE + self.m:K.F_BASE + 2 * self.m]
        link = np.concatenate([self._links(idx), np.arange(self.m)])
        delta = np.concatenate([F[idx, K.DEL], exd])
        dhat = np.concatenate([F[idx, K.DHAT], np.zeros(self.m)])
        out = compute_monitors(F[idx, K.V], F[idx, K.A], I[idx, K.MODE], I[idx, K.EVER], link,
                               delta, dhat, self.params, self.m, F[idx, K.SHORT], F[idx, K.PSHORT],
                               include=I[idx, K.CONN] == 1)
        if tick:
            F[idx, K.DEL] = F[idx, K.SHORT]
            F[idx, K.DHAT] = F[idx, K.PSHORT]
            exd[:] = 0.0
        return out

    def free_flow(self) -> bool:
        idx = self._alive()
        F, I = self.F, self.I
        if np.any(F[idx, K.SHORT] > 1e-6) or np.any(F[idx, K.PSHORT] > 1e-6):
            return False
        safe = idx[I[idx, K.MODE] == dyn.SAFETY]
        if safe.size == 0:
            return True
        p = self.params
        if np.any(I[safe, K.LANE] >= 0):
            return False
        if np.any(np.abs(F[safe, K.V] - p.Vf) > FREE_FLOW_TOL) or np.any(np.abs(F[safe, K.A]) > FREE_FLOW_TOL):
            return False
        gaps = self.SC[safe, K.GAP]
        return bool(np.all(gaps >= p.h * p.Vf + p.S0 - FREE_FLOW_TOL))

    def dsg_spacing(self) -> float:
        idx = self._alive()
        I = self.I
        sel = idx[(I[idx, K.MODE] == dyn.SAFETY) & (I[idx, K.LANE] == -1)
                  & (self.SI[idx, K.LEAD] >= 0) & (I[idx, K.CONN] == 1)]
        p = self.params
        return float(np.sum(np.abs(self.SC[sel, K.GAP] - (p.h * self.F[sel, K.V] + p.S0))))

    def occupancy(self, i: int) -> float:
        ticks = self.occ_ticks[i]
        val = self.facc[K.F_BASE + i] / ticks if ticks else 0.0
        self.facc[K.F_BASE + i] = 0.0
        self.occ_ticks[i] = 0
        return float(min(max(val, 0.0), 100.0))

    def try_release(self, i: int, extra_gap: float = 0.0, check_m4=True) -> bool:
        q = self.queues[i]
        if not q:
            return False
        g = self.geometry
        r = self.system.ramps[i]
        me = g.merge_point[i]
        s_meter = me - g.ramp_run[i]
        T = self.t * self.tau
        if check_m4 is False:
            mode = 0
        elif check_m4 == "merge":
            mode = 2
        else:
            mode = 1
        if mode:
            self.ctx.merge_tx += int(K.merge_area_count(self.F, self.I, self.cap, i, me, self.up[i],
                                                         self.down[i], self.PR))
        ok = K.release_check(self.F, self.I, self.cap, T, i, me, s_meter, self.rest_dur, self.rest_jerk,
                             r.t_merge, max(r.t_merge, self.t_full), float(extra_gap), mode, self.PR,
                             M4_SAMPLE_DT)
        if not ok:
            return False
        vid, dest = q.popleft()
        self._add(s_meter, 0.0, dyn.SPEED_TRACKING, i, dest, vid, lane=i)
        self.trace.veh_rel[vid] = T
        self.trace.releases.append((self.t, i, vid))
        return True

    # -------------------------------------------------------------- loop
    def n_road(self) -> int:
        idx = self._alive()
        return int(np.sum(self.I[idx, K.CONN]))

    def _restore_exits(self):
        for k in self._alive():
            if self.I[k, K.LANE] < 0:
                self.F[k, K.EXIT] = self._exit_coord(self.F[k, K.S], int(self.I[k, K.DEST]))

    def step(self):
        t = self.t
        ctx = self.ctx
        idle = t < self.idle_steps
        if idle:
            self.trace.comms.append(0)
        else:
            if t == self.idle_steps > 0:
                self._restore_exits()
            # the policy clock starts when the idle period ends
            ctx.step = t - self.idle_steps
            ctx.time = ctx.step * self.tau
            ctx.merge_tx = 0
            self.policy.step(ctx)
            self.trace.comms.append(self.policy.transmissions(ctx, self.n_road()))
        meta = self.meta
        meta[K.M_NEX] = 0
        meta[K.M_NMG] = 0
        meta[K.M_NTTC] = 0
        K.advance(self.F, self.I, self.SC, self.SI, self.ORD, self.KEY, self.RL, self.RN, meta,
                  self.facc, self.flowc, self.PR, self.RM, self.FP, self.ZT, self.EVX, self.EVM,
                  self.TTC, t * self.tau, self.n_sub, self.cap)
        self.occ_ticks += self.n_sub
        tr = self.trace
        for q in range(meta[K.M_NMG]):
            tr.veh_merge[int(self.EVM[q, 0])] = float(self.EVM[q, 1])
        for q in range(meta[K.M_NEX]):
            tr.veh_exit[int(self.EVX[q, 0])] = float(self.EVX[q, 1])
            self.free.append(int(self.EVX[q, 2]))
        for q in range(meta[K.M_NTTC]):
            row = self.TTC[q]
            tr.ttc.append((float(row[0]), int(row[1]), int(row[2]), float(row[3])))
        tr.flow.append(tuple(int(c) for c in self.flowc))
        if not idle:
            hit, dest = self.arrivals.matrix(t - self.idle_steps)
            t_arr = (t + 1) * self.tau
            for i in np.flatnonzero(hit):
                self.queues[i].append((self._new_vehicle(int(i), int(dest[i]), t_arr), int(dest[i])))
        tr.queues.append(tuple(len(q) for q in self.queues))
        self.t += 1

    def run(self, horizon: int) -> Trace:
        for _ in range(horizon):
            self.step()
        self.trace.counters = self.counters()
        return self.trace

    def counters(self) -> dict:
        meta = self.meta
        return {
            "collisions": int(meta[K.M_COLL]),
            "gap_violations": int(meta[K.M_GAPV]),
            "emergency_brakes": int(meta[K.M_EMERG]),
            "stop_overruns": int(meta[K.M_OVERRUN]),
            "switches_to_safety": int(meta[K.M_TOSAFE]),
            "ttc_dropped": int(meta[K.M_TTCDROP]),
            "min_gap": float(self.facc[K.F_MINGAP]),
            "min_margin_tau": float(self.facc[K.F_MINMARG]),
        }

    # ---------------------------------------------------------- queries
    def vehicle_rows(self) -> list[dict]:
        """Snapshot of the vehicles on the road (for tests and debugging)."""
        out = []
        for k in self._alive():
            out.append({
                "vid": int(self.I[k, K.VID]), "s": float(self.F[k, K.S]), "v": float(self.F[k, K.V]),
                "a": float(self.F[k, K.A]), "mode": int(self.I[k, K.MODE]), "lane": int(self.I[k, K.LANE]),
                "ever": int(self.I[k, K.EVER]),
            })
        return out

    def on_road(self) -> int:
        return int(self._alive().size)


def run_sim(system: SlotSystem, R, demand: DemandSpec, policy: Policy, horizon: int,
            initial="empty", **kw) -> Trace:
    return Simulator(system, R, demand, policy, initial, **kw).run(horizon)
