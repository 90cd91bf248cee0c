"""Slot-level Markov chain for free-flow operation.

Once every vehicle sits on a slot, the road is fully described by the queue
lengths and the slot occupancy, and a release from ramp ``i`` at step ``t``
always lands in slot ``(land_index_i - n_a_i - t) mod n_c``.  The chain
tracks exactly that, which makes it orders of magnitude faster than the
continuous engine for the long runs needed by throughput probes, cycle
sweeps and drift estimates.  It only supports policies whose decisions
depend on queues and slots, i.e. all but ALINEA.
"""

from __future__ import annotations

import math
from collections import deque

import numpy as np

from .core import ArrivalStream, DemandSpec, check_routing, stream
from .lattice import SlotSystem, exit_delay_table
from .policies import MonitorSample, Policy
from .trace import Trace


class _ChainContext:
    def __init__(self, chain: "SlotChain"):
        self.chain = chain
        self.m = chain.m
        self.tau = chain.tau
        self.shape = chain.system.geometry.shape
        self.step = 0
        self.time = 0.0
        self.merge_tx = 0
        self._zero = MonitorSample(0.0, 0.0, 0.0, 0.0, np.zeros(self.m), np.zeros(self.m))

    @property
    def queues(self):
        return [len(q) for q in self.chain.queues]

    def free_flow(self) -> bool:
        return True

    def monitor(self, tick: bool = False) -> MonitorSample:
        return self._zero

    def dsg_spacing(self) -> float:
        return 0.0

    def occupancy(self, i: int) -> float:
        raise NotImplementedError("the slot chain has no detector model")

    def try_release(self, i: int, extra_gap: float = 0.0, check_m4=True) -> bool:
        if extra_gap > 0.0:
            raise ValueError("the slot chain cannot represent an extra space gap")
        return self.chain._try_release(i, check_m4)


class SlotChain:
    """Slot occupancy plus queues, advanced one step at a time."""

    def __init__(self, system: SlotSystem, R, demand: DemandSpec, policy: Policy,
                 initial: str | int = "empty", record_vehicles: bool = True):
        self.system = system
        self.m = system.m
        self.tau = system.params.tau
        self.R = check_routing(R)
        self.demand = demand
        self.arrivals = ArrivalStream(demand, self.R)
        self.policy = policy
        if getattr(policy, "kind", "") in ("alinea", "safe_alinea"):
            raise ValueError("ALINEA needs the continuous engine")
        self.n_c = system.n_c
        self.occ = np.full(self.n_c, -1, dtype=np.int64)
        self.exit_time: dict[int, float] = {}
        self.exits: dict[int, list] = {}
        self.queues = [deque() for _ in range(self.m)]
        self.delay = exit_delay_table(system)
        self.trace = Trace(self.m, self.tau, getattr(policy, "kind", ""))
        self.record_vehicles = record_vehicles
        self.t = 0
        self.ctx = _ChainContext(self)
        self.slot_of: dict[int, int] = {}
        self._next_vid = 0
        self.releases_total = 0
        self._place_initial(initial)

    # ----------------------------------------------------------- set-up
    def _new_vehicle(self, origin, dest, t_arr) -> int:
        if self.record_vehicles:
            return self.trace.add_vehicle(origin, dest, t_arr)
        vid = self._next_vid
        self._next_vid += 1
        return vid

    def _place_initial(self, initial):
        if initial in ("empty", 0, None):
            return
        g = self.system.geometry
        n = self.n_c if initial in ("free_flow", "full") else int(initial)
        if not 0 <= n <= self.n_c:
            raise ValueError("initial vehicle count exceeds slot capacity")
        rng = stream(self.demand.seed, "initial")
        ids = np.sort(rng.choice(self.n_c, size=n, replace=False)) if n < self.n_c else np.arange(self.n_c)
        cdf = np.cumsum(self.R, axis=1)
        Vf = self.system.params.Vf
        for s in ids:
            pos = float(self.system.slot_position(s, 0))
            link = self._link_of(pos)
            dest = int(min(np.searchsorted(cdf[link], rng.random(), side="right"), self.m - 1))
            vid = self._new_vehicle(link, dest, math.nan)
            t_x = g.along(pos, g.offramp_pos[dest]) / Vf
            self._occupy(int(s), vid, t_x)

    def _link_of(self, pos: float) -> int:
        g = self.system.geometry
        base = g.merge_point[0]
        d = g.along(base, pos)
        link = 0
        for i in range(self.m):
            if g.along(base, g.merge_point[i]) <= d:
                link = i
        return link

    def _occupy(self, s: int, vid: int, t_exit: float):
        self.occ[s] = vid
        self.slot_of[vid] = s
        self.exit_time[vid] = t_exit
        step = max(int(math.ceil(t_exit / self.tau - 1e-9)), self.t + 1)
        self.exits.setdefault(step, []).append(vid)

    # ---------------------------------------------------------- dynamics
    def _window_clear(self, i: int, s: int, t_merge_abs: float) -> bool:
        r = self.system.ramps[i]
        n_c = self.n_c
        occ = self.occ
        if occ[s] >= 0:
            return False
        for d in range(1, r.ahead):
            v = occ[(s + d) % n_c]
            if v >= 0 and self.exit_time[v] >= t_merge_abs:
                return False
        for d in range(1, r.behind):
            v = occ[(s - d) % n_c]
            if v >= 0 and self.exit_time[v] >= t_merge_abs:
                return False
        return True

    def _try_release(self, i: int, check_m4) -> bool:
        q = self.queues[i]
        if not q:
            return False
        t = self.t
        s = self.system.target_slot(i, t)
        r = self.system.ramps[i]
        now = t * self.tau
        if check_m4:
            self.ctx.merge_tx += int(sum(self.occ[(s + d) % self.n_c] >= 0 for d in range(-r.behind, r.ahead + 1)))
            if not self._window_clear(i, s, now + r.t_merge):
                return False
        elif self.occ[s] >= 0:
            return False
        vid, dest = q.popleft()
        if self.record_vehicles:
            self.trace.veh_rel[vid] = now
            self.trace.veh_merge[vid] = now + r.t_merge
        self._occupy(s, vid, now + self.delay[i, dest])
        self.trace.releases.append((t, i, vid))
        self.releases_total += 1
        return True

    def step(self):
        t = self.t
        for vid in self.exits.pop(t, ()):
            s = self.slot_of.pop(vid)
            if self.occ[s] == vid:
                self.occ[s] = -1
            if self.record_vehicles:
                self.trace.veh_exit[vid] = self.exit_time[vid]
            del self.exit_time[vid]
        ctx = self.ctx
        ctx.step = t
        ctx.time = t * self.tau
        ctx.merge_tx = 0
        self.policy.step(ctx)
        self.trace.comms.append(self.policy.transmissions(ctx, len(self.slot_of)))
        hit, dest = self.arrivals.matrix(t)
        t_arr = (t + 1) * self.tau
        for i in np.flatnonzero(hit):
            self.queues[i].append((self._new_vehicle(int(i), int(dest[i]), t_arr), int(dest[i])))
        self.trace.queues.append(tuple(len(q) for q in self.queues))
        self.t += 1

    def run(self, horizon: int) -> Trace:
        for _ in range(horizon):
            self.step()
        return self.trace

    def occupied(self) -> int:
        return len(self.slot_of)


def run_chain(system: SlotSystem, R, demand: DemandSpec, policy: Policy, horizon: int,
              initial="empty", record_vehicles: bool = True) -> Trace:
    return SlotChain(system, R, demand, policy, initial, record_vehicles).run(horizon)
