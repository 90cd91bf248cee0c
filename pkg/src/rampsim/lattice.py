"""Slot lattice built on top of a road geometry.

Mainline slots are points one pitch apart that move at the free-flow speed,
so at every step each slot takes the place of the one ahead of it.  A ramp
vehicle released at a step boundary that stays in speed tracking lands on
the lattice after ``n_a`` steps.  To make that landing point coincide with
a lattice point, every ramp after the first is shifted by less than half a
pitch; the shifts are reported so they can go into the run manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dynamics as dyn
from .core import Geometry, Params, slot_capacity


@dataclass(frozen=True)
class RampInfo:
    """Per-ramp timing and window data derived from the lattice.

    Attributes
    ----------
    merge_speed : float
        Speed at the merge point of a vehicle released from rest.
    k : int
        Headway multiple: a merge needs ``k`` pitches between its virtual
        leader and follower.
    ahead, behind : int
        Split of ``k`` relative to the slot the vehicle finally occupies.
    n_a : int
        Steps from release until the vehicle sits on a mainline slot.
    t_merge : float
        Seconds from release to crossing the merge point.
    t_full : float
        Seconds from release to reaching the free-flow speed.
    land_offset : float
        Distance from the meter to the landing point.
    land_index : int
        Lattice index of the landing point.
    shift : float
        Displacement applied to the ramp to put it on the lattice (m).
    """

    merge_speed: float
    k: int
    ahead: int
    behind: int
    n_a: int
    t_merge: float
    t_full: float
    land_offset: float
    land_index: int
    shift: float


@dataclass
class SlotSystem:
    """Mainline and acceleration-lane slot lattice."""

    geometry: Geometry
    params: Params
    n_c: int
    slot_pitch: float
    phase: float
    ramps: tuple
    P_original: float
    occupancy: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.occupancy is None:
            self.occupancy = np.full(self.n_c, -1, dtype=np.int64)

    @property
    def m(self) -> int:
        return self.geometry.m

    @property
    def n_a(self) -> tuple:
        return tuple(r.n_a for r in self.ramps)

    @property
    def tau_multiples(self) -> tuple:
        return tuple(r.k for r in self.ramps)

    def lattice_position(self, index) -> np.ndarray | float:
        return (self.phase + np.asarray(index) * self.slot_pitch) % self.geometry.P

    def slot_position(self, slot_id, step: int):
        """Arc position of slot ``slot_id`` at the start of ``step``."""
        return self.lattice_position((np.asarray(slot_id) + step) % self.n_c)

    def slot_at(self, index: int, step: int) -> int:
        """Id of the slot sitting on lattice ``index`` at ``step``."""
        return (index - step) % self.n_c

    def target_slot(self, ramp: int, step: int) -> int:
        """Slot a vehicle released from ``ramp`` at ``step`` ends up in."""
        r = self.ramps[ramp]
        return (r.land_index - r.n_a - step) % self.n_c

    def acc_slots(self, ramp: int) -> np.ndarray:
        """Distances from the meter of the acceleration-lane slots."""
        r = self.ramps[ramp]
        prof = dyn.speed_tracking_profile(0.0, 0.0, self.params)
        tau = self.params.tau
        return np.array([prof.state(q * tau)[0] for q in range(r.n_a + 1)])

    def merge_area(self, ramp: int) -> tuple[float, float]:
        """Mainline reach (upstream, downstream) around a merge point that a
        release has to look at."""
        r = self.ramps[ramp]
        p = self.params
        run = self.geometry.ramp_run[ramp]
        reach = p.Vf * r.t_merge + (r.k + 1) * self.slot_pitch
        return reach + p.Vf * p.tau, max(r.land_offset - run, 0.0) + reach

    def merge_area_slots(self) -> int:
        """Total slot count of all merge areas, used by the cost bounds.

        Counts the lattice points a window can cover plus the acceleration
        lane.
        """
        total = 0
        for i, r in enumerate(self.ramps):
            up, down = self.merge_area(i)
            total += int(math.floor((up + down) / self.slot_pitch)) + 1 + r.n_a
        return total

    def manifest(self) -> dict:
        return {
            "n_c": self.n_c,
            "slot_pitch": self.slot_pitch,
            "phase": self.phase,
            "P_original": self.P_original,
            "P": self.geometry.P,
            "ramps": [r.__dict__.copy() for r in self.ramps],
            "geometry": self.geometry.to_dict(),
        }


def _ramp_timing(ramp_run: float, params: Params, dt: float = 1e-3):
    prof = dyn.speed_tracking_profile(0.0, 0.0, params)
    t_full = prof.duration
    t_merge = prof.time_to(ramp_run)
    n_a = max(int(math.ceil(max(t_full, t_merge) / params.tau - 1e-9)), 1)
    land = prof.state(n_a * params.tau)[0]
    merge_speed = float(prof.state(t_merge)[1])
    k, ahead, behind = dyn.merge_window(merge_speed, params, dt=dt)
    return merge_speed, k, ahead, behind, n_a, t_merge, t_full, land


def build_slot_system(geometry: Geometry, params: Params) -> SlotSystem:
    """Snap the road onto the slot lattice and derive per-ramp data."""
    n_c = slot_capacity(geometry, params)
    pitch = params.pitch
    P_orig = geometry.P
    P = n_c * pitch
    scale = P / P_orig
    g = geometry
    if abs(scale - 1.0) > 1e-12:
        g = geometry.with_positions(
            P=P,
            onramp_pos=tuple(x * scale for x in geometry.onramp_pos),
            offramp_pos=tuple(min(x * scale, P) for x in geometry.offramp_pos),
            merge_point=tuple(x * scale for x in geometry.merge_point),
        )
    timing = [_ramp_timing(g.ramp_run[i], params) for i in range(g.m)]

    def land_pos(i, merge):
        return merge - g.ramp_run[i] + timing[i][7]

    phase = land_pos(0, g.merge_point[0]) % pitch
    merges = list(g.merge_point)
    ons = list(g.onramp_pos)
    shifts = [0.0] * g.m
    for i in range(1, g.m):
        x = land_pos(i, merges[i]) - phase
        shift = round(x / pitch) * pitch - x
        shifts[i] = shift
        merges[i] = merges[i] + shift
        ons[i] = ons[i] + shift
        if g.shape == "ring":
            merges[i] %= P
            ons[i] %= P
    g = g.with_positions(merge_point=tuple(merges), onramp_pos=tuple(ons))
    ramps = []
    for i in range(g.m):
        ms, k, ahead, behind, n_a, t_m, t_f, land = timing[i]
        idx = int(round((land_pos(i, g.merge_point[i]) - phase) / pitch)) % n_c
        ramps.append(RampInfo(ms, k, ahead, behind, n_a, t_m, t_f, land, idx, shifts[i]))
    return SlotSystem(g, params, n_c, pitch, phase, tuple(ramps), P_orig)


def exit_delay(system: SlotSystem, ramp: int, dest: int) -> float:
    """Seconds from release at ``ramp`` until reaching off-ramp ``dest``."""
    g = system.geometry
    dist = g.ramp_run[ramp] + g.along(g.merge_point[ramp], g.offramp_pos[dest])
    prof = dyn.speed_tracking_profile(0.0, 0.0, system.params)
    return float(prof.time_to(dist))


def exit_delay_table(system: SlotSystem) -> np.ndarray:
    m = system.m
    out = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            out[i, j] = exit_delay(system, i, j)
    return out
