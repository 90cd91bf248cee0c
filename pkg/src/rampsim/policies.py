"""Ramp-metering policies, traffic monitors and communication accounting.

A policy is a small state machine driven once per time step by an engine.
The engine passes a context object exposing:

``step``, ``time``, ``tau``, ``m``
    clock and ramp count;
``queues``
    current queue lengths (before this step's arrivals);
``free_flow()``
    the free-flow test on the current road state;
``monitor()``
    a :class:`MonitorSample` of the current road state; the engine resets
    the spacing-violation windows whenever the policy asks for a monitor on
    a ``T_per`` tick via ``monitor(tick=True)``;
``dsg_spacing()``
    Σ|y - (h v + S0)| over safety-mode vehicles;
``occupancy(i)``
    mean detector occupancy (%) downstream of ramp ``i`` since the last call;
``try_release(i, extra_gap=0.0, check_m4=True)``
    checks M3 (and M4 unless disabled, with the extra gap added to every
    required distance) and, on success, releases the head of queue ``i``
    immediately.  ``check_m4="merge"`` checks only the merge instant.
``merge_tx``
    vehicles that reported their state to a metering ramp this step.

Ramps are always visited in index order so a release is visible to every
ramp processed after it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import Params

KINDS = ("renewal", "fcq", "greedy", "drr", "disdrr", "dsg", "alinea", "safe_alinea")


@dataclass(frozen=True)
class PolicyConfig:
    kind: str = "greedy"
    T_cyc: int = 1
    T_per: int = 2
    gamma1: float = 50.0
    theta2: float = 10.0
    theta0: float = 0.1
    beta: float = 1.01
    T_max: float = 100.0
    kappa1: float = 0.01
    kappa2: float = 0.01
    K_r: float = 70.0
    o_hat: float = 13.0
    alinea_period: float = 60.0
    penetration: float = 1.0
    r_init: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.T_cyc < 1 or self.T_per < 1:
            raise ValueError("T_cyc and T_per must be at least 1")
        if self.beta <= 1 or self.theta0 <= 0 or self.theta2 <= 0 or self.gamma1 <= 0:
            raise ValueError("gap update constants out of range")
        if not 0.0 <= self.penetration <= 1.0:
            raise ValueError("penetration must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- monitors

@dataclass
class MonitorSample:
    X_f1: float
    X_f2: float
    X_g1: float
    X_g2: float
    X_f1_link: np.ndarray
    X_f2_link: np.ndarray

    @property
    def X_f_link(self) -> np.ndarray:
        return self.X_f1_link + self.X_f2_link

    @property
    def X_f(self) -> float:
        return self.X_f1 + self.X_f2

    @property
    def X_g(self) -> float:
        return self.X_g1 + self.X_g2


def compute_monitors(v, a, mode, ever_safety, link, delta, delta_hat, params: Params, m: int,
                     short_now=None, pred_short_now=None, include=None) -> MonitorSample:
    """Aggregate the scalar monitors from per-vehicle arrays.

    ``delta``/``delta_hat`` hold each vehicle's largest spacing shortfall and
    largest predicted merge shortfall over the current window; entries for
    vehicles that left during the window may be appended by the caller.
    ``link`` is the index of the on-ramp a vehicle is downstream of.
    ``include`` masks out vehicles the policy cannot see.
    """
    v = np.asarray(v, dtype=float)
    a = np.asarray(a, dtype=float)
    mode = np.asarray(mode)
    n = v.shape[0]
    link = np.asarray(link, dtype=np.int64)
    delta = np.asarray(delta, dtype=float)
    delta_hat = np.asarray(delta_hat, dtype=float)
    if include is None:
        include = np.ones(n, dtype=bool)
    include = np.asarray(include, dtype=bool)
    dev = (params.w1 * np.abs(v - params.Vf) + params.w2 * np.abs(a))
    f1 = np.where(include & (mode == 1), dev, 0.0)
    viol = params.w3 * (delta + delta_hat)
    nd = delta.shape[0]
    inc_d = np.ones(nd, dtype=bool)
    inc_d[:min(n, nd)] = include[:min(n, nd)]
    f2 = np.where(inc_d, viol, 0.0)
    link1 = np.zeros(m)
    link2 = np.zeros(m)
    if n:
        np.add.at(link1, link[:n], f1)
    if nd:
        np.add.at(link2, link[:nd], f2)
    g1 = float(np.sum(np.where(include & np.asarray(ever_safety, dtype=bool), dev, 0.0)))
    g2 = 0.0
    if short_now is not None:
        s = np.asarray(short_now, dtype=float)
        if pred_short_now is not None:
            s = s + np.asarray(pred_short_now, dtype=float)
        g2 = float(params.w4 * np.sum(np.where(include, s, 0.0)))
    return MonitorSample(float(f1.sum()), float(f2.sum()), g1, g2, link1, link2)


# -------------------------------------------------------------- gap rules

@dataclass
class DrrState:
    g: float = 0.0
    theta: float = 0.1
    X_prev: float = 0.0


def improved(x_now: float, x_prev: float, gamma1: float) -> bool:
    return x_now <= max(x_prev - gamma1, 0.0)


def drr_gap_update(state: DrrState, X_f_now: float, X_f_prev: float, gamma1: float,
                   theta2: float, beta: float) -> DrrState:
    """One tick of the centralized minimum-gap update."""
    if improved(X_f_now, X_f_prev, gamma1):
        return DrrState(max(state.g - theta2, 0.0), state.theta, X_f_now)
    theta = beta * state.theta
    return DrrState(state.g + theta, theta, X_f_now)


def disdrr_gap_update(g: float, theta: float, x_hist: tuple, g_next_prev: float,
                      down_now: float, down_prev: float, cfg: PolicyConfig) -> tuple[float, float]:
    """One tick of the per-ramp minimum-gap update.

    ``x_hist`` is (X^i(t), X^i(t-T), X^i(t-2T)); ``g_next_prev`` is the
    downstream ramp's gap one period ago (``None`` when there is none);
    ``down_now``/``down_prev`` are the downstream monitor sums.
    """
    x_now, x_prev, x_prev2 = x_hist
    if improved(x_now, x_prev, cfg.gamma1):
        local_only = g_next_prev is None or g_next_prev <= cfg.T_max
        if local_only or improved(down_now, down_prev, cfg.gamma1):
            return max(g - cfg.theta2, 0.0), theta
        theta = cfg.beta * theta
        return g + theta, theta
    if improved(x_prev, x_prev2, cfg.gamma1):
        theta = cfg.beta * theta
    return g + theta, theta


# ---------------------------------------------------------------- policies

@dataclass
class CycleRecord:
    start: int
    quotas: tuple
    releases: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(r <= q for r, q in zip(self.releases, self.quotas))


class Policy:
    """Base class; subclasses override :meth:`step`."""

    kind = "base"
    uses_m4 = True

    def __init__(self, cfg: PolicyConfig, m: int):
        self.cfg = cfg
        self.m = m
        self.cycles: list[CycleRecord] = []
        self.last_release = [None] * m
        self.tx = 0
        self.cycle_queue_tx = 0

    # quota bookkeeping shared by the cycle-based policies
    def _start_cycle(self, ctx):
        quotas = tuple(int(q) for q in ctx.queues)
        self.cycles.append(CycleRecord(ctx.step, quotas, [0] * self.m))
        self.cycle_queue_tx = sum(quotas)

    def _quota_left(self, i: int) -> bool:
        c = self.cycles[-1]
        return c.releases[i] < c.quotas[i]

    def _release(self, ctx, i, **kw) -> bool:
        if ctx.try_release(i, **kw):
            if self.cycles:
                self.cycles[-1].releases[i] += 1
            self.last_release[i] = ctx.step
            return True
        return False

    def step(self, ctx) -> None:
        raise NotImplementedError

    def transmissions(self, ctx, n_road: int) -> int:
        return 0

    def quota_ok(self) -> bool:
        return all(c.ok for c in self.cycles)

    def state_dict(self) -> dict:
        return {"kind": self.kind}


class Renewal(Policy):
    """Variable-length quota cycles, starting once the road is in free flow."""

    kind = "renewal"

    def __init__(self, cfg, m):
        super().__init__(cfg, m)
        self.started = False
        self.pending = False

    def step(self, ctx):
        self.cycle_queue_tx = 0
        if not self.started:
            if not ctx.free_flow():
                return
            self.started = True
            self.pending = True
        if self.pending:
            self._start_cycle(ctx)
            self.pending = False
        for i in range(self.m):
            if self._quota_left(i):
                self._release(ctx, i)
        c = self.cycles[-1]
        if all(r >= q for r, q in zip(c.releases, c.quotas)):
            self.pending = True

    def transmissions(self, ctx, n_road):
        return n_road + self.cycle_queue_tx

    def cycle_lengths(self) -> np.ndarray:
        starts = [c.start for c in self.cycles]
        return np.diff(starts)


class FCQ(Policy):
    """Fixed-cycle quota policy; ``T_cyc = 1`` is the Greedy policy."""

    kind = "fcq"

    def __init__(self, cfg, m):
        super().__init__(cfg, m)
        self.T_cyc = cfg.T_cyc
        if cfg.kind == "greedy":
            self.T_cyc = 1
            self.kind = "greedy"

    def _cycle_boundary(self, ctx):
        self.cycle_queue_tx = 0
        if ctx.step % self.T_cyc == 0 or not self.cycles:
            self._start_cycle(ctx)
            if self.T_cyc == 1:
                self.cycle_queue_tx = 0

    def _may_release(self, ctx, i) -> bool:
        return self._quota_left(i)

    def _gap(self, ctx) -> float:
        return 0.0

    def step(self, ctx):
        self._cycle_boundary(ctx)
        extra = self._gap(ctx)
        for i in range(self.m):
            if self._may_release(ctx, i):
                self._release(ctx, i, extra_gap=extra)

    def transmissions(self, ctx, n_road):
        return ctx.merge_tx + self.cycle_queue_tx


class DRR(FCQ):
    """Fixed cycles plus a minimum time gap between releases of a ramp."""

    kind = "drr"

    def __init__(self, cfg, m):
        super().__init__(cfg, m)
        self.kind = "drr"
        self.state = DrrState(0.0, cfg.theta0, 0.0)
        self.g_log: list[tuple[int, float, float]] = []
        self.tick_tx = 0

    def _gap_ok(self, ctx, i, g) -> bool:
        last = self.last_release[i]
        if last is None:
            return True
        return (ctx.step - last) * ctx.tau >= g - 1e-9

    def _update(self, ctx):
        T = self.cfg.T_per
        self.tick_tx = 0
        if ctx.step == 0:
            self.state.X_prev = ctx.monitor().X_f1
            return
        if ctx.step % T:
            return
        x = ctx.monitor(tick=True).X_f
        self.state = drr_gap_update(self.state, x, self.state.X_prev, self.cfg.gamma1,
                                    self.cfg.theta2, self.cfg.beta)
        self.g_log.append((ctx.step, self.state.g, self.state.theta))
        self.tick_tx = 1

    def _may_release(self, ctx, i):
        return self._quota_left(i) and self._gap_ok(ctx, i, self.state.g)

    def step(self, ctx):
        self._update(ctx)
        super().step(ctx)

    def transmissions(self, ctx, n_road):
        return self.tick_tx * self.m * n_road + ctx.merge_tx + self.cycle_queue_tx

    @property
    def g(self) -> float:
        return self.state.g


class DisDRR(DRR):
    """Per-ramp minimum gaps driven by local monitors."""

    kind = "disdrr"

    def __init__(self, cfg, m):
        super().__init__(cfg, m)
        self.kind = "disdrr"
        self.g_i = [0.0] * m
        self.theta_i = [cfg.theta0] * m
        self.hist: list[np.ndarray] = []

    def _update(self, ctx):
        T = self.cfg.T_per
        self.tick_tx = 0
        if ctx.step == 0:
            self.hist = [ctx.monitor().X_f1_link.copy()]
            return
        if ctx.step % T:
            return
        x = ctx.monitor(tick=True).X_f_link.copy()
        self.tick_tx = 1
        if ctx.step // T == 1:
            self.hist.append(x)
            return
        x_prev, x_prev2 = self.hist[-1], self.hist[-2]
        straight = getattr(ctx, "shape", "ring") == "straight"
        new_g = list(self.g_i)
        new_t = list(self.theta_i)
        for i in range(self.m):
            last = straight and i == self.m - 1
            g_next = None if last else self.g_i[(i + 1) % self.m]
            lo = i + 1 if straight else 0
            new_g[i], new_t[i] = disdrr_gap_update(
                self.g_i[i], self.theta_i[i], (x[i], x_prev[i], x_prev2[i]), g_next,
                float(np.sum(x[lo:])), float(np.sum(x_prev[lo:])), self.cfg)
        self.g_i, self.theta_i = new_g, new_t
        self.hist = [x_prev, x]
        self.g_log.append((ctx.step, max(self.g_i), max(self.theta_i)))

    def _may_release(self, ctx, i):
        return self._quota_left(i) and self._gap_ok(ctx, i, self.g_i[i])

    def transmissions(self, ctx, n_road):
        return self.tick_tx * n_road + ctx.merge_tx + self.cycle_queue_tx

    @property
    def g(self) -> float:
        return max(self.g_i)


class DSG(FCQ):
    """Fixed cycles with an extra space gap that grows with disturbance."""

    kind = "dsg"

    def __init__(self, cfg, m):
        super().__init__(cfg, m)
        self.kind = "dsg"
        self.f_log: list[float] = []

    def _gap(self, ctx):
        mon = ctx.monitor()
        f = self.cfg.kappa1 * mon.X_f1 + self.cfg.kappa2 * ctx.dsg_spacing()
        self.f_log.append(f)
        return f

    def transmissions(self, ctx, n_road):
        return self.m * n_road + self.cycle_queue_tx


def alinea_update(r: float, occupancy: float, cfg: PolicyConfig, r_max: float) -> float:
    """Integral occupancy feedback, clamped to [0, r_max] veh/h."""
    if not 0.0 <= occupancy <= 100.0:
        raise ValueError("occupancy must be a percentage")
    return min(max(r + cfg.K_r * (cfg.o_hat - occupancy), 0.0), r_max)


class Alinea(Policy):
    """Local occupancy feedback metering, optionally with a merge filter."""

    kind = "alinea"

    def __init__(self, cfg, m, tau: float, rng: np.random.Generator | None = None):
        super().__init__(cfg, m)
        self.safe = cfg.kind == "safe_alinea"
        self.kind = cfg.kind
        self.uses_m4 = self.safe
        self.tau = tau
        self.r_max = 3600.0 / tau
        r0 = self.r_max / 2 if cfg.r_init is None else cfg.r_init
        self.r = [r0] * m
        if rng is None:
            self.credit = [0.0] * m
        else:
            self.credit = list(rng.random(m))
        self.last_update = 0.0
        self.r_log: list[tuple] = []

    def step(self, ctx):
        if ctx.time - self.last_update >= self.cfg.alinea_period - 1e-9:
            for i in range(self.m):
                self.r[i] = alinea_update(self.r[i], ctx.occupancy(i), self.cfg, self.r_max)
            self.last_update = ctx.time
            self.r_log.append((ctx.step, *self.r))
        for i in range(self.m):
            self.credit[i] += self.r[i] * self.tau / 3600.0
            if self.credit[i] >= 1.0 - 1e-12 and ctx.queues[i] > 0:
                if self._release(ctx, i, check_m4="merge" if self.safe else False):
                    self.credit[i] -= 1.0
            # no banking beyond one release, but keep the fractional remainder
            self.credit[i] = min(self.credit[i], 1.0)

    def transmissions(self, ctx, n_road):
        return ctx.merge_tx if self.safe else 0


def make_policy(cfg: PolicyConfig | dict, m: int, tau: float, rng: np.random.Generator | None = None) -> Policy:
    if isinstance(cfg, dict):
        cfg = PolicyConfig(**cfg)
    if cfg.kind == "renewal":
        return Renewal(cfg, m)
    if cfg.kind in ("fcq", "greedy"):
        return FCQ(cfg, m)
    if cfg.kind == "drr":
        return DRR(cfg, m)
    if cfg.kind == "disdrr":
        return DisDRR(cfg, m)
    if cfg.kind == "dsg":
        return DSG(cfg, m)
    return Alinea(cfg, m, tau, rng)


# ------------------------------------------------------- communication cost

def comm_cost_bound(kind: str, n_c: int, n_a: int, m: int, n_m: int, c: float = 0.0,
                    T_per: int = 1, T_cyc: int = 1) -> float:
    """Worst-case transmissions per step for a policy.

    ``c`` is the average per-step cost of broadcasting cycle-start queue
    sizes; it only applies to Renewal and to fixed-cycle policies with
    ``T_cyc > 1``.
    """
    road = n_c + n_a
    c2 = c if T_cyc > 1 else 0.0
    if kind == "renewal":
        return road + c
    if kind == "drr":
        return m * road / T_per + n_m + c2
    if kind == "disdrr":
        return road / T_per + n_m + c2
    if kind == "dsg":
        return road * m + c2
    if kind == "fcq":
        return n_m + c2
    if kind in ("greedy", "safe_alinea"):
        return float(n_m)
    if kind == "alinea":
        return 0.0
    raise ValueError(f"unknown policy kind {kind!r}")


class CommAccount:
    """Running average of per-step transmissions."""

    def __init__(self):
        self.total = 0
        self.steps = 0
        self.queue_total = 0
        self.series: list[int] = []

    def add(self, count: int, queue_part: int = 0):
        self.total += count
        self.queue_total += queue_part
        self.steps += 1
        self.series.append(count)

    @property
    def C(self) -> float:
        return self.total / self.steps if self.steps else 0.0

    @property
    def c_queue(self) -> float:
        return self.queue_total / self.steps if self.steps else 0.0
