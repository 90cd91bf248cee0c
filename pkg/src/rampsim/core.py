"""Physical constants, road geometry, routing algebra and arrival sampling."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

ROW_SUM_TOL = 1e-9

# purpose codes for the per-run random streams
STREAMS = {
    "arrivals": 1,
    "destinations": 2,
    "initial": 3,
    "alinea": 4,
    "penetration": 5,
}


@dataclass(frozen=True)
class Params:
    """Physical and monitor constants shared by every module.

    Attributes
    ----------
    h : float
        Safe time-headway constant (s).
    S0 : float
        Standstill gap (m).
    L : float
        Vehicle length (m).
    Vf : float
        Free-flow speed (m/s).
    a_min : float
        Minimum (emergency) deceleration, negative (m/s^2).
    a_max : float
        Maximum acceleration (m/s^2).
    J_max : float
        Maximum jerk (m/s^3).
    w1, w2, w3, w4 : float
        Monitor normalisation weights.
    """

    h: float = 1.5
    S0: float = 4.0
    L: float = 4.5
    Vf: float = 15.0
    a_min: float = -5.0
    a_max: float = 2.0
    J_max: float = 2.0
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValueError("h must be positive")
        if self.S0 < 0 or self.L < 0:
            raise ValueError("S0 and L must be non-negative")
        if not self.Vf > 0:
            raise ValueError("Vf must be positive")
        if not self.a_min < 0:
            raise ValueError("a_min must be negative")
        if not (self.a_max > 0 and self.J_max > 0):
            raise ValueError("a_max and J_max must be positive")

    @property
    def tau(self) -> float:
        return time_step_tau(self)

    @property
    def pitch(self) -> float:
        """Distance between consecutive slots (m)."""
        return self.h * self.Vf + self.S0 + self.L

    def to_dict(self) -> dict:
        return asdict(self)


def time_step_tau(params: Params) -> float:
    """Minimum front-bumper time headway between free-flowing vehicles (s)."""
    return params.h + (params.S0 + params.L) / params.Vf


@dataclass(frozen=True)
class Geometry:
    """Road layout.

    Positions are arc lengths in [0, P).  On a ring the ramps are listed in
    travel order starting at on-ramp 0; off-ramp ``i`` lies after on-ramp
    ``i`` and before on-ramp ``i + 1``.  ``merge_point`` defaults to the
    on-ramp position and ``ramp_run`` is the distance from the meter to the
    merge point.  On a straight road on-ramp 0 is the upstream entry and the
    last off-ramp may sit at ``P`` as the terminal exit.
    """

    shape: str
    P: float
    m: int
    onramp_pos: tuple
    offramp_pos: tuple
    merge_point: tuple = ()
    ramp_run: tuple = ()

    def __post_init__(self):
        m = self.m
        if self.shape not in ("ring", "straight"):
            raise ValueError(f"unknown shape {self.shape!r}")
        if m < 1:
            raise ValueError("need at least one ramp")
        for name in ("onramp_pos", "offramp_pos"):
            if len(getattr(self, name)) != m:
                raise ValueError(f"{name} must have {m} entries")
        object.__setattr__(self, "onramp_pos", tuple(float(x) for x in self.onramp_pos))
        object.__setattr__(self, "offramp_pos", tuple(float(x) for x in self.offramp_pos))
        if not self.merge_point:
            object.__setattr__(self, "merge_point", self.onramp_pos)
        if not self.ramp_run:
            object.__setattr__(self, "ramp_run", (0.0,) * m)
        object.__setattr__(self, "merge_point", tuple(float(x) for x in self.merge_point))
        object.__setattr__(self, "ramp_run", tuple(float(x) for x in self.ramp_run))
        if len(self.merge_point) != m or len(self.ramp_run) != m:
            raise ValueError("merge_point and ramp_run need one entry per ramp")
        if any(r < 0 for r in self.ramp_run):
            raise ValueError("ramp_run must be non-negative")
        hi = self.P if self.shape == "ring" else self.P + 1e-9
        for x in self.onramp_pos + self.merge_point:
            if not 0 <= x < self.P:
                raise ValueError("ramp positions must lie in [0, P)")
        for x in self.offramp_pos:
            if not 0 <= x < hi:
                raise ValueError("off-ramp positions out of range")
        self._check_order()

    def _check_order(self):
        # walk downstream from on-ramp 0 and require on/off alternation
        base = self.onramp_pos[0]
        seq = []
        for i in range(self.m):
            seq.append(self.along(base, self.onramp_pos[i]))
            seq.append(self.along(base, self.offramp_pos[i]))
        if self.shape == "straight" and base != 0.0:
            raise ValueError("straight road entry must be at position 0")
        if any(b <= a for a, b in zip(seq, seq[1:])):
            raise ValueError("ramps must alternate: on-ramp i, off-ramp i, on-ramp i+1, ...")

    def along(self, start: float, pos: float) -> float:
        """Downstream distance from ``start`` to ``pos``."""
        d = pos - start
        if self.shape == "ring":
            d %= self.P
        return d

    def with_positions(self, **changes) -> "Geometry":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        out = asdict(self)
        for k, v in out.items():
            if isinstance(v, tuple):
                out[k] = list(v)
        return out


def ring_geometry(P: float = 1860.0, m: int = 3, ramp_run: Sequence[float] | float = 70.0,
                  offramp_upstream: float = 155.0) -> Geometry:
    """Evenly spaced ring with off-ramps a fixed distance upstream of the next on-ramp."""
    on = tuple(i * P / m for i in range(m))
    off = tuple((on[(i + 1) % m] - offramp_upstream) % P for i in range(m))
    if np.isscalar(ramp_run):
        ramp_run = (float(ramp_run),) * m
    return Geometry("ring", P, m, on, off, on, tuple(ramp_run))


def straight_geometry(P: float = 1860.0, m: int = 3, ramp_run: Sequence[float] | float = 70.0,
                      offramp_upstream: float = 155.0) -> Geometry:
    """Same spacing as :func:`ring_geometry`, cut open with the last exit at ``P``."""
    on = tuple(i * P / m for i in range(m))
    off = tuple(on[i + 1] - offramp_upstream for i in range(m - 1)) + (float(P),)
    if np.isscalar(ramp_run):
        ramp_run = (float(ramp_run),) * m
    return Geometry("straight", P, m, on, off, on, tuple(ramp_run))


def slot_capacity(geometry: Geometry, params: Params) -> int:
    """Largest number of points at slot pitch that fit on the mainline."""
    pitch = params.pitch
    if geometry.P < pitch:
        raise ValueError("mainline too short for a single slot")
    # guard against 1860/31 landing a hair below 60
    return int(math.floor(geometry.P / pitch + 1e-9))


def check_routing(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.ndim != 2 or R.shape[0] != R.shape[1]:
        raise ValueError("routing matrix must be square")
    if np.any(R < -ROW_SUM_TOL) or np.any(R > 1 + ROW_SUM_TOL):
        raise ValueError("routing entries must lie in [0, 1]")
    if np.any(np.abs(R.sum(axis=1) - 1.0) > ROW_SUM_TOL):
        raise ValueError("routing rows must sum to 1")
    return R


def route_links(i: int, j: int, m: int, shape: str = "ring") -> list[int]:
    """Links traversed from on-ramp ``i`` to off-ramp ``j``.

    Link ``k`` runs from on-ramp ``k`` to on-ramp ``k + 1`` and contains
    off-ramp ``k``.
    """
    if shape == "straight":
        if j < i:
            raise ValueError("straight road cannot route upstream")
        return list(range(i, j + 1))
    return [(i + s) % m for s in range((j - i) % m + 1)]


def cumulative_routing(R, geometry: Geometry | None = None) -> np.ndarray:
    """Fraction of each on-ramp's arrivals that crosses each link."""
    R = check_routing(R)
    m = R.shape[0]
    shape = geometry.shape if geometry is not None else "ring"
    if geometry is not None and geometry.m != m:
        raise ValueError("routing size does not match geometry")
    Rt = np.zeros((m, m))
    for i in range(m):
        surviving = 1.0
        for s in range(m if shape == "ring" else m - i):
            link = (i + s) % m
            Rt[i, link] = min(max(surviving, 0.0), 1.0)
            surviving -= R[i, link]
        if shape == "straight" and np.any(R[i, :i] > ROW_SUM_TOL):
            raise ValueError("straight road routing must be upper triangular")
    return Rt


def link_loads(lam, Rt) -> tuple[np.ndarray, float]:
    """Per-link loads and their maximum."""
    lam = np.asarray(lam, dtype=float)
    Rt = np.asarray(Rt, dtype=float)
    if lam.shape[0] != Rt.shape[0]:
        raise ValueError("rate vector does not match routing size")
    rho = lam @ Rt
    return rho, float(rho.max()) if rho.size else 0.0


@dataclass(frozen=True)
class DemandSpec:
    lam: tuple
    seed: int = 0
    horizon: int = 0

    def __post_init__(self):
        lam = tuple(float(x) for x in np.atleast_1d(self.lam))
        if any(not 0.0 <= x <= 1.0 for x in lam):
            raise ValueError("arrival rates must lie in [0, 1]")
        object.__setattr__(self, "lam", lam)
        if self.horizon < 0:
            raise ValueError("horizon must be non-negative")


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Counter-based generator keyed by (run seed, purpose, extra keys)."""
    ss = np.random.SeedSequence([int(seed), STREAMS[purpose], *[int(e) for e in extra]])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class ArrivalStream:
    """Random-access source of Bernoulli arrivals and their destinations.

    Arrivals and destinations come from separate streams and are generated
    in fixed blocks, so step ``t`` always sees the same draws regardless of
    how the caller walks through time.
    """

    demand: DemandSpec
    R: np.ndarray
    block: int = 4096
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.R = check_routing(self.R)
        if self.R.shape[0] != len(self.demand.lam):
            raise ValueError("routing size does not match arrival rates")
        self._cdf = np.cumsum(self.R, axis=1)
        self._cdf[:, -1] = 1.0

    def _block(self, b: int):
        if b not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            m = len(self.demand.lam)
            u = stream(self.demand.seed, "arrivals", b).random((self.block, m))
            hit = u < np.asarray(self.demand.lam)
            w = stream(self.demand.seed, "destinations", b).random((self.block, m))
            dest = np.empty((self.block, m), dtype=np.int64)
            for i in range(m):
                dest[:, i] = np.searchsorted(self._cdf[i], w[:, i], side="right")
            np.minimum(dest, m - 1, out=dest)
            self._cache[b] = (hit, dest)
        return self._cache[b]

    def matrix(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """Boolean arrival flags and destinations for step ``t``."""
        hit, dest = self._block(t // self.block)
        k = t % self.block
        return hit[k], dest[k]

    def block_arrays(self, b: int) -> tuple[np.ndarray, np.ndarray]:
        return self._block(b)


def sample_arrivals(demand: DemandSpec, R, t: int, rng: ArrivalStream | None = None) -> list[tuple[int, int]]:
    """Arrivals during step ``t`` as (on-ramp, destination) pairs."""
    if rng is None:
        rng = ArrivalStream(demand, np.asarray(R, dtype=float))
    hit, dest = rng.matrix(t)
    return [(i, int(dest[i])) for i in np.flatnonzero(hit)]
