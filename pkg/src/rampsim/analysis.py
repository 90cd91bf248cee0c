"""Throughput regions, steady-state estimators, stability probes and drift.

Regions are lists of linear constraints ``a . lam < b`` (``<=`` for the
outer estimate).  The estimators work on plain arrays so they can be fed by
either engine.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats


# ------------------------------------------------------------------ regions

@dataclass
class ThroughputRegion:
    """Convex polytope {lam >= 0 : A lam < b} (or <= when not strict)."""

    A: np.ndarray
    b: np.ndarray
    kind: str
    strict: bool = True
    free: tuple = ()

    @property
    def constraints(self) -> list[tuple[np.ndarray, float]]:
        return [(self.A[k].copy(), float(self.b[k])) for k in range(len(self.b))]

    def contains(self, lam, tol: float = 0.0) -> bool:
        lam = np.asarray(lam, dtype=float)
        lhs = self.A @ lam
        if self.strict:
            return bool(np.all(lhs < self.b + tol))
        return bool(np.all(lhs <= self.b + tol))

    def closure(self) -> "ThroughputRegion":
        return ThroughputRegion(self.A.copy(), self.b.copy(), self.kind, False, self.free)

    def fix(self, values: dict) -> "ThroughputRegion":
        """Substitute fixed rates and keep the remaining coordinates."""
        m = self.A.shape[1]
        keep = [j for j in range(m) if j not in values]
        fixed = np.zeros(m)
        for j, val in values.items():
            fixed[j] = val
        b = self.b - self.A @ fixed
        names = self.free or tuple(range(m))
        return ThroughputRegion(self.A[:, keep].copy(), b, self.kind, self.strict,
                                tuple(names[j] for j in keep))

    def reduced(self, tol: float = 1e-12) -> "ThroughputRegion":
        """Drop constraints that no non-negative point of the rest can reach."""
        rows = [k for k in range(len(self.b)) if np.any(np.abs(self.A[k]) > tol)]
        # constraints with an all-zero row are either vacuous or infeasible
        for k in range(len(self.b)):
            if k not in rows and self.b[k] <= 0:
                raise ValueError("region is empty")
        keep = list(rows)
        changed = True
        while changed:
            changed = False
            for k in list(keep):
                others = [j for j in keep if j != k]
                if not others:
                    continue
                res = optimize.linprog(-self.A[k], A_ub=self.A[others], b_ub=self.b[others],
                                       bounds=[(0, None)] * self.A.shape[1], method="highs")
                if res.status == 0 and -res.fun <= self.b[k] + tol:
                    keep.remove(k)
                    changed = True
                    break
        return ThroughputRegion(self.A[keep].copy(), self.b[keep].copy(), self.kind, self.strict, self.free)

    def boundary_samples(self, n: int = 101) -> np.ndarray:
        """Points on the boundary of a two-dimensional region (lam >= 0)."""
        if self.A.shape[1] != 2:
            raise ValueError("boundary sampling needs exactly two free rates")
        out = []
        for ang in np.linspace(0.0, math.pi / 2, n):
            d = np.array([math.cos(ang), math.sin(ang)])
            proj = self.A @ d
            with np.errstate(divide="ignore"):
                r = np.where(proj > 0, self.b / proj, np.inf)
            out.append(d * float(r.min()))
        return np.array(out)


def _load_matrix(Rt) -> np.ndarray:
    # row i of the result maps lam to the load on link i
    return np.asarray(Rt, dtype=float).T.copy()


def inner_region_renewal(Rt, k: Sequence[int]) -> ThroughputRegion:
    """(k_i - 1) rho_i - (k_i - 2) lam_i < 1 for every link."""
    L = _load_matrix(Rt)
    k = np.asarray(k, dtype=float)
    if np.any(k < 2):
        raise ValueError("headway multiples must be at least 2")
    A = (k - 1)[:, None] * L - np.diag(k - 2)
    return ThroughputRegion(A, np.ones(len(k)), "inner_renewal")


def inner_region_fixed_cycle(Rt, k: Sequence[int]) -> ThroughputRegion:
    """(k_i - 1) rho_i < 1 for every link."""
    L = _load_matrix(Rt)
    k = np.asarray(k, dtype=float)
    if np.any(k < 2):
        raise ValueError("headway multiples must be at least 2")
    return ThroughputRegion((k - 1)[:, None] * L, np.ones(len(k)), "inner_fixed_cycle")


def outer_region(Rt) -> ThroughputRegion:
    """rho_i <= 1 for every link."""
    L = _load_matrix(Rt)
    return ThroughputRegion(L, np.ones(L.shape[0]), "outer", strict=False)


def equal_rate_limit(region: ThroughputRegion) -> float:
    """Largest common rate lam*(1, ..., 1) on the region boundary."""
    s = region.A.sum(axis=1)
    with np.errstate(divide="ignore"):
        r = np.where(s > 0, region.b / s, np.inf)
    return float(r.min())


# ------------------------------------------------------------ batch means

@dataclass
class BatchMeansResult:
    mean: float
    half_width: float
    warmup: int
    batch_size: int
    n_batches: int

    @property
    def margin(self) -> float:
        """Half-width relative to the mean."""
        if self.mean == 0:
            return 0.0 if self.half_width == 0 else math.inf
        return self.half_width / abs(self.mean)


def batch_means(series, warmup: int, batch_size: int, confidence: float = 0.95) -> BatchMeansResult:
    x = np.asarray(series, dtype=float)
    if batch_size < 1 or warmup < 0:
        raise ValueError("bad batch parameters")
    usable = x[warmup:]
    nb = usable.shape[0] // batch_size
    if nb < 2:
        raise ValueError("too few batches after warm-up")
    means = usable[: nb * batch_size].reshape(nb, batch_size).mean(axis=1)
    mean = float(means.mean())
    sd = float(means.std(ddof=1))
    hw = float(stats.t.ppf(0.5 + confidence / 2, nb - 1) * sd / math.sqrt(nb))
    return BatchMeansResult(mean, hw, warmup, batch_size, nb)


# ----------------------------------------------------- stability probes

@dataclass
class StabilityVerdict:
    saturated: bool
    slope: float
    ci: tuple
    decided: bool = True


def classify_stability(total_queue, tail: float = 0.5, slope_min: float = 1e-3,
                       confidence: float = 0.95) -> StabilityVerdict:
    """Linear trend test on the last part of a total-queue series.

    Saturated when the slope's confidence interval lies above zero and the
    slope exceeds ``slope_min`` vehicles per step.  ``decided`` is False
    when the slope clears the threshold but its interval still covers zero.
    """
    y = np.asarray(total_queue, dtype=float)
    start = int(len(y) * (1.0 - tail))
    y = y[start:]
    if len(y) < 3:
        raise ValueError("series too short to classify")
    t = np.arange(len(y), dtype=float)
    if np.all(y == y[0]):
        return StabilityVerdict(False, 0.0, (0.0, 0.0))
    fit = stats.linregress(t, y)
    q = stats.t.ppf(0.5 + confidence / 2, len(y) - 2)
    lo, hi = fit.slope - q * fit.stderr, fit.slope + q * fit.stderr
    saturated = lo > 0 and fit.slope > slope_min
    decided = saturated or not (fit.slope > slope_min and lo <= 0)
    return StabilityVerdict(bool(saturated), float(fit.slope), (float(lo), float(hi)), bool(decided))


@dataclass
class ProbeResult:
    lo: float
    hi: float
    records: list = field(default_factory=list)

    @property
    def width(self) -> float:
        return self.hi - self.lo

    def contains(self, x: float) -> bool:
        return self.lo <= x <= self.hi


def saturation_probe(runner: Callable[[float, int, int], np.ndarray], lambda_range=(0.3, 0.7),
                     seeds: Sequence[int] = (1, 2, 3), horizon: int = 200_000, tol: float = 0.05,
                     max_horizon: int | None = None, classify=classify_stability) -> ProbeResult:
    """Bisect the common arrival rate between stable and saturated.

    ``runner(lam, seed, horizon)`` returns the total-queue series of one
    run.  Each rate is judged by majority over ``seeds``; a run whose
    verdict is undecided is repeated with twice the horizon, up to
    ``max_horizon``.  The lower end of ``lambda_range`` is assumed stable
    and the upper end saturated.
    """
    lo, hi = map(float, lambda_range)
    if not lo < hi:
        raise ValueError("empty rate range")
    cap = max_horizon or 4 * horizon
    result = ProbeResult(lo, hi)

    def judge(lam):
        votes = []
        for seed in seeds:
            h = horizon
            while True:
                verdict = classify(runner(lam, seed, h))
                if verdict.decided or h * 2 > cap:
                    break
                h *= 2
            votes.append(verdict)
            result.records.append((lam, seed, h, verdict))
        return sum(v.saturated for v in votes) * 2 > len(votes)

    while hi - lo > tol + 1e-12:
        mid = 0.5 * (lo + hi)
        if mid <= 0.0:
            lo = mid
            continue
        if judge(mid):
            hi = mid
        else:
            lo = mid
    result.lo, result.hi = lo, hi
    return result


# --------------------------------------------------------- trip metrics

@dataclass
class TTTResult:
    minutes: float
    count: int
    complete: bool


def ttt_n(trace, n: int) -> TTTResult:
    """Mean total travel time (queue wait plus trip) of the first n finishers."""
    tab = trace.vehicle_table()
    t_arr, t_exit = tab["t_arr"], tab["t_exit"]
    ok = np.isfinite(t_arr) & np.isfinite(t_exit)
    idx = np.flatnonzero(ok)
    order = idx[np.argsort(t_exit[idx], kind="stable")][:n]
    if order.size == 0:
        return TTTResult(math.nan, 0, False)
    mins = float(np.mean(t_exit[order] - t_arr[order]) / 60.0)
    return TTTResult(mins, int(order.size), bool(order.size >= n))


def ttt_curve(trace, ns: Sequence[int]) -> np.ndarray:
    return np.array([ttt_n(trace, n).minutes for n in ns])


def queue_time_average(trace) -> float:
    Q = trace.queue_array()
    if Q.size == 0:
        return 0.0
    return float(Q.mean())


def capacity_drop(counts, capacity: float = 1.0, warmup: int = 0, window: int = 1) -> float:
    """Relative shortfall (%) of mean flow below capacity.

    ``counts`` is a cumulative crossing count sampled every step; flow is
    vehicles per step, optionally smoothed over ``window`` steps first.
    """
    D = np.asarray(counts, dtype=float)
    flow = np.diff(D)[warmup:]
    if flow.size == 0:
        raise ValueError("no flow samples after warm-up")
    if window > 1:
        flow = np.convolve(flow, np.ones(window) / window, mode="valid")
    return float(100.0 * (1.0 - flow.mean() / capacity))


# ------------------------------------------------------------------ drift

@dataclass
class DriftReport:
    buckets: list
    drift_outside: float
    n_outside: int
    b_estimate: float
    mean_drift: float
    n: int
    violating: list

    @property
    def negative(self) -> bool:
        return self.n_outside > 0 and self.drift_outside < 0

    @property
    def positive(self) -> bool:
        return self.mean_drift > 0


def empirical_drift(pairs, V: Callable, f: Callable | None = None, in_B: Callable | None = None,
                    bucket: Callable | None = None, n_buckets: int = 10, min_samples: int = 5) -> DriftReport:
    """Monte-Carlo check of the Foster-Lyapunov inequality.

    ``pairs`` are (state, next_state) samples at policy epochs.  States are
    grouped into deciles of ``bucket(state)`` (``V`` by default) and the mean
    increment of ``V`` is estimated per group.  ``b`` is estimated as the
    largest ``drift + f`` over groups whose states all lie in ``B``; groups
    outside ``B`` with ``drift > -f`` are reported as violating.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no samples")
    f = f or (lambda s: 0.0)
    in_B = in_B or (lambda s: False)
    bucket = bucket or V
    keys = np.array([float(bucket(s)) for s, _ in pairs])
    dV = np.array([float(V(s1)) - float(V(s0)) for s0, s1 in pairs])
    fv = np.array([float(f(s)) for s, _ in pairs])
    inb = np.array([bool(in_B(s)) for s, _ in pairs])
    edges = np.unique(np.quantile(keys, np.linspace(0, 1, n_buckets + 1)))
    which = np.clip(np.searchsorted(edges, keys, side="right") - 1, 0, max(len(edges) - 2, 0))
    buckets = []
    violating = []
    b_est = 0.0
    for k in range(max(len(edges) - 1, 1)):
        sel = which == k
        cnt = int(sel.sum())
        if cnt == 0:
            continue
        d = float(dV[sel].mean())
        fb = float(fv[sel].mean())
        allB = bool(inb[sel].all())
        buckets.append({"lo": float(edges[k]), "hi": float(edges[min(k + 1, len(edges) - 1)]),
                        "n": cnt, "drift": d, "f": fb, "in_B": allB})
        if allB:
            b_est = max(b_est, d + fb)
        elif cnt >= min_samples and d > -fb:
            violating.append(buckets[-1])
    out = ~inb
    n_out = int(out.sum())
    d_out = float(dV[out].mean()) if n_out else math.nan
    return DriftReport(buckets, d_out, n_out, b_est, float(dV.mean()), len(pairs), violating)


def renewal_cycle_pairs(policy) -> list[tuple[int, int]]:
    """Consecutive cycle lengths (T_k, T_k+1) of a Renewal run."""
    lengths = np.diff([c.start for c in policy.cycles])
    return [(int(lengths[k]), int(lengths[k + 1])) for k in range(len(lengths) - 1)]


def queue_epoch_pairs(trace, epoch: int, skip: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Queue vectors sampled every ``epoch`` steps, as consecutive pairs."""
    Q = trace.queue_array()[skip::epoch]
    return [(Q[k], Q[k + 1]) for k in range(len(Q) - 1)]
