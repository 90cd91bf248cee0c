"""Scenario files, presets and the experiment drivers behind the CLI.

A scenario is a plain dict (YAML or JSON on disk).  Every key has a
default, so a preset only lists what differs.  ``resolve`` turns it into
engine objects and ``manifest`` records every resolved constant; feeding
``manifest["scenario"]`` back into :func:`run_scenario` reproduces the
trace byte for byte.
"""

from __future__ import annotations

import copy
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import yaml

from . import analysis as an
from . import simulator as simmod
from .chain import SlotChain
from .core import DemandSpec, Geometry, Params, ring_geometry, straight_geometry, stream
from .dynamics import ControllerParams, ramp_run_for_speed
from .lattice import build_slot_system
from .policies import PolicyConfig, make_policy

R_RING = [[0.2, 0.7, 0.1], [0.0, 0.8, 0.2], [0.5, 0.0, 0.5]]
LOW_MERGE = [15.0, 5.0, 15.0]
LOG_Q_SATURATED = 20.0

DEFAULTS = {
    "name": "custom",
    "params": {},
    "controller": {},
    "geometry": {"shape": "ring", "P": 1860.0, "m": 3, "merge_speeds": None, "ramp_run": 70.0,
                 "offramp_upstream": 155.0},
    "routing": R_RING,
    "lam": 0.5,
    "seed": 0,
    "horizon": 5000,
    "policy": {"kind": "greedy"},
    "initial": "empty",
    "engine": "continuous",
    "penetration": 1.0,
    "idle_steps": 0,
    "ttc_ramps": [1],
    "ttc_zone": [-100.0, None],
    "flow_points": None,
}

# policy settings used by the comparison experiments
POLICIES = {
    "renewal": {"kind": "renewal"},
    "drr": {"kind": "drr", "T_cyc": 13},
    "disdrr": {"kind": "disdrr", "T_cyc": 13},
    "dsg": {"kind": "dsg", "T_cyc": 13},
    "greedy": {"kind": "greedy"},
    "safe_alinea": {"kind": "safe_alinea"},
    "alinea": {"kind": "alinea"},
}

_CONGESTED = {"kind": "congested", "n": 100, "v0": 6.7}

PRESETS = {
    "sec5_1_greedy_vf": {"lam": 0.5, "policy": {"kind": "greedy"}, "horizon": 20000},
    "sec5_1_greedy_low_merge": {"lam": 0.43, "policy": {"kind": "greedy"}, "horizon": 20000,
                                "geometry": {"merge_speeds": LOW_MERGE}},
    "sec5_1_probe_vf": {"policy": {"kind": "greedy"}, "engine": "chain", "horizon": 200_000,
                        "probe": {"range": [0.3, 0.7], "tol": 0.05, "seeds": [1, 2, 3]}},
    "sec5_1_probe_low_merge": {"policy": {"kind": "greedy"}, "engine": "chain", "horizon": 200_000,
                               "geometry": {"merge_speeds": LOW_MERGE},
                               "probe": {"range": [0.3, 0.7], "tol": 0.05, "seeds": [1, 2, 3]}},
    "sec5_2_sweep_vf": {"lam": 0.5, "policy": {"kind": "fcq"}, "engine": "chain", "horizon": 100_000,
                        "sweep": {"param": "T_cyc", "values": [1, 5, 10, 20, 30, 40, 50],
                                  "replications": 3, "warmup": 10_000, "batch": 10_000}},
    "sec5_2_sweep_low_merge": {"lam": 0.455, "policy": {"kind": "fcq"}, "engine": "chain",
                               "horizon": 200_000, "geometry": {"merge_speeds": LOW_MERGE},
                               "sweep": {"param": "T_cyc", "values": [1, 5, 9, 13, 17, 25],
                                         "replications": 3, "warmup": 10_000, "batch": 10_000}},
    "sec5_3_random": {"lam": 0.5, "policy": {"kind": "greedy"}, "horizon": 5000,
                      "initial": {"kind": "random", "n": [20, 50], "v": [0.0, 15.0]}},
    "sec5_4_compare": {"lam": 0.455, "policy": POLICIES["drr"], "horizon": 50_000,
                       "geometry": {"merge_speeds": LOW_MERGE}, "initial": _CONGESTED,
                       "compare": {"policies": ["renewal", "drr", "disdrr", "dsg", "greedy",
                                                "safe_alinea", "alinea"],
                                   "seeds": [1, 2, 3], "ttt_n": 4000,
                                   "penetration": [0.25, 0.5, 0.75, 1.0]}},
    "sec5_5_capacity_drop": {"lam": 0.455, "policy": POLICIES["drr"], "horizon": 3000,
                             "geometry": {"merge_speeds": LOW_MERGE}, "initial": "free_flow",
                             "idle_steps": 146,
                             "compare": {"policies": ["drr", "safe_alinea"], "seeds": [1, 2, 3]}},
    "example4_region": {"region": {"kind": "inner_renewal", "k": [2, 3, 2],
                                   "routing": R_RING, "fix": {"3": 0.5}}},
    "example5_region": {"region": {"kind": "inner_fixed_cycle", "k": [2, 3, 2],
                                   "routing": R_RING, "fix": {"3": 0.5}}},
    "example6_region": {"region": {"kind": "inner_fixed_cycle", "k": [2, 2, 2],
                                   "routing": R_RING, "fix": {"3": 0.5}}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("policy", "initial"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def preset(name: str, **overrides) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")
    sc = _merge(DEFAULTS, PRESETS[name])
    sc["name"] = name
    return _merge(sc, overrides)


def load_scenario(path: str) -> dict:
    """Read a YAML or JSON scenario; a ``preset`` key pulls in preset defaults."""
    with open(path) as fh:
        text = fh.read()
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: scenario must be a mapping")
    if "scenario" in data and "resolved" in data:
        data = data["scenario"]  # a run manifest
    base = preset(data.pop("preset")) if "preset" in data else copy.deepcopy(DEFAULTS)
    return _merge(base, data)


def normalize(sc: dict) -> dict:
    out = _merge(DEFAULTS, sc)
    unknown = set(out) - set(DEFAULTS) - {"probe", "sweep", "compare", "region"}
    if unknown:
        raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
    return out


# ---------------------------------------------------------------- resolve

@dataclass
class Resolved:
    params: Params
    ctrl: ControllerParams
    geometry: Geometry
    system: object
    R: np.ndarray
    demand: DemandSpec
    policy_cfg: PolicyConfig


def build_geometry(spec: dict, params: Params) -> Geometry:
    m = int(spec.get("m", 3))
    speeds = spec.get("merge_speeds")
    if speeds is not None:
        if len(speeds) != m:
            raise ValueError("merge_speeds needs one entry per ramp")
        run = tuple(ramp_run_for_speed(float(v), params) if v < params.Vf else float(spec.get("ramp_run", 70.0))
                    for v in speeds)
    else:
        run = spec.get("ramp_run", 70.0)
    P = float(spec.get("P", 1860.0))
    up = float(spec.get("offramp_upstream", 155.0))
    if spec.get("shape", "ring") == "ring":
        geo = ring_geometry(P, m, run, up)
    else:
        geo = straight_geometry(P, m, run, up)
    if spec.get("offramp_pos") is not None:
        geo = geo.with_positions(offramp_pos=tuple(float(x) for x in spec["offramp_pos"]))
    return geo


def resolve(sc: dict) -> Resolved:
    sc = normalize(sc)
    params = Params(**sc["params"])
    ctrl = ControllerParams(**sc["controller"])
    geo = build_geometry(sc["geometry"], params)
    system = build_slot_system(geo, params)
    lam = sc["lam"]
    lam = tuple(float(x) for x in (lam if isinstance(lam, (list, tuple)) else [lam] * geo.m))
    if len(lam) != geo.m:
        raise ValueError("lam needs one rate per ramp")
    demand = DemandSpec(lam, int(sc["seed"]), int(sc["horizon"]))
    R = np.asarray(sc["routing"], dtype=float)
    if R.shape != (geo.m, geo.m):
        raise ValueError(f"routing must be {geo.m}x{geo.m}")
    pol = dict(sc["policy"])
    pol.setdefault("penetration", float(sc["penetration"]))
    return Resolved(params, ctrl, geo, system, R, demand, PolicyConfig(**pol))


def manifest(sc: dict, res: Resolved | None = None) -> dict:
    sc = normalize(sc)
    res = res or resolve(sc)
    n_sub = simmod.substeps(res.params.tau, res.ctrl.dt)
    return {
        "scenario": sc,
        "resolved": {
            "params": res.params.to_dict(),
            "tau": res.params.tau,
            "controller": dict(res.ctrl.__dict__),
            "substeps": n_sub,
            "dt": res.params.tau / n_sub,
            "slot_system": res.system.manifest(),
            "routing": res.R.tolist(),
            "lam": list(res.demand.lam),
            "policy": res.policy_cfg.to_dict(),
            "engine_constants": {
                "free_flow_tol": simmod.FREE_FLOW_TOL, "ttc_max": simmod.TTC_MAX,
                "stop_brake": simmod.STOP_BRAKE, "emergency_margin": simmod.EMERGENCY_MARGIN,
                "detector_len": simmod.DETECTOR_LEN, "m4_sample_dt": simmod.M4_SAMPLE_DT,
            },
        },
    }


def make_engine(sc: dict, res: Resolved | None = None):
    sc = normalize(sc)
    res = res or resolve(sc)
    policy = make_policy(res.policy_cfg, res.geometry.m, res.params.tau, stream(res.demand.seed, "alinea"))
    if sc["engine"] == "chain":
        if sc["idle_steps"] or sc["penetration"] < 1.0 or isinstance(sc["initial"], dict):
            raise ValueError("the slot chain supports neither idle periods, penetration nor off-slot starts")
        return SlotChain(res.system, res.R, res.demand, policy, sc["initial"], record_vehicles=True)
    if sc["engine"] != "continuous":
        raise ValueError(f"unknown engine {sc['engine']!r}")
    zone = tuple(sc["ttc_zone"])
    return simmod.Simulator(res.system, res.R, res.demand, policy, sc["initial"], ctrl=res.ctrl,
                            flow_points=sc["flow_points"], ttc_ramps=tuple(sc["ttc_ramps"]),
                            ttc_zone=zone, penetration=float(sc["penetration"]),
                            idle_steps=int(sc["idle_steps"]))


def run_scenario(sc: dict, horizon: int | None = None):
    """Run one scenario; returns (trace, manifest, engine)."""
    sc = normalize(sc)
    if horizon is not None:
        sc["horizon"] = int(horizon)
    res = resolve(sc)
    eng = make_engine(sc, res)
    trace = eng.run(int(sc["horizon"]))
    man = manifest(sc, res)
    man["counters"] = dict(trace.counters)
    return trace, man, eng


def _pool_map(fn, jobs, threads: int):
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs))


# ------------------------------------------------------------ comparison

def _summary_job(sc: dict) -> dict:
    trace, _man, _eng = run_scenario(sc)
    tab = trace.vehicle_table()
    ok = np.isfinite(tab["t_arr"]) & np.isfinite(tab["t_exit"])
    idx = np.flatnonzero(ok)
    order = idx[np.argsort(tab["t_exit"][idx], kind="stable")]
    Q = trace.queue_array()
    total = Q.sum(axis=1) if Q.size else np.zeros(0)
    flow = np.asarray(trace.flow, dtype=np.int64) if trace.flow else np.zeros((0, 0), dtype=np.int64)
    return {
        "policy": sc["policy"]["kind"],
        "seed": sc["seed"],
        "penetration": sc["penetration"],
        "trip_times": (tab["t_exit"][order] - tab["t_arr"][order]) / 60.0,
        "avg_queue": float(total.mean() / Q.shape[1]) if Q.size else 0.0,
        "total_queue": total,
        "verdict": an.classify_stability(total) if len(total) >= 3 else None,
        "ttc": np.array([row[3] for row in trace.ttc]),
        "flow": flow,
        "counters": dict(trace.counters),
    }


def compare(sc: dict, policies=None, seeds=None, threads: int = 1, penetration=None) -> list[dict]:
    """Replicated runs of several policies on one scenario."""
    sc = normalize(sc)
    cfg = sc.get("compare", {})
    policies = list(policies or cfg.get("policies", POLICIES))
    seeds = list(seeds or cfg.get("seeds", [1, 2, 3]))
    pens = list(penetration or [sc["penetration"]])
    jobs = []
    for name in policies:
        for pen in pens:
            for seed in seeds:
                jobs.append(_merge(sc, {"policy": POLICIES.get(name, {"kind": name}), "seed": seed,
                                        "penetration": pen}))
    return _pool_map(_summary_job, jobs, threads)


def ttt_common(results: list[dict], n: int | None = None) -> int:
    """Largest n every run has completed (capped at ``n``)."""
    c = min(len(r["trip_times"]) for r in results)
    return min(c, n) if n else c


def comparison_table(results: list[dict], n: int) -> list[dict]:
    """Per-policy averages over seeds of TTT_n and the queue average."""
    rows = []
    keys = sorted({(r["policy"], r["penetration"]) for r in results}, key=lambda k: (k[0], -k[1]))
    for pol, pen in keys:
        rs = [r for r in results if r["policy"] == pol and r["penetration"] == pen]
        ttt = [float(np.mean(r["trip_times"][:n])) if len(r["trip_times"]) else math.nan for r in rs]
        sat = [bool(r["verdict"].saturated) for r in rs if r["verdict"] is not None]
        rows.append({
            "policy": pol, "penetration": pen, "seeds": len(rs), "ttt_n": n,
            "avg_travel_time_min": float(np.mean(ttt)),
            "avg_travel_time_sd": float(np.std(ttt)),
            "avg_queue": float(np.mean([r["avg_queue"] for r in rs])),
            "saturated_runs": int(sum(sat)),
            "collisions": int(sum(r["counters"].get("collisions", 0) for r in rs)),
        })
    return rows


def ttc_box(results: list[dict], threshold: float = 6.0) -> list[dict]:
    rows = []
    for pol in sorted({r["policy"] for r in results}):
        vals = np.concatenate([r["ttc"] for r in results if r["policy"] == pol] or [np.zeros(0)])
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            rows.append({"policy": pol, "n": 0, "q1": math.nan, "median": math.nan, "q3": math.nan,
                         "whisker_lo": math.nan, "whisker_hi": math.nan, "frac_below": math.nan})
            continue
        q1, med, q3 = np.percentile(vals, [25, 50, 75])
        iqr = q3 - q1
        lo = float(vals[vals >= q1 - 1.5 * iqr].min())
        hi = float(vals[vals <= q3 + 1.5 * iqr].max())
        rows.append({"policy": pol, "n": int(vals.size), "q1": float(q1), "median": float(med),
                     "q3": float(q3), "whisker_lo": lo, "whisker_hi": hi,
                     "frac_below": float(np.mean(vals < threshold))})
    return rows


# ----------------------------------------------------------------- sweeps

def _sweep_job(args) -> dict:
    sc, warmup, batch = args
    trace, _man, _eng = run_scenario(sc)
    total = trace.queue_array().sum(axis=1)
    verdict = an.classify_stability(total)
    try:
        bm = an.batch_means(total, warmup, batch)
        mean, hw = bm.mean, bm.half_width
    except ValueError:
        mean, hw = float(total.mean()), math.nan
    return {"value": sc["policy"].get("T_cyc"), "seed": sc["seed"], "mean": mean, "half_width": hw,
            "saturated": verdict.saturated, "slope": verdict.slope}


def sweep(sc: dict, param: str | None = None, values=None, replications: int | None = None,
          threads: int = 1) -> list[dict]:
    """Queue averages over a grid of one policy parameter."""
    sc = normalize(sc)
    cfg = sc.get("sweep", {})
    param = param or cfg.get("param", "T_cyc")
    values = list(values if values is not None else cfg.get("values", [1]))
    reps = int(replications or cfg.get("replications", 3))
    warmup = int(cfg.get("warmup", 10_000))
    batch = int(cfg.get("batch", 10_000))
    jobs, keys = [], []
    for v in values:
        for r in range(reps):
            pol = dict(sc["policy"])
            pol[param] = v
            jobs.append((_merge(sc, {"policy": pol, "seed": int(sc["seed"]) + r + 1}), warmup, batch))
            keys.append(v)
    out = _pool_map(_sweep_job, jobs, threads)
    rows = []
    for v in values:
        rs = [o for o, k in zip(out, keys) if k == v]
        n_sat = sum(o["saturated"] for o in rs)
        saturated = n_sat * 2 > len(rs)
        mean = float(np.mean([o["mean"] for o in rs]))
        rows.append({
            "param": param, "value": v, "replications": len(rs), "avg_queue": mean,
            "ci_half_width": float(np.mean([o["half_width"] for o in rs])),
            "saturated_runs": int(n_sat), "saturated": bool(saturated),
            "log_q": LOG_Q_SATURATED if saturated else float(math.log(max(mean, 1e-12))),
        })
    return rows


# ----------------------------------------------------------------- probes

def queue_runner(sc: dict):
    """``runner(lam, seed, horizon)`` for :func:`analysis.saturation_probe`."""
    base = normalize(sc)

    def runner(lam, seed, horizon):
        trace, _m, _e = run_scenario(_merge(base, {"lam": float(lam), "seed": int(seed)}), horizon)
        return trace.queue_array().sum(axis=1)

    return runner


def probe(sc: dict, lambda_range=None, seeds=None, horizon: int | None = None, tol: float | None = None):
    sc = normalize(sc)
    cfg = sc.get("probe", {})
    return an.saturation_probe(queue_runner(sc), tuple(lambda_range or cfg.get("range", (0.3, 0.7))),
                               seeds=tuple(seeds or cfg.get("seeds", (1, 2, 3))),
                               horizon=int(horizon or sc["horizon"]), tol=float(tol or cfg.get("tol", 0.05)))


def output_dir(path: str | None) -> str:
    return os.environ.get("RAMPSIM_OUT") or path or "rampsim_out"
