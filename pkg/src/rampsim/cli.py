"""Command-line entry point: ``rampsim {simulate,region,sweep,compare,probe}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np
import yaml

from . import analysis as an
from . import scenario as scn
from .core import Params, cumulative_routing
from .dynamics import merge_headway_multiple
from .trace import _fmt

log = logging.getLogger("rampsim")

EXIT_CONFIG = 2
EXIT_IO = 3


def _write_csv(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, str) else _fmt(x) for x in row])


def _dict_rows(path: str, rows: list[dict]) -> None:
    header = list(rows[0]) if rows else []
    _write_csv(path, header, ([r[k] for k in header] for r in rows))


def _scenario_from_args(args) -> dict:
    if getattr(args, "scenario", None):
        sc = scn.load_scenario(args.scenario)
    elif args.preset:
        sc = scn.preset(args.preset)
    else:
        sc = scn.normalize({})
    if args.seed is not None:
        sc["seed"] = args.seed
    if getattr(args, "horizon", None) is not None:
        sc["horizon"] = args.horizon
    for item in getattr(args, "set", None) or []:
        key, _, val = item.partition("=")
        node = sc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(val)
    return scn.normalize(sc)


def _out(args) -> str:
    out = scn.output_dir(args.out)
    os.makedirs(out, exist_ok=True)
    return out


# ------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    sc = _scenario_from_args(args)
    out = _out(args)
    if int(sc["horizon"]) == 0:
        man = scn.manifest(sc)
        with open(os.path.join(out, "run_manifest.json"), "w") as fh:
            json.dump(man, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"manifest written to {out}")
        return 0
    trace, man, _eng = scn.run_scenario(sc)
    sums = trace.write(out, man)
    for name, digest in sums.items():
        print(f"{digest}  {name}")
    c = trace.counters
    if c:
        print(f"collisions={c.get('collisions', 0)} gap_violations={c.get('gap_violations', 0)}")
    return 0


def _parse_fix(items) -> dict:
    fix = {}
    for item in items or []:
        k, _, v = str(item).partition("=")
        fix[int(k) - 1] = float(v)
    return fix


def cmd_region(args) -> int:
    spec = {}
    if args.preset:
        spec = dict(scn.preset(args.preset).get("region", {}))
    if args.routing:
        with open(args.routing) as fh:
            spec["routing"] = yaml.safe_load(fh)
    R = np.asarray(spec.get("routing", scn.R_RING), dtype=float)
    m = R.shape[0]
    if R.ndim != 2 or R.shape[1] != m:
        raise ValueError("routing must be a square matrix")
    params = Params()
    if args.merge_speeds:
        speeds = [float(x) for x in args.merge_speeds.split(",")]
        if len(speeds) != m:
            raise ValueError(f"--merge-speeds needs {m} values")
        k = [merge_headway_multiple(v, params) for v in speeds]
    else:
        k = list(spec.get("k", [2] * m))
    if len(k) != m:
        raise ValueError("dimension mismatch between routing and headway multiples")
    fix = _parse_fix(args.fix) if args.fix else {int(a) - 1: float(b) for a, b in spec.get("fix", {}).items()}
    kinds = [args.kind] if args.kind != "all" else ["inner_renewal", "inner_fixed_cycle", "outer"]
    if args.kind is None:
        kinds = [spec.get("kind", "inner_fixed_cycle")]
    Rt = cumulative_routing(R)
    makers = {
        "inner_renewal": lambda: an.inner_region_renewal(Rt, k),
        "inner_fixed_cycle": lambda: an.inner_region_fixed_cycle(Rt, k),
        "outer": lambda: an.outer_region(Rt),
    }
    out = _out(args)
    rows, samples = [], []
    for kind in kinds:
        reg = makers[kind]()
        if fix:
            reg = reg.fix(fix)
        reg = reg.reduced()
        free = reg.free or tuple(range(m))
        for a, b in reg.constraints:
            terms = " + ".join(f"{c:g}*lam{free[j] + 1}" for j, c in enumerate(a) if c != 0)
            op = "<" if reg.strict else "<="
            print(f"{kind}: {terms} {op} {b:g}")
            rows.append([kind, op, b] + [a[j] for j in range(len(free))])
        if len(free) == 2:
            for x, y in reg.boundary_samples(args.samples):
                samples.append([kind, x, y])
    width = max((len(r) - 3 for r in rows), default=0)
    _write_csv(os.path.join(out, "region.csv"), ["kind", "op", "bound"] + [f"a{j + 1}" for j in range(width)], rows)
    if samples:
        _write_csv(os.path.join(out, "region_boundary.csv"), ["kind", "x", "y"], samples)
    return 0


def cmd_sweep(args) -> int:
    sc = _scenario_from_args(args)
    values = None
    param = None
    if args.param:
        param, _, rng = args.param.partition("=")
        if ".." in rng:
            lo, hi = rng.split("..")
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [yaml.safe_load(v) for v in rng.split(",")]
    rows = scn.sweep(sc, param, values, args.replications, threads=args.threads)
    out = _out(args)
    _dict_rows(os.path.join(out, "summary.csv"), rows)
    for r in rows:
        flag = "saturated" if r["saturated"] else "stable"
        print(f"{r['param']}={r['value']}: avg_queue={r['avg_queue']:.3f} {flag}")
    return 0


def cmd_compare(args) -> int:
    sc = _scenario_from_args(args)
    cfg = sc.get("compare", {})
    policies = args.policies.split(",") if args.policies else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    out = _out(args)
    results = scn.compare(sc, policies, seeds, threads=args.threads)
    n = args.ttt_n or cfg.get("ttt_n") or scn.ttt_common(results)
    n = min(n, scn.ttt_common(results))
    table = scn.comparison_table(results, n)
    _dict_rows(os.path.join(out, "table3.csv"), table)
    _dict_rows(os.path.join(out, "ttc_box.csv"), scn.ttc_box(results))
    flow_rows = []
    for r in results:
        F = r["flow"]
        for t in range(F.shape[0]):
            for p in range(F.shape[1]):
                flow_rows.append([r["policy"], r["seed"], p, t, int(F[t, p])])
    _write_csv(os.path.join(out, "flow.csv"), ["policy", "seed", "point", "step", "D_p"], flow_rows)
    curve_rows = []
    for r in results:
        tt = r["trip_times"]
        if tt.size:
            cum = np.cumsum(tt) / np.arange(1, tt.size + 1)
            stride = max(tt.size // 200, 1)
            for j in range(stride - 1, tt.size, stride):
                curve_rows.append([r["policy"], r["seed"], r["penetration"], j + 1, cum[j]])
    _write_csv(os.path.join(out, "ttt_curve.csv"), ["policy", "seed", "penetration", "n", "ttt_min"], curve_rows)
    if args.penetration:
        pens = [float(x) for x in args.penetration.split(",")]
        pol = policies or ["drr", "safe_alinea"]
        pres = scn.compare(sc, pol, seeds, threads=args.threads, penetration=pens)
        m = scn.ttt_common(pres, n)
        _dict_rows(os.path.join(out, "penetration.csv"), scn.comparison_table(pres, m))
    for row in table:
        print(f"{row['policy']:12s} TTT_{n}={row['avg_travel_time_min']:.3f} min  "
              f"avg_queue={row['avg_queue']:.2f}  saturated={row['saturated_runs']}/{row['seeds']}")
    return 0


def cmd_probe(args) -> int:
    sc = _scenario_from_args(args)
    rng = tuple(float(x) for x in args.range.split(",")) if args.range else None
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    res = scn.probe(sc, rng, seeds, tol=args.tol)
    out = _out(args)
    rows = [[lam, seed, h, "saturated" if v.saturated else "stable", v.slope, v.ci[0], v.ci[1]]
            for lam, seed, h, v in res.records]
    _write_csv(os.path.join(out, "probe.csv"), ["lam", "seed", "horizon", "class", "slope", "ci_lo", "ci_hi"], rows)
    print(f"throughput bracket [{res.lo:.4f}, {res.hi:.4f}] width {res.width:.4f}")
    return 0


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="output directory (RAMPSIM_OUT overrides)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for replicated runs")
    common.add_argument("--preset", default=None, choices=sorted(scn.PRESETS))
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="rampsim", description="Ramp-metering simulator.")
    sub = ap.add_subparsers(dest="command", required=True)

    def scenario_args(p):
        p.add_argument("scenario", nargs="?", help="YAML/JSON scenario or run_manifest.json")
        p.add_argument("--horizon", type=int, default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a scenario key, e.g. policy.T_cyc=13 or lam=0.4")

    p = sub.add_parser("simulate", parents=[common], help="run one scenario and write its trace")
    scenario_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("region", parents=[common], help="analytical throughput regions")
    p.add_argument("routing", nargs="?", help="YAML/JSON file holding the routing matrix R")
    p.add_argument("--merge-speeds", default=None, help="comma separated merge speeds (m/s)")
    p.add_argument("--kind", default=None, choices=["inner_renewal", "inner_fixed_cycle", "outer", "all"])
    p.add_argument("--fix", action="append", metavar="I=LAM", help="fix ramp I's rate (1-based)")
    p.add_argument("--samples", type=int, default=101)
    p.set_defaults(func=cmd_region)

    p = sub.add_parser("sweep", parents=[common], help="queue averages over a policy parameter grid")
    scenario_args(p)
    p.add_argument("--param", default=None, help="e.g. T_cyc=1..50 or T_cyc=1,5,13")
    p.add_argument("--replications", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", parents=[common], help="replicated policy comparison")
    scenario_args(p)
    p.add_argument("--policies", default=None, help="comma separated policy names")
    p.add_argument("--seeds", default=None, help="comma separated seeds")
    p.add_argument("--ttt-n", type=int, default=None)
    p.add_argument("--penetration", default=None, help="comma separated penetration rates")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("probe", parents=[common], help="bisect the saturation rate")
    scenario_args(p)
    p.add_argument("--range", default=None, help="lo,hi")
    p.add_argument("--seeds", default=None)
    p.add_argument("--tol", type=float, default=None)
    p.set_defaults(func=cmd_probe)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, TypeError, yaml.YAMLError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        print(f"rampsim: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"rampsim: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
