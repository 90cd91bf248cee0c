"""Run traces and their CSV form."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

TRACE_FILES = ("queues.csv", "vehicles.csv", "releases.csv", "flow.csv", "ttc.csv", "comms.csv")


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return ""
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(round(x, 9))


@dataclass
class Trace:
    """Everything a run records.

    Vehicle timestamps are in seconds and NaN until the event happens.
    ``queues`` has one row per step holding the queue lengths after that
    step's arrivals.
    """

    m: int
    tau: float
    policy: str = ""
    queues: list = field(default_factory=list)
    releases: list = field(default_factory=list)
    veh_origin: list = field(default_factory=list)
    veh_dest: list = field(default_factory=list)
    veh_arr: list = field(default_factory=list)
    veh_rel: list = field(default_factory=list)
    veh_merge: list = field(default_factory=list)
    veh_exit: list = field(default_factory=list)
    flow_points: list = field(default_factory=list)
    flow: list = field(default_factory=list)
    ttc: list = field(default_factory=list)
    comms: list = field(default_factory=list)
    counters: dict = field(default_factory=dict)

    def add_vehicle(self, origin: int, dest: int, t_arr: float) -> int:
        self.veh_origin.append(origin)
        self.veh_dest.append(dest)
        self.veh_arr.append(t_arr)
        self.veh_rel.append(math.nan)
        self.veh_merge.append(math.nan)
        self.veh_exit.append(math.nan)
        return len(self.veh_origin) - 1

    @property
    def n_steps(self) -> int:
        return len(self.queues)

    def queue_array(self) -> np.ndarray:
        if not self.queues:
            return np.zeros((0, self.m), dtype=np.int64)
        return np.asarray(self.queues, dtype=np.int64)

    def vehicle_table(self) -> dict:
        return {
            "origin": np.asarray(self.veh_origin, dtype=np.int64),
            "dest": np.asarray(self.veh_dest, dtype=np.int64),
            "t_arr": np.asarray(self.veh_arr, dtype=float),
            "t_rel": np.asarray(self.veh_rel, dtype=float),
            "t_merge": np.asarray(self.veh_merge, dtype=float),
            "t_exit": np.asarray(self.veh_exit, dtype=float),
        }

    def release_array(self) -> np.ndarray:
        if not self.releases:
            return np.zeros((0, 3), dtype=np.int64)
        return np.asarray(self.releases, dtype=np.int64)

    # ------------------------------------------------------------ output
    def rows(self, name: str):
        if name == "queues.csv":
            yield ["step"] + [f"Q_{i + 1}" for i in range(self.m)]
            for t, q in enumerate(self.queues):
                yield [t, *q]
        elif name == "vehicles.csv":
            yield ["id", "origin", "dest", "t_arr", "t_rel", "t_merge", "t_exit"]
            for k in range(len(self.veh_origin)):
                yield [k, self.veh_origin[k], self.veh_dest[k], self.veh_arr[k], self.veh_rel[k],
                       self.veh_merge[k], self.veh_exit[k]]
        elif name == "releases.csv":
            yield ["step", "ramp", "id"]
            yield from self.releases
        elif name == "flow.csv":
            yield ["point", "step", "D_p"]
            for t, counts in enumerate(self.flow):
                for k, c in enumerate(counts):
                    yield [k, t, c]
        elif name == "ttc.csv":
            yield ["time", "pair", "ttc"]
            for time, lead, foll, val in self.ttc:
                yield [time, f"{lead}-{foll}", val]
        elif name == "comms.csv":
            yield ["step", "policy", "transmissions"]
            for t, c in enumerate(self.comms):
                yield [t, self.policy, c]
        else:
            raise KeyError(name)

    def write(self, out_dir: str, manifest: dict | None = None) -> dict:
        """Write every CSV (and the manifest) and return SHA-256 checksums."""
        os.makedirs(out_dir, exist_ok=True)
        sums = {}
        for name in TRACE_FILES:
            path = os.path.join(out_dir, name)
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for row in self.rows(name):
                    w.writerow([_fmt(x) if not isinstance(x, str) else x for x in row])
            sums[name] = file_sha256(path)
        if manifest is not None:
            path = os.path.join(out_dir, "run_manifest.json")
            with open(path, "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
                fh.write("\n")
        return sums

    def checksum(self) -> str:
        """Digest of the CSV content without touching the disk."""
        h = hashlib.sha256()
        for name in TRACE_FILES:
            for row in self.rows(name):
                h.update(",".join(_fmt(x) if not isinstance(x, str) else x for x in row).encode())
                h.update(b"\n")
        return h.hexdigest()


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()
