"""Experiment runners: single runs, parameter sweeps and burst timelapses."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from ..model import FlowKey, Packet, PacketId, Trace
from ..oracle import Report, compare, effective_drops, run_oracle
from .config import DEFAULTS, ExperimentConfig, load_config
from .metrics import METRIC_COLUMNS, Window, summarize, windows
from .system import RunResult, run_system

CONFIG_COLUMNS = [k for k, v in DEFAULTS.items() if not isinstance(v, list)]
EXTRA_COLUMNS = ["released", "stamped", "batches", "global_commits", "log_entries",
                 "promotions", "end_time_ns", "verdict"]
CSV_COLUMNS = CONFIG_COLUMNS + METRIC_COLUMNS + EXTRA_COLUMNS


@dataclass
class ExperimentResult:
    run: RunResult
    row: Dict[str, object]
    report: Report

    @property
    def passed(self) -> bool:
        return self.report.passed

    def trace_hash(self) -> str:
        return trace_hash(self.run.trace)


def trace_hash(trace: Trace) -> str:
    return hashlib.sha256(trace.dumps().encode()).hexdigest()


def verdict(run: RunResult) -> Report:
    drops, _ = effective_drops(run.trace)
    ref = run_oracle(run.packets, drops, run.cfg["nf.global_keys"])
    return compare(run.trace, ref, run.final)


def run_experiment(cfg: ExperimentConfig, out_dir: Optional[str] = None) -> ExperimentResult:
    run = run_system(cfg)
    report = verdict(run)
    row: Dict[str, object] = {k: cfg[k] for k in CONFIG_COLUMNS}
    row.update(summarize(run.records, run.packets, run.trace, cfg["metrics.tracked_n"]))
    row.update({
        "released": len(run.records),
        "stamped": len(run.packets),
        "batches": len({(r.nf, r.release) for r in run.records}),
        "global_commits": len(run.final["log"]),
        "log_entries": len(run.final["log"]),
        "promotions": len(run.final["promotions"]),
        "end_time_ns": run.end_time,
        "verdict": "pass" if report.passed else "fail",
    })
    result = ExperimentResult(run, row, report)
    if out_dir is not None:
        write_bundle(result, out_dir)
    return result


# ----------------------------------------------------------------------
# run bundles
def packet_to_json(p: Packet) -> str:
    k = p.key
    return json.dumps({"flow_id": p.flow_id, "counter": p.counter,
                       "key": [k.src_ip, k.dst_ip, k.src_port, k.dst_port, k.protocol],
                       "payload_len": p.payload_len, "stamp_ns": p.stamp_time,
                       "work_cost": p.work_cost, "global": p.global_update_flag},
                      separators=(",", ":"))


def packet_from_json(line: str) -> Packet:
    d = json.loads(line)
    return Packet(PacketId(d["flow_id"], d["counter"]), FlowKey(*d["key"]), d["payload_len"],
                  d["stamp_ns"], d.get("work_cost", 1), d["global"])


def write_rows(rows: Iterable[Dict[str, object]], fp) -> None:
    w = csv.DictWriter(fp, fieldnames=CSV_COLUMNS, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)


def write_bundle(result: ExperimentResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    run = result.run
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fp:
        fp.write(run.cfg.dumps() + "\n")
    with open(os.path.join(out_dir, "trace.jsonl"), "w", encoding="utf-8") as fp:
        run.trace.dump(fp)
    with open(os.path.join(out_dir, "packets.jsonl"), "w", encoding="utf-8") as fp:
        for p in run.packets:
            fp.write(packet_to_json(p) + "\n")
    with open(os.path.join(out_dir, "state.json"), "w", encoding="utf-8") as fp:
        json.dump(run.final, fp, sort_keys=True)
        fp.write("\n")
    with open(os.path.join(out_dir, "verdict.json"), "w", encoding="utf-8") as fp:
        json.dump(result.report.to_dict(), fp, indent=2)
        fp.write("\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w", encoding="utf-8", newline="") as fp:
        write_rows([result.row], fp)


def verify_bundle(path: str) -> Report:
    """Re-check a stored run against a fresh reference computation."""
    with open(os.path.join(path, "trace.jsonl"), encoding="utf-8") as fp:
        trace = Trace.load(fp)
    with open(os.path.join(path, "packets.jsonl"), encoding="utf-8") as fp:
        packets = [packet_from_json(l) for l in fp if l.strip()]
    with open(os.path.join(path, "state.json"), encoding="utf-8") as fp:
        final = json.load(fp)
    drops, _ = effective_drops(trace)
    ref = run_oracle(packets, drops, final.get("global_keys", 4))
    return compare(trace, ref, final)


def bundle_config(path: str) -> ExperimentConfig:
    with open(os.path.join(path, "config.json"), encoding="utf-8") as fp:
        return load_config(json.load(fp))


def bundle_trace_hash(path: str) -> str:
    h = hashlib.sha256()
    with open(os.path.join(path, "trace.jsonl"), "rb") as fp:
        h.update(fp.read())
    return h.hexdigest()


# ----------------------------------------------------------------------
# sweeps
def _run_row(values: Dict[str, object]) -> Dict[str, object]:
    return run_experiment(load_config(values)).row


def sweep(cfg: ExperimentConfig, param: str, values: Sequence, seeds: Sequence[int] = (0,),
          jobs: int = 1) -> List[Dict[str, object]]:
    """One row per (value, seed), in grid order."""
    grid = []
    for v in values:
        for s in seeds:
            d = cfg.to_dict()
            d[param] = v
            d["seed"] = s
            load_config(d)  # fail fast on a bad grid point
            grid.append(d)
    if jobs > 1 and len(grid) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_row, grid))
    return [_run_row(d) for d in grid]


def mean_by(rows: Sequence[Dict[str, object]], param: str, column: str) -> Dict[object, float]:
    acc: Dict[object, List[float]] = {}
    for r in rows:
        acc.setdefault(r[param], []).append(float(r[column]))
    return {k: sum(v) / len(v) for k, v in acc.items()}


def rows_to_csv(rows: Sequence[Dict[str, object]]) -> str:
    buf = io.StringIO()
    write_rows(rows, buf)
    return buf.getvalue()


# ----------------------------------------------------------------------
# timelapse
@dataclass
class Timelapse:
    windows: List[Window]
    burst_window: int
    pre_throughput: float
    pre_latency: float
    dip_throughput: float
    recovery_window: Optional[int]
    post_throughput: Optional[float]
    post_latency: Optional[float]
    report: Report

    @property
    def dip_depth(self) -> float:
        return self.pre_throughput - self.dip_throughput

    def recovered(self, tol: float = 0.02) -> bool:
        return (self.post_throughput is not None
                and abs(self.post_throughput - self.pre_throughput) <= tol * self.pre_throughput)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["window_start_ns", "released", "throughput_pps", "latency_ns", "phase"])
        for k, win in enumerate(self.windows):
            if k < self.burst_window:
                phase = "pre"
            elif self.recovery_window is None or k < self.recovery_window:
                phase = "burst"
            else:
                phase = "post"
            w.writerow([win.start_ns, win.released, f"{win.throughput_pps:.3f}",
                        "" if win.latency_ns is None else f"{win.latency_ns:.1f}", phase])
        return buf.getvalue()


def run_timelapse(cfg: ExperimentConfig, burst: int, at_packet: int,
                  tol: float = 0.02) -> Timelapse:
    """Flag ``burst`` consecutive packets from arrival ``at_packet`` on and window the result.

    Only windows that end before the last arrival are analysed, so the
    drain tail never counts as a dip.  The first window is warm-up.
    """
    if burst < 0:
        raise ValueError("burst must be >= 0")
    cfg = cfg.replace(**{"traffic.burst": burst, "traffic.burst_at": at_packet})
    res = run_experiment(cfg)
    run = res.run
    w_ns = cfg["metrics.window_ns"]
    wins = windows(run.records, w_ns, run.traffic_end)
    full = [w for w in wins if w.start_ns + w_ns <= run.traffic_end]
    burst_t = at_packet * 1e9 / cfg["traffic.rate_pps"]
    kb = int(burst_t // w_ns)
    pre = full[1:kb]
    if not pre:
        raise ValueError("burst starts before a full pre-burst window exists")
    pre_tp = sum(w.throughput_pps for w in pre) / len(pre)
    pre_lat = sum(w.latency_ns for w in pre) / len(pre)
    after = full[kb:]
    dip = min((w.throughput_pps for w in after), default=pre_tp)
    rec = None
    for k in range(kb + 1, len(full)):
        if all(abs(w.throughput_pps - pre_tp) <= tol * pre_tp for w in full[k:]):
            rec = k
            break
    post_tp = post_lat = None
    if rec is not None:
        post = full[rec:]
        post_tp = sum(w.throughput_pps for w in post) / len(post)
        lats = [w.latency_ns for w in post if w.latency_ns is not None]
        post_lat = sum(lats) / len(lats) if lats else None
    return Timelapse(wins, kb, pre_tp, pre_lat, dip, rec, post_tp, post_lat, res.report)
