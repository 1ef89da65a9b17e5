"""Virtual-time metrics: per-packet latency split, throughput, drops."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

from ..model import EventKind, Packet, Trace
from .system import ReleaseRecord

METRIC_COLUMNS = ["latency_ns", "tau_path_ns", "tau_pre_ns", "tau_proc_ns", "tau_post_ns",
                  "throughput_pps", "drops", "drop_frac"]


@dataclass(frozen=True)
class LatencySample:
    tau_path: int
    tau_pre: int
    tau_proc: int
    tau_post: int

    @property
    def total(self) -> int:
        return self.tau_path + self.tau_pre + self.tau_proc + self.tau_post

    @classmethod
    def of(cls, r: ReleaseRecord) -> "LatencySample":
        return cls(r.arrived - r.stamp, r.start - r.arrived, r.done - r.start,
                   r.release - r.done)


def latency(records: Sequence[ReleaseRecord], packets: Sequence[Packet],
            tracked_n: int) -> Dict[str, float]:
    """Mean latency split over the first ``tracked_n`` stamped packets that were released.

    The four component means are summed to give ``latency_ns``, so the
    columns add up exactly.
    """
    order = {p.id: i for i, p in enumerate(packets)}
    chosen = sorted(records, key=lambda r: order.get(r.pid, len(order)))[:tracked_n]
    if not chosen:
        return {"latency_ns": 0.0, "tau_path_ns": 0.0, "tau_pre_ns": 0.0,
                "tau_proc_ns": 0.0, "tau_post_ns": 0.0}
    n = len(chosen)
    samples = [LatencySample.of(r) for r in chosen]
    path = sum(s.tau_path for s in samples) / n
    pre = sum(s.tau_pre for s in samples) / n
    proc = sum(s.tau_proc for s in samples) / n
    post = sum(s.tau_post for s in samples) / n
    return {"latency_ns": path + pre + proc + post, "tau_path_ns": path, "tau_pre_ns": pre,
            "tau_proc_ns": proc, "tau_post_ns": post}


def throughput(records: Iterable[ReleaseRecord], packets: Sequence[Packet]) -> float:
    """Sum over flows of released packets divided by that flow's active span, in pps."""
    start: Dict[int, int] = {}
    for p in packets:
        start.setdefault(p.flow_id, p.stamp_time)
    count: Dict[int, int] = {}
    end: Dict[int, int] = {}
    for r in records:
        f = r.pid.flow_id
        count[f] = count.get(f, 0) + 1
        end[f] = max(end.get(f, 0), r.release)
    total = 0.0
    for f, s in count.items():
        span = end[f] - start[f]
        if span > 0:
            total += s / (span / 1e9)
    return total


def input_drops(trace: Trace) -> int:
    """Dropped events raised by NF input buffers (stamper drops carry no packet)."""
    return sum(1 for e in trace
               if e.kind is EventKind.DROPPED and e.packet is not None)


def summarize(records, packets, trace: Trace, tracked_n: int,
              offered: Optional[int] = None) -> Dict[str, float]:
    row = latency(records, packets, tracked_n)
    row["throughput_pps"] = throughput(records, packets)
    drops = input_drops(trace)
    row["drops"] = drops
    denom = offered if offered is not None else len(packets)
    row["drop_frac"] = drops / denom if denom else 0.0
    return row


@dataclass(frozen=True)
class Window:
    start_ns: int
    released: int
    throughput_pps: float
    latency_ns: Optional[float]


def windows(records: Iterable[ReleaseRecord], window_ns: int, until_ns: int) -> List[Window]:
    """Released-packet rate and mean latency per fixed window of release time."""
    n = max(1, -(-until_ns // window_ns))
    counts = [0] * n
    lat = [0] * n
    for r in records:
        k = r.release // window_ns
        if k < n:
            counts[k] += 1
            lat[k] += r.release - r.stamp
    return [Window(k * window_ns, counts[k], counts[k] / (window_ns / 1e9),
                   lat[k] / counts[k] if counts[k] else None) for k in range(n)]
