"""Deterministic UDP-like arrival schedules."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from typing import List, Set

from ..model import FlowKey
from .config import ExperimentConfig


@dataclass(frozen=True)
class Arrival:
    time: int
    flow: int
    key: FlowKey
    payload_len: int
    global_flag: bool


def flow_key(flow: int) -> FlowKey:
    return FlowKey(0x0A000000 + flow, 0x0A800001, 1024 + flow % 60000, 9000, 17)


def flag_positions(batch_size: int, per_batch: int) -> Set[int]:
    """1-based positions inside each batch that carry a global update."""
    return {math.ceil(k * batch_size / per_batch) for k in range(1, per_batch + 1)}


def generate_traffic(cfg: ExperimentConfig) -> List[Arrival]:
    """Arrivals at the aggregate rate, spread round-robin over flows.

    Flows take turns in an order fixed by seeded per-flow phase offsets, so
    each flow sees a constant inter-arrival of ``flows / rate``.  ``set_rate``
    directives change the aggregate rate from their ``at_ns`` onwards.
    """
    rng = random.Random(cfg["seed"] * 7919 + 1)
    flows = cfg["traffic.flows"]
    phase = [rng.random() for _ in range(flows)]
    order = sorted(range(flows), key=lambda f: (phase[f], f))
    changes = sorted((d["at_ns"], float(d["rate_pps"])) for d in cfg["scenario"]
                     if d["op"] == "set_rate")
    batch = cfg["nf.batch_size"]
    per_batch = cfg["traffic.updates_per_batch"]
    positions = flag_positions(batch, per_batch) if per_batch else set()
    burst_lo = cfg["traffic.burst_at"]
    burst_hi = burst_lo + cfg["traffic.burst"]
    lo, hi = cfg["traffic.payload_min"], cfg["traffic.payload_max"]

    rate = float(cfg["traffic.rate_pps"])
    seg_start, seg_n = 0, 0
    out: List[Arrival] = []
    for n in range(cfg["traffic.packets"]):
        t = seg_start + round((n - seg_n) * 1e9 / rate)
        while changes and changes[0][0] <= t:
            at, new_rate = changes.pop(0)
            # the next arrival after the change is spaced at the new rate
            prev = out[-1].time if out else 0
            seg_start = max(at, prev + round(1e9 / new_rate)) if out else at
            seg_n = n
            rate = new_rate
            t = seg_start
        flow = order[n % flows]
        flag = (n % batch) + 1 in positions or burst_lo <= n < burst_hi
        out.append(Arrival(t, flow, flow_key(flow), rng.randint(lo, hi), flag))
    return out
