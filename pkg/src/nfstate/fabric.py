"""Switch rule table, packet duplication and the simulated network."""

from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

from .model import EventKind, Packet, Trace
from .sim import Scheduler

DATA = "data"
CTRL = "ctrl"


@dataclass(frozen=True)
class FlowRule:
    flow_id: int
    primary_nf: str
    secondary_nf: Optional[str]
    version: int

    def __post_init__(self):
        if self.primary_nf == self.secondary_nf:
            raise ValueError("primary and secondary NF must differ")


class RuleTable:
    """Flow ID -> current rule.  Lookups always see the latest version."""

    def __init__(self):
        self._rules: Dict[int, FlowRule] = {}
        self.version = 0

    def lookup(self, flow_id: int) -> Optional[FlowRule]:
        return self._rules.get(flow_id)

    def update(self, flow_id: int, primary: str, secondary: Optional[str]) -> int:
        if primary == secondary:
            raise ValueError("primary and secondary NF must differ")
        self.version += 1
        self._rules[flow_id] = FlowRule(flow_id, primary, secondary, self.version)
        return self.version

    install = update

    def flows_with_primary(self, nf: str):
        return sorted(f for f, r in self._rules.items() if r.primary_nf == nf)

    def flows_with_secondary(self, nf: str):
        return sorted(f for f, r in self._rules.items() if r.secondary_nf == nf)

    def items(self):
        return sorted(self._rules.items())

    def __contains__(self, flow_id):
        return flow_id in self._rules

    def __len__(self):
        return len(self._rules)


@dataclass(frozen=True)
class Delivery:
    """A packet copy as handed to an NF by the switch."""

    packet: Packet
    as_secondary: bool
    # secondary the switch duplicated this packet to, if any
    secondary: Optional[str]
    forwarded: bool = False


class SimNet:
    """Lossless network with per-class latency, jitter and a reorder penalty.

    ``reorder_prob`` adds ``reorder_penalty_ns`` to a data message so that a
    later send on the same path can overtake it.  Every send is delivered.
    """

    def __init__(self, sched: Scheduler, base_latency_ns: int = 100_000,
                 jitter_ns: int = 0, reorder_prob: float = 0.0,
                 reorder_penalty_ns: int = 500_000, ctrl_latency_ns: int = 250_000,
                 ctrl_jitter_ns: int = 0, seed: int = 0):
        if not 0.0 <= reorder_prob <= 1.0:
            raise ValueError("reorder_prob must be in [0, 1]")
        self.sched = sched
        self.classes: Dict[str, Tuple[int, int]] = {
            DATA: (int(base_latency_ns), int(jitter_ns)),
            CTRL: (int(ctrl_latency_ns), int(ctrl_jitter_ns)),
        }
        self.links: Dict[Tuple[str, str], Tuple[int, int]] = {}
        self.reorder_prob = reorder_prob
        self.reorder_penalty_ns = int(reorder_penalty_ns)
        self.rng = random.Random(seed)
        self.enqueued = 0
        self.consumed = 0

    def set_link(self, src: str, dst: str, base_ns: int, jitter_ns: int = 0) -> None:
        self.links[(src, dst)] = (base_ns, jitter_ns)

    def sample_delivery(self, src: str, dst: str, cls: str = DATA) -> int:
        base, jitter = self.links.get((src, dst), self.classes[cls])
        t = self.sched.now + base
        if jitter:
            t += int(jitter * self.rng.random())
        if cls == DATA and self.reorder_prob and self.rng.random() < self.reorder_prob:
            t += self.reorder_penalty_ns
        return t

    def send(self, src: str, dst: str, handler: Callable[..., Any], *args,
             cls: str = DATA, background: bool = False) -> int:
        when = self.sample_delivery(src, dst, cls)
        self.enqueued += 1
        self.sched.at(when, self._deliver, handler, args, background=background)
        return when

    def _deliver(self, handler, args):
        self.consumed += 1
        handler(*args)


class Switch:
    """Looks up the flow rule and sends one copy to each of primary and secondary."""

    name = "switch"

    def __init__(self, sched: Scheduler, net: SimNet, trace: Trace,
                 endpoints: Dict[str, Any], on_miss: Callable[[int], FlowRule]):
        self.sched = sched
        self.net = net
        self.trace = trace
        self.rules = RuleTable()
        self.endpoints = endpoints
        self.on_miss = on_miss

    def receive(self, packet: Packet, forwarded: bool = False) -> None:
        now = self.sched.now
        self.trace.emit(now, self.name, EventKind.SWITCH_IN, packet.id)
        rule = self.rules.lookup(packet.flow_id)
        if rule is None:
            rule = self.on_miss(packet.flow_id)
        self.switch_forward(rule, packet, forwarded)

    def switch_forward(self, rule: FlowRule, packet: Packet, forwarded: bool = False) -> None:
        now = self.sched.now
        targets = [(rule.primary_nf, False)]
        if rule.secondary_nf is not None:
            targets.append((rule.secondary_nf, True))
        for dst, as_secondary in targets:
            self.trace.emit(now, self.name, EventKind.DUP_OUT, packet.id)
            d = Delivery(packet, as_secondary, rule.secondary_nf, forwarded)
            self.net.send(self.name, dst, self.endpoints[dst].on_packet, d)

    def apply_update(self, flow_id: int, primary: str, secondary: Optional[str],
                     done: Optional[Callable[[int], None]] = None) -> int:
        version = self.rules.update(flow_id, primary, secondary)
        if done is not None:
            done(version)
        return version
