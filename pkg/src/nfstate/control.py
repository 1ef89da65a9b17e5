"""Simulated SDN controller: failure detection, role assignment, scaling.

The controller only decides and sends messages.  State transfer itself is
peer-to-peer between NF instances (see :mod:`nfstate.nf`).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from .fabric import CTRL, FlowRule
from .nf import Role

log = logging.getLogger(__name__)


@dataclass
class Placement:
    nodes: List[str]
    nf_to_node: Dict[str, str]
    pairs: Dict[str, Optional[str]] = field(default_factory=dict)

    def violations(self) -> List[str]:
        bad = []
        for p, s in self.pairs.items():
            if s is not None and self.nf_to_node[p] == self.nf_to_node[s]:
                bad.append(f"{p} and its secondary {s} share node {self.nf_to_node[p]}")
        return bad


@dataclass
class FduState:
    ping_interval: int = 10_000_000
    suspect_threshold: int = 3
    last_seen: Dict[str, int] = field(default_factory=dict)

    def suspects(self, now: int) -> List[str]:
        limit = self.suspect_threshold * self.ping_interval
        return sorted(nf for nf, t in self.last_seen.items() if now - t > limit)


@dataclass
class _Migration:
    flow_id: int
    src: str
    dst: str
    flipped: bool = False


class OverloadPolicy:
    """Fire a scale event when an NF's input buffer stays above a fill ratio.

    Disabled unless attached to a controller; experiments drive scaling
    explicitly by default.
    """

    def __init__(self, threshold: float = 0.8, consecutive: int = 3):
        self.threshold = threshold
        self.consecutive = consecutive
        self.streak: Dict[str, int] = {}

    def observe(self, nf_name: str, occupancy: int, capacity: int) -> bool:
        if occupancy > self.threshold * capacity:
            self.streak[nf_name] = self.streak.get(nf_name, 0) + 1
        else:
            self.streak[nf_name] = 0
        if self.streak[nf_name] >= self.consecutive:
            self.streak[nf_name] = 0
            return True
        return False


class Controller:
    name = "controller"

    def __init__(self, ctx, placement: Placement, primaries: List[str], spares: List[str],
                 ping_interval_ns: int = 10_000_000, suspect_threshold: int = 3):
        self.ctx = ctx
        self.placement = placement
        self.primaries = list(primaries)
        self.spares = list(spares)
        self.fdu = FduState(ping_interval_ns, suspect_threshold)
        self.owner: Dict[int, Tuple[str, Optional[str]]] = {}
        self.declared: Set[str] = set()
        self.handled: Set[str] = set()
        self.migrations: Dict[int, _Migration] = {}
        self._scale_queue: List[Tuple[str, int, str]] = []
        self._ops = 0
        self._rr = 0
        self.overload: Optional[OverloadPolicy] = None
        self.scale_events: List[Tuple[int, str, int, str]] = []
        self.pair_history: List[Tuple[int, str, Optional[str]]] = [
            (0, p, s) for p, s in sorted(placement.pairs.items())]
        self.degraded: Set[str] = set()

    # ------------------------------------------------------------------
    @property
    def settled(self) -> bool:
        return self._ops == 0 and not self._scale_queue and not self.migrations

    def start(self) -> None:
        now = self.ctx.sched.now
        for nf in self._monitored():
            self.fdu.last_seen[nf] = now
        self.ctx.sched.after(self.fdu.ping_interval, self._tick, background=True)

    def _monitored(self) -> List[str]:
        out = []
        for p, s in self.placement.pairs.items():
            out.append(p)
            if s is not None:
                out.append(s)
        return sorted(n for n in out if n not in self.declared)

    def _tick(self) -> None:
        self.fdu_tick()
        self.ctx.sched.after(self.fdu.ping_interval, self._tick, background=True)

    def fdu_tick(self) -> List[str]:
        now = self.ctx.sched.now
        failed = [nf for nf in self.fdu.suspects(now) if nf not in self.declared]
        for nf in failed:
            self.declared.add(nf)
            del self.fdu.last_seen[nf]
        # primaries first: a promotion may need the same spare pool
        for nf in sorted(failed, key=lambda n: (n not in self.placement.pairs, n)):
            self._on_failure(nf)
        for nf in self._monitored():
            target = self.ctx.nfs[nf]
            self.ctx.net.send(self.name, nf, target.on_ping, self.on_pong, cls=CTRL,
                              background=True)
        return failed

    def on_pong(self, nf: str, sent_at: int) -> None:
        if nf in self.fdu.last_seen:
            self.fdu.last_seen[nf] = max(self.fdu.last_seen[nf], sent_at)

    def watch(self, nf: str) -> None:
        self.fdu.last_seen[nf] = self.ctx.sched.now

    # ------------------------------------------------------------------
    def install_default(self, flow_id: int) -> FlowRule:
        """Rule-miss path: pick the next live primary round-robin."""
        live = [p for p in self.primaries if p in self.placement.pairs]
        if not live:
            raise RuntimeError("no primary NF available")
        p = live[self._rr % len(live)]
        self._rr += 1
        s = self.placement.pairs[p]
        self.owner[flow_id] = (p, s)
        self.ctx.switch.rules.install(flow_id, p, s)
        return self.ctx.switch.rules.lookup(flow_id)

    def _send_rules(self, updates: List[Tuple[int, str, Optional[str]]], then=None) -> None:
        if not updates:
            if then is not None:
                then()
            return
        self._ops += 1
        remaining = [len(updates)]

        def acked(_version):
            remaining[0] -= 1
            if remaining[0] == 0:
                self._ops -= 1
                if then is not None:
                    then()

        sw = self.ctx.switch
        for f, p, s in updates:
            self.ctx.net.send(self.name, sw.name, sw.apply_update, f, p, s,
                              lambda v: self.ctx.net.send(sw.name, self.name, acked, v, cls=CTRL),
                              cls=CTRL)

    def _call(self, nf: str, fn, *args) -> None:
        self.ctx.net.send(self.name, nf, fn, *args, cls=CTRL)

    def _pick_spare(self, avoid_node: str) -> Optional[str]:
        for s in self.spares:
            nf = self.ctx.nfs[s]
            if nf.alive and nf.role is Role.SPARE and self.placement.nf_to_node[s] != avoid_node:
                self.spares.remove(s)
                return s
        return None

    def _record_pair(self, p: str, s: Optional[str]) -> None:
        self.placement.pairs[p] = s
        self.pair_history.append((self.ctx.sched.now, p, s))
        for v in self.placement.violations():
            self.ctx.violations.append((self.ctx.sched.now, self.name, v))

    # ------------------------------------------------------------------
    def _on_failure(self, nf: str) -> None:
        self.handled.add(nf)
        if nf in self.placement.pairs:
            self.orchestrate_failover(nf)
            return
        for p, s in list(self.placement.pairs.items()):
            if s == nf:
                self._replace_secondary(p, nf)
                return

    def orchestrate_failover(self, failed: str) -> None:
        b = self.placement.pairs.pop(failed)
        self.pair_history.append((self.ctx.sched.now, failed, None))
        if failed in self.primaries:
            self.primaries[self.primaries.index(failed)] = b or failed
        self._abort_migrations(failed)
        if b is None or not self._alive_undeclared(b):
            self.ctx.violations.append(
                (self.ctx.sched.now, self.name,
                 f"primary {failed} and its secondary {b} failed together"))
            return
        c = self._pick_spare(self.placement.nf_to_node[b])
        if c is None:
            self.degraded.add(b)
        owned = {f for f, (p, _) in self.owner.items() if p == failed}
        self._ops += 1
        self._record_pair(b, c)
        if c is not None:
            self.watch(c)
        log.debug("failover %s -> %s (new secondary %s, %d flows)", failed, b, c, len(owned))
        target = self.ctx.nfs[b]

        def done(name):
            self.ctx.net.send(b, self.name, self._promoted, b, c, owned, cls=CTRL)

        self._call(b, target.promote_secondary, owned, c, done)

    def _promoted(self, b: str, c: Optional[str], owned: Set[int]) -> None:
        self._ops -= 1
        for f in owned:
            self.owner[f] = (b, c)
        self._send_rules([(f, b, c) for f in sorted(owned)])

    def _alive_undeclared(self, nf: str) -> bool:
        return nf not in self.declared

    def _replace_secondary(self, primary: str, failed: str) -> None:
        c = self._pick_spare(self.placement.nf_to_node[primary])
        flows = sorted(f for f, (p, _) in self.owner.items() if p == primary)
        self._record_pair(primary, c)
        target = self.ctx.nfs[primary]
        if c is None:
            self.degraded.add(primary)
            self._call(primary, target.drop_secondary)
            for f in flows:
                self.owner[f] = (primary, None)
            self._send_rules([(f, primary, None) for f in flows])
            return
        self.watch(c)
        self._ops += 1

        def done():
            self.ctx.net.send(primary, self.name, self._resynced, primary, c, cls=CTRL)

        self._call(primary, target.resync_new_secondary, c, done)

    def _resynced(self, primary: str, c: str) -> None:
        self._ops -= 1
        flows = sorted(f for f, (p, _) in self.owner.items() if p == primary)
        for f in flows:
            self.owner[f] = (primary, c)
        self._send_rules([(f, primary, c) for f in flows])

    # ------------------------------------------------------------------
    def orchestrate_scale(self, src: str, flows, dst: str) -> None:
        if src == dst:
            raise ValueError("scale target must differ from the overloaded NF")
        for f in flows:
            self._scale_queue.append((src, f, dst))
        if len(self._scale_queue) == len(list(flows)) and not self.migrations:
            self._next_migration()

    def _next_migration(self) -> None:
        while self._scale_queue and not self.migrations:
            src, f, dst = self._scale_queue.pop(0)
            if self.owner.get(f, (None,))[0] != src or src in self.declared \
                    or dst in self.declared or dst not in self.placement.pairs:
                continue
            self.scale_events.append((self.ctx.sched.now, src, f, dst))
            self.migrations[f] = _Migration(f, src, dst)
            nf = self.ctx.nfs[src]

            def transferred(flow, src=src):
                self.ctx.net.send(src, self.name, self._mig_transferred, flow, cls=CTRL)

            self._call(src, nf.migrate_flow_out, f, dst, transferred)

    def _mig_transferred(self, f: int) -> None:
        m = self.migrations.get(f)
        if m is None:
            return
        sec = self.placement.pairs.get(m.dst)
        self.owner[f] = (m.dst, sec)

        def flipped():
            m.flipped = True
            self._call(m.src, self.ctx.nfs[m.src].migration_rule_flipped, f)
            self.migrations.pop(f, None)
            self._next_migration()

        self._send_rules([(f, m.dst, sec)], then=flipped)

    def _abort_migrations(self, failed: str) -> None:
        for f, m in list(self.migrations.items()):
            if m.flipped:
                continue
            if m.src == failed:
                self._call(m.dst, self.ctx.nfs[m.dst].drop_imported_flow, f)
                self.owner[f] = (m.src, self.owner.get(f, (m.src, None))[1])
                del self.migrations[f]
            elif m.dst == failed:
                self._call(m.src, self.ctx.nfs[m.src].abort_migration_out, f)
                del self.migrations[f]
        self._next_migration()

    def observe_batch(self, nf) -> None:
        """Feed the optional overload policy after each released batch."""
        if self.overload is None:
            return
        if self.overload.observe(nf.name, len(nf.input), nf.capacity):
            targets = [p for p in sorted(self.placement.pairs) if p != nf.name
                       and self.placement.pairs[p] is not None]
            flows = [f for f, (p, _) in sorted(self.owner.items()) if p == nf.name]
            if targets and len(flows) > 1 and not self.migrations:
                self.orchestrate_scale(nf.name, flows[:1], targets[0])
