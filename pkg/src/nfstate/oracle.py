"""Sequential reference processor and the trace checker built on it.

:func:`run_oracle` processes the stamped stream one packet at a time, per
flow in counter order, with the same local and global semantics as an NF.
:func:`compare` audits a finished run against that result.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Set, Tuple

from .model import EventKind, Packet, PacketId, Trace, TraceEvent


@dataclass
class OracleResult:
    local: Dict[int, Tuple[int, int]] = field(default_factory=dict)
    global_totals: Dict[int, int] = field(default_factory=dict)
    releases: Dict[int, List[int]] = field(default_factory=dict)
    flagged: Set[PacketId] = field(default_factory=set)

    def to_dict(self) -> dict:
        return {
            "local": {str(f): list(v) for f, v in sorted(self.local.items())},
            "global_totals": {str(k): v for k, v in sorted(self.global_totals.items())},
            "releases": {str(f): v for f, v in sorted(self.releases.items())},
            "flagged": sorted([p.flow_id, p.counter] for p in self.flagged),
        }


def run_oracle(stamped: Iterable[Packet], dropped: Iterable[PacketId] = (),
               global_keys: int = 4) -> OracleResult:
    """Ground truth for a stamped stream minus the packets dropped at input."""
    dropped = set(dropped)
    seen: Set[PacketId] = set()
    per_flow: Dict[int, List[Packet]] = defaultdict(list)
    for p in stamped:
        if p.id in seen:
            raise ValueError(f"duplicate PacketId {p.id} in stamped stream")
        seen.add(p.id)
        if p.id not in dropped:
            per_flow[p.flow_id].append(p)
    res = OracleResult()
    for f in sorted(per_flow):
        pkts = sorted(per_flow[f], key=lambda p: p.counter)
        count = size = 0
        for p in pkts:
            count += 1
            size += p.payload_len
            if p.global_update_flag:
                k = f % global_keys
                res.global_totals[k] = res.global_totals.get(k, 0) + 1
                res.flagged.add(p.id)
        res.local[f] = (count, size)
        res.releases[f] = [p.counter for p in pkts]
    return res


# ----------------------------------------------------------------------
@dataclass
class Finding:
    check: str
    message: str
    event: Optional[TraceEvent] = None

    def to_dict(self) -> dict:
        return {"check": self.check, "message": self.message,
                "event": None if self.event is None else self.event.to_json()}


@dataclass
class Report:
    findings: List[Finding] = field(default_factory=list)
    checked: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.findings

    def checks_failed(self) -> Set[str]:
        return {f.check for f in self.findings}

    def add(self, check: str, message: str, event: Optional[TraceEvent] = None) -> None:
        self.findings.append(Finding(check, message, event))

    def to_dict(self) -> dict:
        return {"pass": self.passed, "checked": self.checked,
                "findings": [f.to_dict() for f in self.findings]}


def _is_nf(actor: str) -> bool:
    return actor not in ("switch", "controller", "consensus") and not actor.startswith("stamper")


def effective_drops(trace: Trace) -> Tuple[Set[PacketId], List[Finding]]:
    """Input drops that stayed dropped.

    A primary may drop a packet that its secondary still holds.  If the
    primary then crashes, the promoted secondary replays and releases it.
    Such a revived drop is legitimate only if the dropping NF failed later.
    """
    dropped: Dict[PacketId, TraceEvent] = {}
    released: Set[PacketId] = set()
    failures: Dict[str, int] = {}
    for e in trace:
        if e.kind is EventKind.DROPPED and e.packet is not None and _is_nf(e.actor):
            dropped.setdefault(e.packet, e)
        elif e.kind is EventKind.RELEASED:
            released.add(e.packet)
        elif e.kind is EventKind.FAILURE:
            failures.setdefault(e.actor, e.time)
    problems = []
    for pid, e in dropped.items():
        if pid in released:
            t = failures.get(e.actor)
            if t is None or t < e.time:
                problems.append(Finding("drop-accounting",
                                        f"packet {pid} was dropped and later released", e))
    return {pid for pid in dropped if pid not in released}, problems


def compare(trace: Trace, oracle: OracleResult, final: dict) -> Report:
    """Audit a quiescent run.

    ``final`` is the run's end-state record: ``rules`` (flow -> primary),
    ``nfs`` (name -> snapshot), ``log`` (global log entries as
    ``[key, delta, flow, counter, origin]``), ``pairs`` (history of
    ``[time, primary, secondary]``) and optional ``violations``.
    """
    rep = Report()
    _check_releases(trace, oracle, rep)
    _check_processing(trace, rep)
    _check_states(oracle, final, rep)
    _check_global(trace, oracle, final, rep)
    _check_clock_lag(trace, final, rep)
    _check_release_gate(trace, final, rep)
    return rep


def _check_releases(trace: Trace, oracle: OracleResult, rep: Report) -> None:
    rep.checked += ["release-set", "release-order"]
    expected = {PacketId(f, c) for f, cs in oracle.releases.items() for c in cs}
    stamped_at: Dict[PacketId, TraceEvent] = {}
    released: Dict[PacketId, TraceEvent] = {}
    last: Dict[int, int] = {}
    for e in trace:
        if e.kind is EventKind.STAMPED:
            stamped_at.setdefault(e.packet, e)
        elif e.kind is EventKind.RELEASED:
            pid = e.packet
            if pid in released:
                rep.add("release-set", f"duplicate release of {pid}", e)
                continue
            released[pid] = e
            if pid not in expected:
                rep.add("release-set", f"released {pid} which the reference drops or never saw", e)
            if pid.counter <= last.get(pid.flow_id, 0):
                rep.add("release-order", f"{pid} released after counter {last[pid.flow_id]}", e)
            last[pid.flow_id] = max(last.get(pid.flow_id, 0), pid.counter)
    for pid in sorted(expected - released.keys()):
        rep.add("release-set", f"packet {pid} never released", stamped_at.get(pid))


def _check_processing(trace: Trace, rep: Report) -> None:
    rep.checked.append("processing-order")
    drops, problems = effective_drops(trace)
    rep.findings.extend(problems)
    last: Dict[Tuple[str, int], int] = {}
    holder: Dict[int, str] = {}
    for e in trace:
        if e.kind is EventKind.DROPPED and e.packet is not None:
            # an NF steps over what it dropped itself, even if a peer revives it
            drops.add(e.packet)
        if e.kind is not EventKind.PROCESSED:
            continue
        pid = e.packet
        key = (e.actor, pid.flow_id)
        if holder.get(pid.flow_id) != e.actor:
            # the flow came (back) from another NF: a new lineage starts here
            last.pop(key, None)
            holder[pid.flow_id] = e.actor
        prev = last.get(key)
        if prev is not None:
            exp = prev + 1
            while PacketId(pid.flow_id, exp) in drops and exp < pid.counter:
                exp += 1
            if pid.counter != exp:
                rep.add("processing-order",
                        f"{e.actor} processed {pid} after counter {prev}", e)
        last[key] = pid.counter


def _check_states(oracle: OracleResult, final: dict, rep: Report) -> None:
    rep.checked.append("local-state")
    nfs = final.get("nfs", {})
    rules = {int(f): p for f, p in final.get("rules", {}).items()}
    for f in sorted(set(oracle.local) | set(rules)):
        want = tuple(oracle.local.get(f, (0, 0)))
        owner = rules.get(f)
        if owner is None:
            if want != (0, 0):
                rep.add("local-state", f"flow {f} has no owner")
            continue
        got = tuple(nfs.get(owner, {}).get("local", {}).get(str(f), (0, 0)))
        if got != want:
            rep.add("local-state", f"flow {f} at {owner}: state {got}, expected {want}")


def _check_global(trace: Trace, oracle: OracleResult, final: dict, rep: Report) -> None:
    rep.checked += ["global-log", "global-state", "origin-order"]
    log = [tuple(x) for x in final.get("log", [])]
    commit_events: Dict[PacketId, List[TraceEvent]] = defaultdict(list)
    for e in trace:
        if e.kind is EventKind.GLOBAL_COMMIT_DONE:
            commit_events[e.packet].append(e)
    seen: Set[PacketId] = set()
    for idx, (_, _, f, c, origin) in enumerate(log):
        pid = PacketId(f, c)
        if pid in seen:
            evs = commit_events.get(pid, [])
            rep.add("global-log", f"duplicate global update for {pid} at log index {idx}",
                    evs[-1] if evs else None)
        seen.add(pid)
        if pid not in oracle.flagged:
            rep.add("global-log", f"log entry {idx} from {pid} has no flagged origin")
    for pid in sorted(oracle.flagged - seen):
        rep.add("global-log", f"flagged packet {pid} never committed a global update")
    totals: Dict[int, int] = {}
    for k, d, *_ in log:
        totals[k] = totals.get(k, 0) + d
    for name, snap in sorted(final.get("nfs", {}).items()):
        if not snap.get("alive", True) or "applied" not in snap:
            continue
        base = snap.get("applied_base", 0)
        applied = [tuple(x) for x in snap["applied"]]
        if applied != log[base:base + len(applied)]:
            rep.add("global-log", f"{name} applied a sequence that is not a prefix of the log")
        if base + len(applied) != len(log):
            rep.add("global-log", f"{name} applied {base + len(applied)} of {len(log)} entries")
        gm = {int(k): v for k, v in snap.get("global_map", {}).items() if v}
        want = {k: v for k, v in oracle.global_totals.items() if v}
        if gm != want:
            rep.add("global-state", f"{name} global map {gm} != reference {want}")
    # per origin, log order must follow that NF's processing order
    processed_at: Dict[str, List[PacketId]] = defaultdict(list)
    for e in trace:
        if e.kind is EventKind.GLOBAL_COMMIT_START:
            processed_at[e.actor].append(e.packet)
    by_origin: Dict[str, List[PacketId]] = defaultdict(list)
    for _, _, f, c, origin in log:
        by_origin[origin].append(PacketId(f, c))
    for origin, seq in by_origin.items():
        in_log = set(seq)
        local_order = [p for p in processed_at.get(origin, []) if p in in_log]
        if local_order != seq:
            rep.add("origin-order", f"log order of updates from {origin} differs from its "
                    "processing order")


def _check_clock_lag(trace: Trace, final: dict, rep: Report) -> None:
    rep.checked.append("clock-lag")
    i: Dict[str, int] = {}
    j: Dict[str, int] = {}
    pending_baseline: Set[str] = set()
    for e in trace:
        if e.kind is EventKind.PACKET_CLOCK_COMMIT:
            # a baseline emits both clocks back to back; audit once both are set
            if e.actor not in i:
                pending_baseline.add(e.actor)
            i[e.actor] = e.batch
        elif e.kind is EventKind.STATE_CLOCK_COMMIT:
            j[e.actor] = e.batch
            pending_baseline.discard(e.actor)
        else:
            continue
        a = e.actor
        if a in pending_baseline or a not in j:
            continue
        if not j[a] <= i[a] <= j[a] + 1:
            rep.add("clock-lag", f"{a} at i={i[a]} j={j[a]}", e)
    for t, actor, msg in final.get("violations", []):
        check = "clock-lag" if msg.startswith("clock lag") else "placement"
        rep.add(check, f"{actor} at {t}: {msg}")


def _check_release_gate(trace: Trace, final: dict, rep: Report) -> None:
    """Every released batch was first committed as a packet clock at a secondary."""
    rep.checked.append("release-gate")
    history: Dict[str, List[Tuple[int, Optional[str]]]] = defaultdict(list)
    for t, p, s in final.get("pairs", []):
        history[p].append((t, s))
    committed: Dict[Tuple[str, int], int] = {}
    seen_batches: Set[Tuple[str, int]] = set()
    for e in trace:
        if e.kind is EventKind.PACKET_CLOCK_COMMIT:
            committed.setdefault((e.actor, e.batch), e.time)
        elif e.kind is EventKind.RELEASED:
            key = (e.actor, e.batch)
            if key in seen_batches:
                continue
            partners = [s for t, s in history.get(e.actor, []) if t <= e.time]
            if partners and partners[-1] is None:
                seen_batches.add(key)
                continue
            if not any((s, e.batch) in committed for s in partners if s is not None):
                rep.add("release-gate",
                        f"{e.actor} released batch {e.batch} before its packet clock committed", e)
            seen_batches.add(key)
