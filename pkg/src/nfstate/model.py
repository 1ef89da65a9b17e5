"""Shared value types, identifiers and the trace vocabulary."""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, List, Optional

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
HASH_SEED = 0x9E3779B97F4A7C15


@dataclass(frozen=True)
class FlowKey:
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: int

    def __post_init__(self):
        for name, bits in (("src_ip", 32), ("dst_ip", 32), ("src_port", 16),
                           ("dst_port", 16), ("protocol", 8)):
            value = getattr(self, name)
            if not 0 <= value < (1 << bits):
                raise ValueError(f"{name}={value} does not fit in {bits} bits")

    def pack(self) -> bytes:
        return struct.pack(">IIHHB", self.src_ip, self.dst_ip, self.src_port,
                           self.dst_port, self.protocol)


@dataclass(frozen=True, order=True)
class PacketId:
    flow_id: int
    counter: int

    def __post_init__(self):
        if self.counter < 1:
            raise ValueError("packet counters start at 1")

    def __str__(self):
        return f"({self.flow_id},{self.counter})"


@dataclass(frozen=True)
class Packet:
    id: PacketId
    key: FlowKey
    payload_len: int
    stamp_time: int
    work_cost: int = 1
    global_update_flag: bool = False

    def __post_init__(self):
        if self.payload_len <= 0:
            raise ValueError("payload_len must be positive")

    @property
    def flow_id(self) -> int:
        return self.id.flow_id

    @property
    def counter(self) -> int:
        return self.id.counter


def _mix64(x: int) -> int:
    # splitmix64 finalizer
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 & MASK64
    x = (x ^ (x >> 27)) * 0x94D049BB133111EB & MASK64
    return x ^ (x >> 31)


def flow_hash(key: FlowKey, unit_count: int, seed: int = HASH_SEED) -> int:
    """Map a flow to one of ``unit_count`` units; stable across runs and processes."""
    if unit_count < 1:
        raise ValueError("unit_count must be >= 1")
    h = FNV_OFFSET ^ (seed & MASK64)
    for b in key.pack():
        h = ((h ^ b) * FNV_PRIME) & MASK64
    return _mix64(h) % unit_count


class EventKind(str, enum.Enum):
    STAMPED = "Stamped"
    SWITCH_IN = "SwitchIn"
    DUP_OUT = "DupOut"
    NF_IN = "NfIn"
    BUFFERED = "Buffered"
    PROCESSED = "Processed"
    GLOBAL_COMMIT_START = "GlobalCommitStart"
    GLOBAL_COMMIT_DONE = "GlobalCommitDone"
    PACKET_CLOCK_COMMIT = "PacketClockCommit"
    STATE_CLOCK_COMMIT = "StateClockCommit"
    RELEASED = "Released"
    DROPPED = "Dropped"
    MIGRATION_START = "MigrationStart"
    MIGRATION_DONE = "MigrationDone"
    FAILURE = "Failure"
    PROMOTION = "Promotion"
    # stale or duplicate delivery thrown away by an NF; never counted as a drop
    DISCARDED = "Discarded"


@dataclass(frozen=True)
class TraceEvent:
    time: int
    actor: str
    kind: EventKind
    packet: Optional[PacketId] = None
    batch: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps({
            "time_ns": self.time,
            "actor": self.actor,
            "kind": self.kind.value,
            "flow_id": None if self.packet is None else self.packet.flow_id,
            "counter": None if self.packet is None else self.packet.counter,
            "batch": self.batch,
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TraceEvent":
        d = json.loads(line)
        pid = None
        if d["flow_id"] is not None:
            pid = PacketId(d["flow_id"], d["counter"])
        return cls(d["time_ns"], d["actor"], EventKind(d["kind"]), pid, d["batch"])


@dataclass
class Trace:
    """Append-only event log shared by every actor of one run."""

    events: List[TraceEvent] = field(default_factory=list)

    def emit(self, time: int, actor: str, kind: EventKind,
             packet: Optional[PacketId] = None, batch: Optional[int] = None) -> None:
        self.events.append(TraceEvent(time, actor, kind, packet, batch))

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self):
        return len(self.events)

    def of_kind(self, *kinds: EventKind) -> List[TraceEvent]:
        return [e for e in self.events if e.kind in kinds]

    def dump(self, fp: IO[str]) -> None:
        for e in self.events:
            fp.write(e.to_json())
            fp.write("\n")

    def dumps(self) -> str:
        return "".join(e.to_json() + "\n" for e in self.events)

    @classmethod
    def load(cls, lines: Iterable[str]) -> "Trace":
        return cls([TraceEvent.from_json(l) for l in lines if l.strip()])
