"""Stamper manager and stamping units.

Each unit hands out flow IDs from its own ``[k * 2**48, (k + 1) * 2**48)``
range, so IDs never collide across units or across a unit's restarts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple, Union

from .model import EventKind, FlowKey, Packet, PacketId, Trace, flow_hash

ID_SPAN = 1 << 48


class Dropped:
    """Returned by :meth:`StamperManager.stamp` when a packet cannot be stamped."""

    __slots__ = ("reason",)

    def __init__(self, reason: str):
        self.reason = reason

    def __repr__(self):
        return f"Dropped({self.reason!r})"

    def __bool__(self):
        return False


@dataclass
class StampingUnit:
    unit_index: int
    flow_table: Dict[FlowKey, Tuple[int, int]] = field(default_factory=dict)
    incarnation: int = 0
    alive: bool = True
    high_water: int = 0

    @property
    def id_range(self) -> Tuple[int, int]:
        return self.unit_index * ID_SPAN, (self.unit_index + 1) * ID_SPAN

    def assign(self, key: FlowKey) -> PacketId:
        entry = self.flow_table.get(key)
        if entry is None:
            lo, hi = self.id_range
            flow_id = lo + self.high_water
            if flow_id >= hi:
                raise OverflowError(f"unit {self.unit_index} exhausted its flow ID range")
            self.high_water += 1
            entry = (flow_id, 1)
        flow_id, nxt = entry
        self.flow_table[key] = (flow_id, nxt + 1)
        return PacketId(flow_id, nxt)


class StamperManager:
    name = "stamper"

    def __init__(self, unit_count: int = 1, trace: Optional[Trace] = None,
                 work_cost: int = 1):
        if unit_count < 1:
            raise ValueError("unit_count must be >= 1")
        self.unit_count = unit_count
        self.units: List[StampingUnit] = [StampingUnit(i) for i in range(unit_count)]
        self.alive = True
        self.trace = trace if trace is not None else Trace()
        self.work_cost = work_cost
        self.dropped = 0

    def unit_for(self, key: FlowKey) -> int:
        return flow_hash(key, self.unit_count)

    def stamp(self, key: FlowKey, payload_len: int, arrival_time: int,
              global_update: bool = False) -> Union[Packet, Dropped]:
        if not self.alive:
            return self._drop(arrival_time, "manager down")
        unit = self.units[self.unit_for(key)]
        if not unit.alive:
            return self._drop(arrival_time, f"unit {unit.unit_index} down")
        pid = unit.assign(key)
        self.trace.emit(arrival_time, self._actor(unit), EventKind.STAMPED, pid)
        return Packet(pid, key, payload_len, arrival_time, self.work_cost, global_update)

    def _actor(self, unit: StampingUnit) -> str:
        return f"stamper/{unit.unit_index}"

    def _drop(self, t: int, reason: str) -> Dropped:
        # no PacketId exists for an unstamped packet
        self.dropped += 1
        self.trace.emit(t, self.name, EventKind.DROPPED)
        return Dropped(reason)

    def fail_unit(self, unit_index: int) -> None:
        self.units[unit_index].alive = False

    def recover_unit(self, unit_index: int) -> None:
        unit = self.units[unit_index]
        unit.alive = True
        unit.incarnation += 1
        unit.flow_table.clear()

    def fail_manager(self) -> None:
        self.alive = False

    def recover_manager(self) -> None:
        self.alive = True
