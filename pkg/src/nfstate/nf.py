"""NF instance: ordered processing, batch replication and role changes.

One :class:`NFInstance` plays primary, secondary or spare.  As primary it
pops packets from its input buffer, processes each flow strictly in stamp
order, and releases a full output buffer only after the secondary has
committed the batch's packet clock.  The state clock for the same batch
follows without halting processing.  As secondary it holds every duplicated
packet until a state clock covers it, and can take over from the last
packet/state clock pair when its primary fails.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Deque, Dict, List, Optional, Set, Tuple

from .consensus import GlobalUpdate
from .fabric import CTRL, DATA, Delivery
from .model import EventKind, Packet, PacketId
from .sim import backoff

Accepted = "Accepted"
DroppedResult = "Dropped"


class Role(str, Enum):
    PRIMARY = "primary"
    SECONDARY = "secondary"
    SPARE = "spare"
    DEAD = "dead"


class Step(str, Enum):
    PROCESSED_ONE = "ProcessedOne"
    STALLED_ON_OUTPUT = "StalledOnOutput"
    STALLED_ON_ORDER = "StalledOnOrder"
    IDLE = "Idle"
    HALTED = "Halted"


@dataclass(frozen=True)
class PacketClock:
    batch_id: int
    next_expected: Dict[int, int]
    # input-dropped packets the primary stepped over while filling this batch
    skipped: Tuple[PacketId, ...] = ()


@dataclass(frozen=True)
class StateClock:
    batch_id: int
    next_expected: Dict[int, int]
    local_deltas: Dict[int, Tuple[int, int]]
    skipped: Tuple[PacketId, ...] = ()
    # flows whose state this primary handed off since the previous batch
    removed: Tuple[int, ...] = ()


@dataclass(frozen=True)
class Baseline:
    """Full hand-over to a fresh secondary, cut at the last released batch."""

    batch_id: int
    next_expected: Dict[int, int]
    local: Dict[int, Tuple[int, int]]
    release_floor: Dict[int, int]
    held: Tuple[Tuple[Packet, int], ...]
    holes: Tuple[PacketId, ...]


@dataclass(frozen=True)
class FlowImport:
    flow_id: int
    state: Tuple[int, int]
    next_expected: int
    holes: Tuple[int, ...]


@dataclass
class Capture:
    """Everything a batch contributes to its packet and state clocks."""

    batch_id: int
    next_expected: Dict[int, int]
    deltas: Dict[int, Tuple[int, int]]
    skipped: Tuple[PacketId, ...]
    removed: Tuple[int, ...]
    outputs: List[tuple] = field(default_factory=list)

    def packet_clock(self) -> PacketClock:
        return PacketClock(self.batch_id, self.next_expected, self.skipped)

    def state_clock(self) -> StateClock:
        return StateClock(self.batch_id, self.next_expected, self.deltas, self.skipped,
                          self.removed)


@dataclass
class MigrationOut:
    flow_id: int
    dst: str
    side: List[Tuple[Packet, int]] = field(default_factory=list)
    phase: int = 1
    txn: Optional["Txn"] = None
    transferred: Optional[Callable[[int], None]] = None


class Txn:
    """Two-phase commit with a single participant.

    prepare -> vote -> commit -> ack.  Each phase is re-sent on an
    exponential back-off timer until answered or cancelled.
    """

    def __init__(self, nf: "NFInstance", peer: str, kind: str, payload,
                 on_done: Callable[[], None]):
        self.nf = nf
        self.peer = peer
        self.kind = kind
        self.payload = payload
        self.on_done = on_done
        nf._txid += 1
        self.txid = nf._txid
        self.phase = "prepare"
        self.attempt = 0
        self.retries = 0
        self.active = True

    def start(self) -> None:
        self.nf.txns[self.txid] = self
        self._send()

    def cancel(self) -> None:
        self.active = False
        self.nf.txns.pop(self.txid, None)

    def _send(self):
        nf = self.nf
        peer = nf.ctx.nfs[self.peer]
        if self.phase == "prepare":
            nf.ctx.net.send(nf.name, self.peer, peer.on_prepare, nf.name, self.txid, self.kind,
                            self.payload, cls=CTRL)
        else:
            nf.ctx.net.send(nf.name, self.peer, peer.on_commit, nf.name, self.txid, cls=CTRL)
        nf.ctx.sched.after(backoff(self.attempt), self._timeout, self.phase, self.attempt)

    def _timeout(self, phase, attempt):
        if self.active and self.nf.alive and self.phase == phase and self.attempt == attempt:
            self.attempt += 1
            self.retries += 1
            self._send()

    def voted(self):
        if not self.active or self.phase != "prepare":
            return
        self.phase = "commit"
        self.attempt = 0
        self.nf._hook(f"{self.kind}_voted")
        if self.active and self.nf.alive:
            self._send()

    def acked(self):
        if not self.active or self.phase != "commit":
            return
        self.cancel()
        self.on_done()


class NFInstance:
    def __init__(self, name: str, node: str, ctx, batch_size: int = 50,
                 buffer_batches: int = 5, work_cost_ns: int = 50_000,
                 global_keys: int = 4, role: Role = Role.SPARE):
        if batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if buffer_batches < 1:
            raise ValueError("buffer_batches must be >= 1")
        self.name = name
        self.node = node
        self.ctx = ctx
        self.batch_size = batch_size
        self.capacity = batch_size * buffer_batches
        self.work_cost_ns = work_cost_ns
        self.global_keys = global_keys
        self.role = role
        self.alive = True
        self.member = None
        self._txid = 0
        self.txns: Dict[int, Txn] = {}
        self._reset_primary()
        self._reset_secondary()
        self.unavailable_until = -1
        # participant-side 2PC bookkeeping
        self._prepared: Dict[Tuple[str, int], tuple] = {}
        self._voted: Set[Tuple[str, int]] = set()
        self._committed: Set[Tuple[str, int]] = set()
        self._relaying: Set[Tuple[str, int]] = set()

    # ------------------------------------------------------------------
    # state
    def _reset_primary(self):
        self.input: Deque[Packet] = deque()
        self._in_input: Set[PacketId] = set()
        self.arrived: Dict[PacketId, int] = {}
        self.drop_count = 0
        self.pending: Dict[int, List[int]] = {}
        self.pending_pkts: Dict[int, Dict[int, Packet]] = {}
        self.ready: Deque[int] = deque()
        self.next_expected: Dict[int, int] = {}
        self.holes: Dict[int, Set[int]] = {}
        self.output: List[tuple] = []
        self.local: Dict[int, List[int]] = {}
        self.touched: Set[int] = set()
        self.batch_skipped: List[PacketId] = []
        self.removed: Set[int] = set()
        self.batch_id = 0
        self.released_ne: Dict[int, int] = {}
        self.released_state: Dict[int, Tuple[int, int]] = {}
        self.release_floor: Dict[int, int] = {}
        self.secondary: Optional[str] = None
        self.degraded = False
        self.busy = False
        self.current: Optional[Packet] = None
        self.halts: Set[str] = set()
        self.pc_txn: Optional[Txn] = None
        self.sc_txn: Optional[Txn] = None
        self.inflight_capture: Optional[Capture] = None
        self.waiting_capture: Optional[Capture] = None
        self._idle_waiters: List[Callable[[], None]] = []
        self.migrating: Dict[int, MigrationOut] = {}
        self.migrated_out: Set[int] = set()
        self._relay_queue: List[Packet] = []
        self._resync_target: Optional[str] = None
        self.processed_count = 0
        self.released_count = 0
        self.global_commits = 0
        self.batches_committed = 0

    def _reset_secondary(self):
        self.primary: Optional[str] = None
        self.held: Dict[int, Dict[int, Tuple[Packet, int]]] = {}
        self.pc: Optional[PacketClock] = None
        self.sc: Optional[StateClock] = None
        self.pc_ne: Dict[int, int] = {}
        self.sc_ne: Dict[int, int] = {}
        self.mirror: Dict[int, Tuple[int, int]] = {}
        self.sec_floor: Dict[int, int] = {}
        self.known_holes: Dict[int, Set[int]] = {}
        self.ignored_flows: Set[int] = set()
        # highest batch whose state-clock prepare arrived; the primary sends it
        # in the same step as the release, so it proves that batch went out
        self.sc_seen = 0

    @property
    def i(self) -> Optional[int]:
        return None if self.pc is None else self.pc.batch_id

    @property
    def j(self) -> Optional[int]:
        return None if self.sc is None else self.sc.batch_id

    def _emit(self, kind: EventKind, pid: Optional[PacketId] = None, batch: Optional[int] = None):
        self.ctx.trace.emit(self.ctx.sched.now, self.name, kind, pid, batch)

    def _hook(self, point: str) -> None:
        hook = getattr(self.ctx, "hook", None)
        if hook is not None:
            hook(point, self)

    def _mut(self, name: str) -> bool:
        return name in self.ctx.mutations

    def _unavailable(self) -> bool:
        return self.ctx.sched.now < self.unavailable_until

    # ------------------------------------------------------------------
    # lifecycle
    def crash(self) -> None:
        if not self.alive:
            return
        self.alive = False
        self.role = Role.DEAD
        for t in list(self.txns.values()):
            t.cancel()
        self._emit(EventKind.FAILURE)
        self.ctx.consensus.deactivate(self.name)

    def pause(self, until_ns: int) -> None:
        """Stop answering control messages until ``until_ns`` (data still flows)."""
        self.unavailable_until = until_ns

    def on_ping(self, reply: Callable[[str, int], None]) -> None:
        if self.alive:
            self.ctx.net.send(self.name, "controller", reply, self.name, self.ctx.sched.now,
                              cls=CTRL, background=True)

    def start_primary(self, secondary: Optional[str]) -> None:
        self.role = Role.PRIMARY
        self.secondary = secondary
        self.degraded = secondary is None

    def start_secondary(self, primary: str) -> None:
        self.role = Role.SECONDARY
        self.primary = primary
        self.pc = PacketClock(0, {})
        self.sc = StateClock(0, {}, {})

    # ------------------------------------------------------------------
    # data path
    def on_packet(self, d: Delivery) -> None:
        if not self.alive:
            return
        p = d.packet
        self._emit(EventKind.NF_IN, p.id)
        if self.role is Role.PRIMARY:
            sec = self._resync_target or self.secondary
            if sec is not None and d.secondary != sec:
                self._relay(p)
            self.enqueue_arrival(p)
        elif self.role is Role.SECONDARY:
            self._hold(p, self.ctx.sched.now)

    def on_relay(self, p: Packet) -> None:
        if self.alive and self.role is Role.SECONDARY:
            self._emit(EventKind.NF_IN, p.id)
            self._hold(p, self.ctx.sched.now)

    def _relay(self, p: Packet) -> None:
        if "resync" in self.halts or "promote" in self.halts:
            self._relay_queue.append(p)
            return
        self._send_relay(p)

    def _send_relay(self, p: Packet) -> None:
        name = self._resync_target or self.secondary
        self.ctx.net.send(self.name, name, self.ctx.nfs[name].on_relay, p, cls=DATA)

    def _hold(self, p: Packet, when: int) -> None:
        f = p.flow_id
        if f in self.ignored_flows or p.counter < self.sc_ne.get(f, 1):
            return
        self.held.setdefault(f, {}).setdefault(p.counter, (p, when))

    def enqueue_arrival(self, p: Packet) -> str:
        """Put an arriving packet in the input buffer, or drop it when full."""
        if self.role is Role.SECONDARY:
            self._hold(p, self.ctx.sched.now)
            return Accepted
        f = p.flow_id
        if f in self.migrated_out:
            self._forward(p)
            return Accepted
        mig = self.migrating.get(f)
        if mig is not None:
            mig.side.append((p, self.ctx.sched.now))
            self.arrived.setdefault(p.id, self.ctx.sched.now)
            return Accepted
        if len(self.input) >= self.capacity and "promote" not in self.halts:
            if self._have(p):
                self._emit(EventKind.DISCARDED, p.id)
                return Accepted
            self.drop_count += 1
            self._emit(EventKind.DROPPED, p.id)
            self.holes.setdefault(f, set()).add(p.counter)
            self._advance(f)
            self._kick()
            return DroppedResult
        self._push_input(p, self.ctx.sched.now)
        self._kick()
        return Accepted

    def _have(self, p: Packet) -> bool:
        f = p.flow_id
        return (p.counter < self.next_expected.get(f, 1) or p.id in self._in_input
                or p.counter in self.pending_pkts.get(f, ())
                or (self.current is not None and self.current.id == p.id))

    def _push_input(self, p: Packet, when: int) -> None:
        self.input.append(p)
        self._in_input.add(p.id)
        self.arrived.setdefault(p.id, when)

    def _forward(self, p: Packet) -> None:
        self.ctx.net.send(self.name, "switch", self.ctx.switch.receive, p, True, cls=DATA)

    # ------------------------------------------------------------------
    # ordered processing
    def _advance(self, f: int) -> None:
        exp = self.next_expected.get(f, 1)
        hs = self.holes.get(f)
        while hs and exp in hs:
            hs.discard(exp)
            self.batch_skipped.append(PacketId(f, exp))
            exp += 1
        if exp != self.next_expected.get(f, 1):
            self.next_expected[f] = exp
        if f in self.pending:
            self.ready.append(f)

    def _can_run(self) -> bool:
        return (self.alive and self.role is Role.PRIMARY and not self.busy and not self.halts)

    def _kick(self) -> None:
        while self._can_run():
            r = self.process_step()
            if r is not Step.STALLED_ON_ORDER:
                return

    def process_step(self) -> Step:
        """One pass of the processing unit.

        Pending packets whose turn has come go first; otherwise pop the head
        of the input buffer and either start it or park it in the pending list.
        """
        if not self._can_run():
            return Step.HALTED
        if len(self.output) >= self.batch_size:
            self._batch_full()
            return Step.STALLED_ON_OUTPUT
        while self.ready:
            f = self.ready[0]
            p = self._pending_match(f)
            if p is not None:
                self._start(p)
                return Step.PROCESSED_ONE
            self.ready.popleft()
        if not self.input:
            self._maybe_flush()
            return Step.IDLE
        p = self.input.popleft()
        self._in_input.discard(p.id)
        f = p.flow_id
        if f in self.migrated_out:
            self._forward(p)
            return Step.STALLED_ON_ORDER
        mig = self.migrating.get(f)
        if mig is not None:
            mig.side.append((p, self.arrived.get(p.id, self.ctx.sched.now)))
            return Step.STALLED_ON_ORDER
        exp = self.next_expected.get(f, 1)
        if p.counter == exp or (self._mut("bypass_pending") and p.counter > exp):
            self._start(p)
            return Step.PROCESSED_ONE
        if p.counter < exp or p.counter in self.pending_pkts.get(f, ()):
            self._emit(EventKind.DISCARDED, p.id)
            return Step.STALLED_ON_ORDER
        self._park(p)
        return Step.STALLED_ON_ORDER

    def _park(self, p: Packet) -> None:
        f = p.flow_id
        heapq.heappush(self.pending.setdefault(f, []), p.counter)
        self.pending_pkts.setdefault(f, {})[p.counter] = p
        self._emit(EventKind.BUFFERED, p.id)

    def _pending_match(self, f: int) -> Optional[Packet]:
        heap = self.pending.get(f)
        exp = self.next_expected.get(f, 1)
        while heap and heap[0] < exp:
            c = heapq.heappop(heap)
            stale = self.pending_pkts[f].pop(c)
            self._emit(EventKind.DISCARDED, stale.id)
        if not heap:
            self.pending.pop(f, None)
            self.pending_pkts.pop(f, None)
            return None
        if heap[0] != exp or f in self.migrating:
            return None
        heapq.heappop(heap)
        p = self.pending_pkts[f].pop(exp)
        if not heap:
            del self.pending[f]
            del self.pending_pkts[f]
        return p

    def _start(self, p: Packet) -> None:
        self.busy = True
        self.current = p
        start = self.ctx.sched.now
        self.ctx.sched.after(p.work_cost * self.work_cost_ns, self._work_done, p, start)

    def _work_done(self, p: Packet, start: int) -> None:
        if not self.alive:
            return
        if p.global_update_flag and (self._mut("skip_marker_check")
                                     or not self.member.markers.covers(p.id)):
            self.issue_global_update(p, start)
            return
        self._complete(p, start)

    def issue_global_update(self, p: Packet, start: int) -> None:
        """Submit this packet's global update and finish the packet only on return."""
        update = GlobalUpdate(p.flow_id % self.global_keys, 1, p.id, self.name)
        self._emit(EventKind.GLOBAL_COMMIT_START, p.id)

        def done(index):
            if not self.alive:
                return
            self.global_commits += 1
            self._emit(EventKind.GLOBAL_COMMIT_DONE, p.id, index)
            self._complete(p, start)

        self.ctx.consensus.submit(update, done)
        self._hook("global_submitted")

    def _complete(self, p: Packet, start: int) -> None:
        f = p.flow_id
        st = self.local.get(f)
        if st is None:
            st = self.local[f] = [0, 0]
        st[0] += 1
        st[1] += p.payload_len
        self.touched.add(f)
        exp = self.next_expected.get(f, 1)
        self.next_expected[f] = max(exp, p.counter + 1)
        self.busy = False
        self.current = None
        self.processed_count += 1
        self._emit(EventKind.PROCESSED, p.id)
        if p.counter >= self.release_floor.get(f, 0):
            self.output.append((p, self.arrived.get(p.id, start), start, self.ctx.sched.now))
        else:
            self.arrived.pop(p.id, None)
        self._advance(f)
        if self.migrating:
            self._check_migrations()
        if self._idle_waiters:
            waiters, self._idle_waiters = self._idle_waiters, []
            for fn in waiters:
                fn()
        self._hook("processed")
        self._kick()

    def _when_idle(self, fn: Callable[[], None]) -> None:
        if self.busy:
            self._idle_waiters.append(fn)
        else:
            fn()

    # ------------------------------------------------------------------
    # batch replication
    def _capture(self) -> Capture:
        self.batch_id += 1
        cap = Capture(
            self.batch_id,
            dict(self.next_expected),
            {f: tuple(self.local[f]) for f in self.touched if f in self.local},
            tuple(self.batch_skipped),
            tuple(sorted(self.removed)),
            self.output,
        )
        self.output = []
        self.touched = set()
        self.batch_skipped = []
        self.removed = set()
        return cap

    def _batch_full(self) -> None:
        if "pc" in self.halts:
            return
        cap = self._capture()
        self.halts.add("pc")
        if self.secondary is None:
            self._release(cap)
            self._after_release(cap)
            return
        if self.sc_txn is not None:
            self.waiting_capture = cap
            return
        self._start_packet_clock(cap)

    def _start_packet_clock(self, cap: Capture) -> None:
        self.inflight_capture = cap
        self.pc_txn = Txn(self, self.secondary, "pc", cap.packet_clock(),
                          lambda: self._packet_clock_done(cap))
        self.pc_txn.start()
        if self._mut("release_before_commit"):
            self._release(cap)
        self._hook("pc_prepared")

    def _packet_clock_done(self, cap: Capture) -> None:
        self.pc_txn = None
        self.inflight_capture = None
        if not self._mut("release_before_commit"):
            self._release(cap)
        self._after_release(cap)

    def _release(self, cap: Capture) -> None:
        now = self.ctx.sched.now
        for p, arrived, start, done in cap.outputs:
            self._emit(EventKind.RELEASED, p.id, cap.batch_id)
            self.arrived.pop(p.id, None)
            self.ctx.on_release(self, p, arrived, start, done, now)
        self.released_count += len(cap.outputs)
        cap.outputs = []

    def _after_release(self, cap: Capture) -> None:
        self.batches_committed += 1
        self.released_ne.update(cap.next_expected)
        self.released_state.update(cap.deltas)
        for f in cap.removed:
            self.released_state.pop(f, None)
            self.released_ne.pop(f, None)
        for f in [f for f, fl in self.release_floor.items()
                  if self.released_ne.get(f, 1) >= fl]:
            del self.release_floor[f]
        self.halts.discard("pc")
        # the release and the state-clock prepare form one step: the prepare
        # reaching the secondary is its proof that this batch went out
        if self.secondary is not None:
            self.sc_txn = Txn(self, self.secondary, "sc", cap.state_clock(),
                              self._state_clock_done)
            self.sc_txn.start()
        self._hook("pc_committed")
        if not self.alive:
            return
        if self.sc_txn is not None:
            self._hook("sc_prepared")
            if not self.alive:
                return
        self._check_migrations()
        self._kick()

    def _state_clock_done(self) -> None:
        self.sc_txn = None
        self._hook("sc_committed")
        if not self.alive:
            return
        if self.waiting_capture is not None:
            cap, self.waiting_capture = self.waiting_capture, None
            self._start_packet_clock(cap)
        self._kick()

    def _maybe_flush(self) -> None:
        if (self.ctx.draining and self.output and not self.ready and not self.busy
                and "pc" not in self.halts):
            self._batch_full()

    def flush(self) -> None:
        """Release a partial batch (end of traffic)."""
        if self._can_run() and not self.input and self.output:
            self._batch_full()

    # commit_packet_clock / commit_state_clock are driven by _batch_full and
    # _after_release; these names are the public entry points for tests.
    def commit_packet_clock(self) -> None:
        self._batch_full()

    # ------------------------------------------------------------------
    # participant side of 2PC
    def on_prepare(self, coord: str, txid: int, kind: str, payload) -> None:
        if not self.alive:
            return
        key = (coord, txid)
        if key not in self._prepared and key not in self._committed:
            # stored even while unavailable: a prepare is evidence the coordinator sent it
            self._prepared[key] = (kind, payload)
            if kind == "sc" and coord == self.primary:
                self.sc_seen = max(self.sc_seen, payload.batch_id)
            if kind == "baseline" and self.role is Role.SPARE:
                self._ensure_member()
            if kind == "import" and self.role is Role.PRIMARY and self.secondary is not None:
                self._relaying.add(key)
                relay = Txn(self, self.secondary, "import_relay", payload,
                            lambda: self._relayed(coord, txid))
                relay.start()
        if self._unavailable() or key in self._relaying:
            return
        self._vote(coord, txid)

    def _relayed(self, coord: str, txid: int) -> None:
        self._relaying.discard((coord, txid))
        if not self._unavailable():
            self._vote(coord, txid)

    def _vote(self, coord: str, txid: int) -> None:
        self._voted.add((coord, txid))
        peer = self.ctx.nfs[coord]
        self.ctx.net.send(self.name, coord, peer.on_vote, txid, cls=CTRL)

    def on_vote(self, txid: int) -> None:
        t = self.txns.get(txid)
        if t is not None and self.alive:
            t.voted()

    def on_commit(self, coord: str, txid: int) -> None:
        if not self.alive or self._unavailable():
            return
        key = (coord, txid)
        if key not in self._committed:
            entry = self._prepared.pop(key, None)
            if entry is None:
                return
            self._committed.add(key)
            self._voted.discard(key)
            self._apply(coord, *entry)
            if not self.alive:
                return
        peer = self.ctx.nfs[coord]
        self.ctx.net.send(self.name, coord, peer.on_ack, txid, cls=CTRL)

    def on_ack(self, txid: int) -> None:
        t = self.txns.get(txid)
        if t is not None and self.alive:
            t.acked()

    def _apply(self, coord: str, kind: str, payload) -> None:
        if kind == "pc":
            self._apply_packet_clock(coord, payload)
        elif kind == "sc":
            self._apply_state_clock(coord, payload)
        elif kind == "baseline":
            self._apply_baseline(coord, payload)
        elif kind == "import":
            self._apply_import_primary(payload)
        elif kind == "import_relay":
            self._apply_import_secondary(payload)
        else:
            raise ValueError(f"unknown transaction kind {kind!r}")

    def _check_lag(self) -> None:
        i, j = self.i, self.j
        if i is not None and j is not None and not (j <= i <= j + 1):
            self.ctx.violations.append(
                (self.ctx.sched.now, self.name, f"clock lag i={i} j={j}"))

    def _apply_packet_clock(self, coord: str, pc: PacketClock) -> None:
        if self.role is not Role.SECONDARY or coord != self.primary:
            return
        self.pc = pc
        self.pc_ne.update(pc.next_expected)
        for pid in pc.skipped:
            self.known_holes.setdefault(pid.flow_id, set()).add(pid.counter)
        self._emit(EventKind.PACKET_CLOCK_COMMIT, batch=pc.batch_id)
        self._check_lag()

    def _apply_state_clock(self, coord: str, sc: StateClock) -> None:
        if self.role is not Role.SECONDARY or coord != self.primary:
            return
        self.sc = sc
        self.mirror.update(sc.local_deltas)
        self.sc_ne.update(sc.next_expected)
        for f in sc.removed:
            self._forget_flow(f)
        for f in list(self.held):
            ne = self.sc_ne.get(f)
            if ne is None:
                continue
            h = self.held[f]
            for c in [c for c in h if c < ne]:
                del h[c]
            if not h:
                del self.held[f]
        for f, hs in list(self.known_holes.items()):
            ne = self.sc_ne.get(f, 1)
            hs.difference_update([c for c in hs if c < ne])
            if not hs:
                del self.known_holes[f]
        for f in sc.local_deltas:
            self.member.markers.prune(f, self.sc_ne.get(f, 1))
        self._emit(EventKind.STATE_CLOCK_COMMIT, batch=sc.batch_id)
        self._check_lag()

    def _forget_flow(self, f: int) -> None:
        self.mirror.pop(f, None)
        self.sc_ne.pop(f, None)
        self.pc_ne.pop(f, None)
        self.sec_floor.pop(f, None)
        self.held.pop(f, None)
        self.known_holes.pop(f, None)
        self.ignored_flows.add(f)

    def _apply_baseline(self, coord: str, b: Baseline) -> None:
        self._ensure_member()
        self._reset_secondary()
        self.role = Role.SECONDARY
        self.primary = coord
        self.pc = PacketClock(b.batch_id, dict(b.next_expected))
        self.sc = StateClock(b.batch_id, dict(b.next_expected), dict(b.local))
        self.pc_ne = dict(b.next_expected)
        self.sc_ne = dict(b.next_expected)
        self.mirror = dict(b.local)
        self.sec_floor = dict(b.release_floor)
        for pid in b.holes:
            self.known_holes.setdefault(pid.flow_id, set()).add(pid.counter)
        for p, when in b.held:
            self._hold(p, when)
        self._emit(EventKind.PACKET_CLOCK_COMMIT, batch=b.batch_id)
        self._emit(EventKind.STATE_CLOCK_COMMIT, batch=b.batch_id)

    def _apply_import_secondary(self, imp: FlowImport) -> None:
        f = imp.flow_id
        self.ignored_flows.discard(f)
        self.mirror[f] = imp.state
        self.sc_ne[f] = max(self.sc_ne.get(f, 1), imp.next_expected)
        self.pc_ne[f] = max(self.pc_ne.get(f, 1), imp.next_expected)
        if imp.holes:
            self.known_holes.setdefault(f, set()).update(imp.holes)
        h = self.held.get(f)
        if h:
            for c in [c for c in h if c < imp.next_expected]:
                del h[c]

    def _apply_import_primary(self, imp: FlowImport) -> None:
        f = imp.flow_id
        self.migrated_out.discard(f)
        self.local[f] = list(imp.state)
        self.next_expected[f] = imp.next_expected
        self.released_ne[f] = imp.next_expected
        self.released_state[f] = imp.state
        self.touched.add(f)
        if imp.holes:
            self.holes.setdefault(f, set()).update(imp.holes)
        self._advance(f)
        self._kick()

    def _ensure_member(self) -> None:
        if self.member is None or not self.member.active:
            self.member = self.ctx.consensus.join(self.name)

    # ------------------------------------------------------------------
    # promotion (primary failover)
    def promote_secondary(self, owned: Set[int], new_secondary: Optional[str],
                          done: Callable[[str], None]) -> None:
        """Take over from the failed primary using the last packet/state clocks."""
        if not self.alive or self.role is not Role.SECONDARY:
            return
        self.role = Role.PRIMARY
        self.halts.add("promote")
        self._emit(EventKind.PROMOTION, batch=self.i)
        self.ctx.consensus.barrier(self.name,
                                   lambda: self._promote_ready(owned, new_secondary, done))

    def replay_plan(self) -> dict:
        """Which clock drives processing and which drives release suppression."""
        i, j = self.i, self.j
        case = 1 if i == j else 2
        released = (case == 1 or self.sc_seen >= i) and not self._mut("rerelease_on_failover")
        start = dict(self.pc_ne) if case == 1 else dict(self.sc_ne)
        # batch i is re-released when no evidence shows the primary released it
        floor = dict(self.pc_ne) if released else dict(self.sc_ne)
        for f, v in self.sec_floor.items():
            floor[f] = max(floor.get(f, 1), v)
        return {"case": case, "i": i, "j": j, "start": start, "floor": floor,
                "released": released}

    def _promote_ready(self, owned, new_secondary, done) -> None:
        if not self.alive:
            return
        plan = self.replay_plan()
        start = plan["start"]
        held = self.held
        mirror = self.mirror
        holes = self.known_holes
        i = self.i
        self._reset_primary_keep()
        self.next_expected = {f: v for f, v in start.items() if f in owned}
        self.local = {f: list(v) for f, v in mirror.items() if f in owned}
        self.released_ne = dict(self.next_expected)
        self.released_state = {f: tuple(v) for f, v in self.local.items()}
        self.release_floor = {f: v for f, v in plan["floor"].items()
                              if f in owned and v > self.next_expected.get(f, 1)}
        for f, hs in holes.items():
            if f in owned:
                exp = self.next_expected.get(f, 1)
                keep = {c for c in hs if c >= exp}
                if keep:
                    self.holes[f] = keep
        self.batch_id = i or 0
        replay = []
        for f, h in held.items():
            for c, (p, when) in h.items():
                replay.append((when, f, c, p))
        replay.sort(key=lambda r: (r[0], r[1], r[2]))
        for when, f, c, p in replay:
            if f in owned:
                self._push_input(p, when)
            else:
                self.migrated_out.add(f)
                self._forward(p)
        for f in list(self.next_expected):
            self._advance(f)
        self._reset_secondary()
        self.ctx.promotions.append((self.ctx.sched.now, self.name, plan["case"], i, plan["j"]))

        def finished():
            self.halts.discard("promote")
            done(self.name)
            self._kick()

        if new_secondary is None:
            self.degraded = True
            self.secondary = None
            finished()
        else:
            self.halts.discard("promote")
            self.resync_new_secondary(new_secondary, lambda: done(self.name))

    def _reset_primary_keep(self) -> None:
        # keep anything already queued as primary since promotion began
        queued = list(self.input)
        arrived = dict(self.arrived)
        relay = list(self._relay_queue)
        self._reset_primary()
        self.role = Role.PRIMARY
        self.halts.add("promote")
        self._relay_queue = relay
        for p in queued:
            self._push_input(p, arrived.get(p.id, self.ctx.sched.now))

    # ------------------------------------------------------------------
    # resync to a new secondary
    def _unreleased(self) -> List[Tuple[Packet, int]]:
        out: Dict[PacketId, Tuple[Packet, int]] = {}

        def add(p, when):
            if p.counter >= self.released_ne.get(p.flow_id, 1):
                out.setdefault(p.id, (p, when))

        for cap in (self.inflight_capture, self.waiting_capture):
            if cap is not None:
                for p, arrived, _, _ in cap.outputs:
                    add(p, arrived)
        for p, arrived, _, _ in self.output:
            add(p, arrived)
        if self.current is not None:
            add(self.current, self.arrived.get(self.current.id, self.ctx.sched.now))
        for p in self.input:
            add(p, self.arrived.get(p.id, self.ctx.sched.now))
        for f, pk in self.pending_pkts.items():
            for p in pk.values():
                add(p, self.arrived.get(p.id, self.ctx.sched.now))
        for mig in self.migrating.values():
            for p, when in mig.side:
                add(p, when)
        return sorted(out.values(), key=lambda pw: (pw[1], pw[0].flow_id, pw[0].counter))

    def baseline(self) -> Baseline:
        holes = []
        for f, hs in self.holes.items():
            holes.extend(PacketId(f, c) for c in hs)
        for cap in (self.inflight_capture, self.waiting_capture):
            if cap is not None:
                holes.extend(cap.skipped)
        holes.extend(self.batch_skipped)
        holes = [h for h in holes if h.counter >= self.released_ne.get(h.flow_id, 1)]
        last = self.batch_id
        if self.inflight_capture is not None:
            last = self.inflight_capture.batch_id - 1
        if self.waiting_capture is not None:
            last = self.waiting_capture.batch_id - 1
        return Baseline(last, dict(self.released_ne), dict(self.released_state),
                        dict(self.release_floor), tuple(self._unreleased()),
                        tuple(sorted(set(holes))))

    def resync_new_secondary(self, new_secondary: str, done: Callable[[], None]) -> None:
        """Hand a full baseline to ``new_secondary`` with processing halted."""
        self.halts.add("resync")
        self._when_idle(lambda: self._resync_begin(new_secondary, done))

    def _resync_begin(self, new_secondary, done):
        if not self.alive:
            return
        for t in (self.pc_txn, self.sc_txn):
            if t is not None:
                t.cancel()
        self.pc_txn = self.sc_txn = None
        b = self.baseline()
        # from here on, arrivals not duplicated to the new secondary get relayed
        self._resync_target = new_secondary
        t = Txn(self, new_secondary, "baseline", b,
                lambda: self._resync_done(new_secondary, done))
        t.start()

    def _resync_done(self, new_secondary, done):
        self.secondary = new_secondary
        self._resync_target = None
        self.degraded = False
        self.halts.discard("resync")
        queued, self._relay_queue = self._relay_queue, []
        for p in queued:
            self._send_relay(p)
        done()
        if not self.alive:
            return
        cap = self.inflight_capture or self.waiting_capture
        if cap is not None:
            self.waiting_capture = None
            self._start_packet_clock(cap)
        self._kick()

    def drop_secondary(self) -> None:
        """Continue without replication (no spare was available)."""
        for t in (self.pc_txn, self.sc_txn):
            if t is not None:
                t.cancel()
        self.pc_txn = self.sc_txn = None
        self.secondary = None
        self.degraded = True
        cap = self.inflight_capture or self.waiting_capture
        self.inflight_capture = self.waiting_capture = None
        if cap is not None:
            self._release(cap)
            self._after_release(cap)
        self.halts.discard("resync")
        self._kick()

    # ------------------------------------------------------------------
    # flow migration (source side)
    def migrate_flow_out(self, flow_id: int, dst: str,
                         transferred: Callable[[int], None]) -> None:
        if not self.alive or self.role is not Role.PRIMARY:
            return
        mig = MigrationOut(flow_id, dst)
        self.migrating[flow_id] = mig
        self._emit(EventKind.MIGRATION_START, batch=None)
        heap = self.pending.pop(flow_id, None)
        pk = self.pending_pkts.pop(flow_id, {})
        if heap:
            for c in sorted(pk):
                p = pk[c]
                mig.side.append((p, self.arrived.get(p.id, self.ctx.sched.now)))
        mig.transferred = transferred
        self._check_migrations()

    def _check_migrations(self) -> None:
        for f, mig in list(self.migrating.items()):
            if mig.phase != 1:
                continue
            if self.current is not None and self.current.flow_id == f:
                continue
            if any(p.flow_id == f for p, *_ in self.output):
                continue
            cap = self.inflight_capture or self.waiting_capture
            if cap is not None and any(p.flow_id == f for p, *_ in cap.outputs):
                continue
            mig.phase = 2
            st = tuple(self.local.get(f, (0, 0)))
            imp = FlowImport(f, st, self.next_expected.get(f, 1),
                             tuple(sorted(self.holes.get(f, ()))))
            mig.txn = Txn(self, mig.dst, "import", imp, lambda f=f: self._transferred(f))
            mig.txn.start()

    def _transferred(self, f: int) -> None:
        mig = self.migrating.get(f)
        if mig is None:
            return
        mig.phase = 3
        mig.transferred(f)

    def migration_rule_flipped(self, f: int) -> None:
        """Rule now points at the destination: forward everything still held here."""
        if not self.alive:
            return
        mig = self.migrating.pop(f, None)
        if mig is None:
            return
        mig.phase = 4
        self.migrated_out.add(f)
        keep = deque()
        for p in self.input:
            if p.flow_id == f:
                mig.side.append((p, self.arrived.get(p.id, 0)))
                self._in_input.discard(p.id)
            else:
                keep.append(p)
        self.input = keep
        for p, _ in sorted(mig.side, key=lambda pw: pw[0].counter):
            self.arrived.pop(p.id, None)
            self._forward(p)
        self.local.pop(f, None)
        self.next_expected.pop(f, None)
        self.holes.pop(f, None)
        self.touched.discard(f)
        self.removed.add(f)
        self._emit(EventKind.MIGRATION_DONE, batch=None)
        self._kick()

    def abort_migration_out(self, f: int) -> None:
        mig = self.migrating.pop(f, None)
        if mig is None:
            return
        if mig.txn is not None:
            mig.txn.cancel()
        for p, when in reversed(sorted(mig.side, key=lambda pw: pw[0].counter)):
            self.input.appendleft(p)
            self._in_input.add(p.id)
            self.arrived.setdefault(p.id, when)
        self._advance(f)
        self._kick()

    def drop_imported_flow(self, f: int) -> None:
        """Undo an import whose migration was aborted before the rule flip."""
        if not self.alive:
            return
        self.local.pop(f, None)
        self.next_expected.pop(f, None)
        self.holes.pop(f, None)
        self.released_ne.pop(f, None)
        self.released_state.pop(f, None)
        self.touched.discard(f)
        self.removed.add(f)
        if self.secondary is not None:
            sec = self.ctx.nfs[self.secondary]
            self.ctx.net.send(self.name, self.secondary, sec._forget_flow_msg, f, cls=CTRL)

    def _forget_flow_msg(self, f: int) -> None:
        if self.alive and self.role is Role.SECONDARY:
            self._forget_flow(f)

    # ------------------------------------------------------------------
    def quiescent(self) -> bool:
        if not self.alive or self.role is not Role.PRIMARY:
            return True
        return (not self.busy and not self.input and not self.output and not self.pending
                and not self.halts and self.pc_txn is None and self.sc_txn is None
                and not self.migrating and self.waiting_capture is None)

    def snapshot(self) -> dict:
        snap = {
            "name": self.name,
            "role": self.role.value,
            "alive": self.alive,
            "local": {str(f): list(v) for f, v in sorted(self.local.items())},
            "next_expected": {str(f): v for f, v in sorted(self.next_expected.items())},
            "mirror": {str(f): list(v) for f, v in sorted(self.mirror.items())},
            "global_map": ({str(k): v for k, v in sorted(self.member.global_map.items())}
                           if self.member is not None else {}),
            "drops": self.drop_count,
            "degraded": self.degraded,
        }
        if self.member is not None:
            snap["applied_base"] = self.member.base_index
            snap["applied"] = [u.entry() for u in self.member.applied]
        return snap
