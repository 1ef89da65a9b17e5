"""Total-order commit service for global state.

Two interchangeable services share one member-side contract:

* :class:`Sequencer` - a single linearizable appender, used as the reference.
* :class:`QuorumLog` - a static-leader replicated log that commits an entry
  once a majority of log replicas have stored it.

NF instances are *members*: they receive committed entries and apply them
strictly in index order to their local copy of the global state map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Set, Tuple

from .fabric import CTRL, SimNet
from .model import PacketId
from .sim import Scheduler, backoff


@dataclass(frozen=True)
class GlobalUpdate:
    key: int
    delta: int
    origin_pkt: PacketId
    origin_nf: str

    def entry(self) -> list:
        return [self.key, self.delta, self.origin_pkt.flow_id, self.origin_pkt.counter,
                self.origin_nf]


@dataclass
class GlobalMarker:
    """Per flow, which global updates originated by that flow are already in the log.

    ``last`` is the most recent origin PacketId per flow.  ``seen`` keeps the
    exact counters so a replay never re-issues an update that was committed,
    even when the original primary skipped an input-dropped packet.
    """

    last: Dict[int, PacketId] = field(default_factory=dict)
    seen: Dict[int, Set[int]] = field(default_factory=dict)

    def observe(self, pid: PacketId) -> None:
        prev = self.last.get(pid.flow_id)
        if prev is None or pid.counter > prev.counter:
            self.last[pid.flow_id] = pid
        self.seen.setdefault(pid.flow_id, set()).add(pid.counter)

    def covers(self, pid: PacketId) -> bool:
        return pid.counter in self.seen.get(pid.flow_id, ())

    def prune(self, flow_id: int, below: int) -> None:
        s = self.seen.get(flow_id)
        if s:
            s.difference_update([c for c in s if c < below])

    def copy(self) -> "GlobalMarker":
        return GlobalMarker(dict(self.last), {f: set(s) for f, s in self.seen.items()})


class Member:
    """One NF's applied view of the log."""

    def __init__(self, name: str, on_apply: Optional[Callable[[int, GlobalUpdate], None]] = None):
        self.name = name
        self.global_map: Dict[int, int] = {}
        self.applied: List[GlobalUpdate] = []
        self.base_index = 0  # log index of applied[0] (nonzero after a snapshot join)
        self.markers = GlobalMarker()
        self.inbox: Dict[int, GlobalUpdate] = {}
        self.on_apply = on_apply
        self.active = True
        self._waiters: List[Tuple[int, Callable[[], None]]] = []

    @property
    def applied_index(self) -> int:
        return self.base_index + len(self.applied)

    def apply_next(self) -> Optional[GlobalUpdate]:
        idx = self.applied_index
        u = self.inbox.pop(idx, None)
        if u is None:
            return None
        self.global_map[u.key] = self.global_map.get(u.key, 0) + u.delta
        self.applied.append(u)
        self.markers.observe(u.origin_pkt)
        if self.on_apply is not None:
            self.on_apply(idx, u)
        return u

    def receive(self, index: int, update: GlobalUpdate) -> None:
        if not self.active or index < self.applied_index:
            return
        self.inbox[index] = update
        while self.apply_next() is not None:
            pass
        self._wake()

    def wait_for(self, index: int, fn: Callable[[], None]) -> None:
        if self.applied_index >= index:
            fn()
        else:
            self._waiters.append((index, fn))

    def _wake(self):
        if not self._waiters:
            return
        ready = [w for w in self._waiters if w[0] <= self.applied_index]
        self._waiters = [w for w in self._waiters if w[0] > self.applied_index]
        for _, fn in ready:
            fn()


class CommitService:
    """Member management and fan-out shared by both implementations."""

    name = "consensus"

    def __init__(self, sched: Scheduler, net: SimNet, commit_latency_ns: int = 250_000):
        self.sched = sched
        self.net = net
        self.commit_latency_ns = int(commit_latency_ns)
        self.log: List[GlobalUpdate] = []
        self.members: Dict[str, Member] = {}
        self._sid = 0
        self._outstanding: Set[int] = set()
        self._barriers: List[Tuple[Set[int], str, Callable[[], None]]] = []

    # membership -------------------------------------------------------
    def add_member(self, name: str, on_apply=None) -> Member:
        m = Member(name, on_apply)
        self.members[name] = m
        for i, u in enumerate(self.log):
            m.receive(i, u)
        return m

    def join(self, name: str, on_apply=None) -> Member:
        """Add a member from a snapshot of the committed prefix.

        The joiner gets the current global map and markers in one step and
        then receives every later entry like a founding member.
        """
        m = Member(name, on_apply)
        snap_map: Dict[int, int] = {}
        marker = GlobalMarker()
        for u in self.log:
            snap_map[u.key] = snap_map.get(u.key, 0) + u.delta
            marker.observe(u.origin_pkt)
        m.global_map = snap_map
        m.markers = marker
        m.base_index = len(self.log)
        self.members[name] = m
        return m

    def deactivate(self, name: str) -> None:
        m = self.members.get(name)
        if m is not None:
            m.active = False

    def apply_next(self, name: str) -> Optional[GlobalUpdate]:
        return self.members[name].apply_next()

    # commit path ------------------------------------------------------
    def submit(self, update: GlobalUpdate, done: Callable[[int], None]) -> None:
        raise NotImplementedError

    def _committed(self, update: GlobalUpdate) -> int:
        index = len(self.log)
        self.log.append(update)
        for m in list(self.members.values()):
            if m.active:
                self.net.send(self.name, m.name, m.receive, index, update, cls=CTRL)
        return index

    @property
    def in_flight(self) -> int:
        return len(self._outstanding)

    def _open(self) -> int:
        self._sid += 1
        self._outstanding.add(self._sid)
        return self._sid

    def barrier(self, member: str, done: Callable[[], None]) -> None:
        """Call ``done`` once ``member`` has applied everything submitted so far."""
        self._barriers.append((set(self._outstanding), member, done))
        self._settle()

    def _settle(self, sid: Optional[int] = None):
        if sid is not None:
            self._outstanding.discard(sid)
        still = []
        ready = []
        for waiting, member, done in self._barriers:
            waiting &= self._outstanding
            (still if waiting else ready).append((waiting, member, done))
        self._barriers = still
        for _, member, done in ready:
            self.members[member].wait_for(len(self.log), done)


class Sequencer(CommitService):
    """Appends each submission after ``commit_latency_ns``; linearizable by construction."""

    def submit(self, update: GlobalUpdate, done: Callable[[int], None]) -> None:
        sid = self._open()
        self.sched.after(self.commit_latency_ns, self._commit, sid, update, done)

    def _commit(self, sid, update, done):
        index = self._committed(update)
        self._settle(sid)
        done(index)


class QuorumLog(CommitService):
    """Static-leader log replicated on ``replicas`` servers; majority commit.

    Leader election is not modelled, so the leader never fails.  Followers
    may be marked down; the leader re-sends appends with exponential
    back-off until a quorum has acknowledged.
    """

    def __init__(self, sched: Scheduler, net: SimNet, commit_latency_ns: int = 250_000,
                 replicas: int = 3, quorum_size: Optional[int] = None):
        super().__init__(sched, net, commit_latency_ns)
        if replicas < 1:
            raise ValueError("need at least one log replica")
        self.replicas = [f"log/{i}" for i in range(replicas)]
        self.quorum_size = quorum_size or replicas // 2 + 1
        if not 1 <= self.quorum_size <= replicas:
            raise ValueError("quorum_size out of range")
        self.replica_logs: Dict[str, Dict[int, GlobalUpdate]] = {r: {} for r in self.replicas}
        self.replica_up: Dict[str, bool] = {r: True for r in self.replicas}
        self._acks: Dict[int, Set[str]] = {}
        self._pending: Dict[int, Tuple[GlobalUpdate, Callable[[int], None]]] = {}
        self._sids: Dict[int, int] = {}
        self._next = 0
        self.commit_index = 0

    @property
    def leader(self) -> str:
        return self.replicas[0]

    def submit(self, update: GlobalUpdate, done: Callable[[int], None]) -> None:
        sid = self._open()
        self.net.send(update.origin_nf, self.leader, self._leader_receive, sid, update, done,
                      cls=CTRL)

    def _leader_receive(self, sid, update, done):
        self.sched.after(self.commit_latency_ns, self._leader_append, sid, update, done)

    def _leader_append(self, sid, update, done):
        idx = self._next
        self._next += 1
        self.replica_logs[self.leader][idx] = update
        self._acks[idx] = {self.leader}
        self._pending[idx] = (update, done)
        self._sids[idx] = sid
        for r in self.replicas[1:]:
            self._send_append(r, idx, 0)
        self._advance()

    def _send_append(self, replica, idx, attempt):
        update = self._pending.get(idx, (None,))[0]
        if update is None:
            return
        self.net.send(self.leader, replica, self._follower_append, replica, idx, update, cls=CTRL)
        self.sched.after(backoff(attempt), self._append_timeout, replica, idx, attempt)

    def _append_timeout(self, replica, idx, attempt):
        if idx in self._pending and replica not in self._acks[idx]:
            self._send_append(replica, idx, attempt + 1)

    def _follower_append(self, replica, idx, update):
        if not self.replica_up[replica]:
            return
        self.replica_logs[replica][idx] = update
        self.net.send(replica, self.leader, self._leader_ack, replica, idx, cls=CTRL)

    def _leader_ack(self, replica, idx):
        if idx in self._acks:
            self._acks[idx].add(replica)
            self._advance()

    def _advance(self):
        while self.commit_index in self._pending and \
                len(self._acks[self.commit_index]) >= self.quorum_size:
            idx = self.commit_index
            update, done = self._pending.pop(idx)
            del self._acks[idx]
            self.commit_index += 1
            assert self._committed(update) == idx
            self._settle(self._sids.pop(idx))
            self.net.send(self.leader, update.origin_nf, done, idx, cls=CTRL)


def make_service(impl: str, sched: Scheduler, net: SimNet, commit_latency_ns: int,
                 quorum_size: Optional[int] = None, replicas: int = 3) -> CommitService:
    if impl == "sequencer":
        return Sequencer(sched, net, commit_latency_ns)
    if impl == "quorum":
        return QuorumLog(sched, net, commit_latency_ns, replicas=replicas,
                         quorum_size=quorum_size)
    raise ValueError(f"unknown consensus impl {impl!r}")
