"""Wires one complete simulated deployment and runs it to quiescence."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

from ..consensus import make_service
from ..control import Controller, OverloadPolicy, Placement
from ..fabric import DATA, SimNet, Switch
from ..model import EventKind, Packet, PacketId, Trace
from ..nf import NFInstance, Role
from ..sim import Scheduler
from ..stamper import StamperManager
from .config import ExperimentConfig
from .traffic import Arrival, generate_traffic

log = logging.getLogger(__name__)


@dataclass
class ReleaseRecord:
    pid: PacketId
    stamp: int
    arrived: int
    start: int
    done: int
    release: int
    nf: str


@dataclass
class RunResult:
    cfg: ExperimentConfig
    trace: Trace
    packets: List[Packet]
    records: List[ReleaseRecord]
    final: dict
    end_time: int
    traffic_end: int
    flow_ids: Dict[int, int] = field(default_factory=dict)

    def oracle_drops(self):
        from ..oracle import effective_drops
        return effective_drops(self.trace)[0]


class System:
    """The run context every actor reaches through ``ctx``."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.sched = Scheduler()
        self.trace = Trace()
        self.net = SimNet(self.sched, cfg["net.base_latency_ns"], cfg["net.jitter_ns"],
                          cfg["net.reorder_prob"], cfg["net.reorder_penalty_ns"],
                          cfg["net.ctrl_latency_ns"], seed=cfg["seed"])
        self.consensus = make_service(cfg["consensus.impl"], self.sched, self.net,
                                      cfg["consensus.commit_latency_ns"],
                                      cfg["consensus.quorum_size"], cfg["consensus.replicas"])
        self.stamper = StamperManager(cfg["stamper.units"], self.trace)
        self.mutations: Set[str] = set(cfg["mutations"])
        self.violations: List[Tuple[int, str, str]] = []
        self.promotions: List[tuple] = []
        self.draining = False
        self.records: List[ReleaseRecord] = []
        self.packets: List[Packet] = []
        self.flow_ids: Dict[int, int] = {}
        self.crashed: List[str] = []
        self._build_nfs()
        self.switch = Switch(self.sched, self.net, self.trace, self.nfs,
                             lambda f: self.controller.install_default(f))
        self.controller = Controller(self, self.placement, self.primary_names, self.spare_names,
                                     cfg["control.ping_interval_ns"],
                                     cfg["control.suspect_threshold"])
        if cfg["control.overload_policy"]:
            self.controller.overload = OverloadPolicy()
        self._crash_rules = [dict(d, seen=0) for d in cfg["scenario"] if d["op"] == "crash_on"]
        self.arrivals: List[Arrival] = generate_traffic(cfg)
        self.traffic_done = not self.arrivals

    def _build_nfs(self) -> None:
        cfg = self.cfg
        n = cfg["nf.count"]
        n_nodes = cfg["nodes.count"] or max(2, n)
        nodes = [f"node{k}" for k in range(n_nodes)]
        self.nfs: Dict[str, NFInstance] = {}
        self.primary_names: List[str] = []
        self.spare_names: List[str] = []
        nf_to_node: Dict[str, str] = {}
        pairs: Dict[str, Optional[str]] = {}

        def make(name, node, role):
            nf = NFInstance(name, node, self, cfg["nf.batch_size"], cfg["nf.buffer_batches"],
                            cfg["nf.work_cost_ns"], cfg["nf.global_keys"], role)
            self.nfs[name] = nf
            nf_to_node[name] = node
            return nf

        for k in range(n):
            p = make(f"nf{k}", nodes[k % n_nodes], Role.PRIMARY)
            s = make(f"nf{n + k}", nodes[(k + 1) % n_nodes], Role.SECONDARY)
            p.start_primary(s.name)
            s.start_secondary(p.name)
            for nf in (p, s):
                nf.member = self.consensus.add_member(nf.name)
            pairs[p.name] = s.name
            self.primary_names.append(p.name)
        for m in range(cfg["control.spare_nfs"]):
            x = make(f"nf{2 * n + m}", nodes[m % n_nodes], Role.SPARE)
            self.spare_names.append(x.name)
        self.placement = Placement(nodes, nf_to_node, pairs)

    # ------------------------------------------------------------------
    # callbacks used by NF instances
    def hook(self, point: str, nf: NFInstance) -> None:
        for rule in self._crash_rules:
            if rule["nf"] != nf.name or rule["point"] != point:
                continue
            if self.sched.now < rule.get("at_ns", 0):
                continue
            rule["seen"] += 1
            if rule["seen"] == rule["count"]:
                self.crash(nf.name)
        if point == "pc_committed" and self.controller.overload is not None and nf.alive:
            self.controller.observe_batch(nf)

    def on_release(self, nf: NFInstance, p: Packet, arrived: int, start: int, done: int,
                   now: int) -> None:
        self.records.append(ReleaseRecord(p.id, p.stamp_time, arrived, start, done, now,
                                          nf.name))

    # ------------------------------------------------------------------
    def crash(self, name: str) -> None:
        nf = self.nfs[name]
        if nf.alive:
            log.debug("crash %s at %d", name, self.sched.now)
            self.crashed.append(name)
            nf.crash()

    def _directive(self, d: dict) -> None:
        op = d["op"]
        if op == "fail_nf":
            self.crash(d["nf"])
        elif op == "fail_node":
            for name in sorted(self.nfs):
                if self.placement.nf_to_node[name] == d["node"]:
                    self.crash(name)
        elif op == "fail_unit":
            self.stamper.fail_unit(d["unit"])
        elif op == "recover_unit":
            self.stamper.recover_unit(d["unit"])
        elif op == "fail_manager":
            self.stamper.fail_manager()
        elif op == "recover_manager":
            self.stamper.recover_manager()
        elif op == "pause_nf":
            self.nfs[d["nf"]].pause(self.sched.now + d["duration_ns"])
        elif op == "migrate":
            self._migrate(d["flows"], d["dst"])
        # set_rate is folded into the arrival schedule

    def _migrate(self, flows: List[int], dst: str) -> None:
        by_src: Dict[str, List[int]] = {}
        for idx in flows:
            fid = self.flow_ids.get(idx)
            owner = self.controller.owner.get(fid)
            if owner is None or owner[0] == dst:
                continue
            by_src.setdefault(owner[0], []).append(fid)
        for src, fids in sorted(by_src.items()):
            self.controller.orchestrate_scale(src, fids, dst)

    def _arrive(self, idx: int) -> None:
        a = self.arrivals[idx]
        p = self.stamper.stamp(a.key, a.payload_len, self.sched.now, a.global_flag)
        if p:
            self.packets.append(p)
            self.flow_ids.setdefault(a.flow, p.flow_id)
            self.net.send("stamper", self.switch.name, self.switch.receive, p, cls=DATA)
        if idx + 1 < len(self.arrivals):
            self.sched.at(self.arrivals[idx + 1].time, self._arrive, idx + 1)
        else:
            self._end_traffic()

    def _end_traffic(self) -> None:
        self.traffic_done = True
        self.traffic_end = self.sched.now
        self.draining = True
        for nf in self.nfs.values():
            if nf.alive and nf.role is Role.PRIMARY:
                nf._kick()

    def _settled(self) -> bool:
        if self.sched.pending_work or not self.traffic_done or not self.controller.settled:
            return False
        watched = set(self.controller._monitored())
        return not any(n in watched for n in self.crashed)

    # ------------------------------------------------------------------
    def run(self) -> RunResult:
        self.traffic_end = 0
        self.controller.start()
        for d in self.cfg["scenario"]:
            if "at_ns" in d and d["op"] not in ("set_rate", "crash_on"):
                self.sched.at(d["at_ns"], self._directive, d)
        if self.arrivals:
            self.sched.at(self.arrivals[0].time, self._arrive, 0)
        else:
            self._end_traffic()
        limit = self.cfg["run.max_time_ns"]
        self.sched.run(until=limit, stop=self._settled)
        if not self._settled():
            self.violations.append((self.sched.now, "harness", "run did not quiesce"))
        for name, nf in sorted(self.nfs.items()):
            if not nf.quiescent():
                self.violations.append((self.sched.now, name, "not quiescent at end of run"))
        return RunResult(self.cfg, self.trace, self.packets, self.records, self.final_state(),
                         self.sched.now, self.traffic_end, dict(self.flow_ids))

    def final_state(self) -> dict:
        return {
            "rules": {str(f): r.primary_nf for f, r in self.switch.rules.items()},
            "nfs": {name: nf.snapshot() for name, nf in sorted(self.nfs.items())},
            "log": [u.entry() for u in self.consensus.log],
            "pairs": [list(x) for x in self.controller.pair_history],
            "violations": [list(v) for v in self.violations],
            "degraded": sorted(self.controller.degraded),
            "promotions": [list(p) for p in self.promotions],
            "global_keys": self.cfg["nf.global_keys"],
        }


def run_system(cfg: ExperimentConfig) -> RunResult:
    return System(cfg).run()


def stamped_count(trace: Trace) -> int:
    return sum(1 for e in trace if e.kind is EventKind.STAMPED)
