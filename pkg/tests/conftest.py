from types import SimpleNamespace

import pytest

from nfstate.consensus import Sequencer
from nfstate.fabric import Delivery, SimNet
from nfstate.harness.config import load_config
from nfstate.harness.experiments import verdict
from nfstate.harness.system import run_system
from nfstate.model import FlowKey, Packet, PacketId, Trace
from nfstate.nf import NFInstance, Role
from nfstate.sim import Scheduler


class Rig:
    """A primary/secondary pair wired to a scheduler, without switch or controller."""

    def __init__(self, batch_size=5, buffer_batches=5, work_cost_ns=10_000, secondary=True,
                 mutations=()):
        self.sched = Scheduler()
        self.trace = Trace()
        self.net = SimNet(self.sched, base_latency_ns=1_000, ctrl_latency_ns=1_000)
        self.consensus = Sequencer(self.sched, self.net, 1_000)
        self.nfs = {}
        self.mutations = set(mutations)
        self.draining = False
        self.released = []
        self.promotions = []
        self.violations = []
        self.switch = None
        self.p = self._make("P", Role.PRIMARY, batch_size, buffer_batches, work_cost_ns)
        self.s = None
        if secondary:
            self.s = self._make("S", Role.SECONDARY, batch_size, buffer_batches, work_cost_ns)
            self.s.start_secondary("P")
        self.p.start_primary("S" if secondary else None)

    def _make(self, name, role, b, bb, w):
        nf = NFInstance(name, f"node-{name}", self, b, bb, w, 4, role)
        nf.member = self.consensus.add_member(name)
        self.nfs[name] = nf
        return nf

    def on_release(self, nf, p, arrived, start, done, now):
        self.released.append(p.id)

    def deliver(self, *packets):
        for p in packets:
            sec = "S" if self.s is not None else None
            self.p.on_packet(Delivery(p, False, sec))
            if self.s is not None:
                self.s.on_packet(Delivery(p, True, sec))

    def run(self):
        self.sched.run()

    def kinds(self, kind, actor=None):
        return [e for e in self.trace if e.kind is kind and (actor is None or e.actor == actor)]


KEY = FlowKey(1, 2, 3, 4, 17)


def pkt(flow, counter, payload=64, flag=False):
    return Packet(PacketId(flow, counter), KEY, payload, 0, 1, flag)


@pytest.fixture
def rig():
    return Rig()


def small(**overrides):
    base = {"traffic.packets": 600, "traffic.flows": 6, "nf.batch_size": 10,
            "traffic.rate_pps": 10_000}
    base.update(overrides)
    return load_config(base)


def run_and_check(cfg):
    run = run_system(cfg)
    return run, verdict(run)
