import pytest

from conftest import run_and_check, small
from nfstate.control import FduState, OverloadPolicy, Placement
from nfstate.harness.system import System
from nfstate.model import EventKind


def test_placement_violation_detected():
    pl = Placement(["n0", "n1"], {"a": "n0", "b": "n0", "c": "n1"}, {"a": "c"})
    assert pl.violations() == []
    pl.pairs["a"] = "b"
    assert pl.violations()


def test_fdu_suspects_past_threshold_only():
    f = FduState(10, 3, {"a": 0, "b": 5})
    assert f.suspects(30) == []
    assert f.suspects(31) == ["a"]


def test_overload_policy_needs_consecutive_batches():
    pol = OverloadPolicy()
    assert [pol.observe("a", 90, 100) for _ in range(3)] == [False, False, True]
    assert not pol.observe("a", 90, 100)
    pol.observe("a", 90, 100)
    pol.observe("a", 10, 100)
    assert not pol.observe("a", 90, 100)


def _declarations(cfg):
    sys_ = System(cfg)
    out = []
    orig = sys_.controller._on_failure

    def spy(nf):
        out.append((nf, sys_.sched.now))
        orig(nf)
    sys_.controller._on_failure = spy
    return sys_, out


def test_all_alive_declares_nothing():
    sys_, out = _declarations(small())
    run = sys_.run()
    assert out == [] and not run.final["promotions"]


@pytest.mark.parametrize("at", [5_000_000, 23_456_789, 40_000_001])
def test_detection_bound(at):
    cfg = small(**{"scenario": [{"op": "fail_nf", "nf": "nf0", "at_ns": at}]})
    sys_, out = _declarations(cfg)
    sys_.run()
    (nf, t), = out
    assert nf == "nf0"
    assert at < t <= at + 3 * 10_000_000 + 10_000_000


def test_node_crash_declares_both_primaries_in_one_tick():
    cfg = small(**{"nf.count": 4, "nodes.count": 2, "traffic.packets": 1000,
                   "scenario": [{"op": "fail_node", "node": "node0", "at_ns": 20_000_000}]})
    sys_, out = _declarations(cfg)
    run = sys_.run()
    times = {nf: t for nf, t in out}
    assert times["nf0"] == times["nf2"]
    assert run.final["violations"] == []


def test_failover_keeps_placement_and_passes():
    cfg = small(**{"nf.count": 2, "scenario": [{"op": "fail_nf", "nf": "nf1",
                                                  "at_ns": 20_000_000}]})
    run, rep = run_and_check(cfg)
    assert rep.passed, rep.findings[:3]
    assert "placement" not in rep.checks_failed()
    promoted = [e.actor for e in run.trace if e.kind is EventKind.PROMOTION]
    assert promoted == ["nf3"]
    # nf3 sits on node0, so the spare must come from node1
    assert ["nf3", "nf5"] in [p[1:] for p in run.final["pairs"]]


def test_no_spare_degrades():
    cfg = small(**{"nf.count": 1, "control.spare_nfs": 0,
                   "scenario": [{"op": "fail_nf", "nf": "nf0", "at_ns": 20_000_000}]})
    run, rep = run_and_check(cfg)
    assert rep.passed
    assert run.final["degraded"] == ["nf1"]


def test_secondary_failure_resyncs_to_spare():
    cfg = small(**{"nf.count": 1, "scenario": [{"op": "fail_nf", "nf": "nf1",
                                                  "at_ns": 20_000_000}]})
    run, rep = run_and_check(cfg)
    assert rep.passed
    # nf2 shares node0 with the primary; nf3 is the only valid spare
    assert ["nf0", "nf3"] in [p[1:] for p in run.final["pairs"]]


def test_failed_nf_without_flows():
    cfg = small(**{"nf.count": 3, "traffic.flows": 1, "traffic.packets": 200,
                   "scenario": [{"op": "fail_nf", "nf": "nf2", "at_ns": 5_000_000}]})
    run, rep = run_and_check(cfg)
    assert rep.passed
    assert set(run.final["rules"].values()) == {"nf0"}


def test_failover_during_unrelated_migration():
    cfg = small(**{"nf.count": 3, "traffic.flows": 6, "traffic.packets": 1500,
                   "scenario": [{"op": "migrate", "flows": [0], "dst": "nf1",
                                 "at_ns": 30_000_000},
                                {"op": "fail_nf", "nf": "nf2", "at_ns": 30_000_000}]})
    sys_ = System(cfg)
    run = sys_.run()
    from nfstate.harness.experiments import verdict
    rep = verdict(run)
    assert rep.passed, rep.findings[:3]
    assert run.final["rules"][str(run.flow_ids[0])] == "nf1"
    assert run.final["promotions"]


def test_three_flow_scale_is_sequential():
    cfg = small(**{"nf.count": 2, "traffic.packets": 1500,
                   "scenario": [{"op": "migrate", "flows": list(range(6)), "dst": "nf1",
                                 "at_ns": 30_000_000}]})
    sys_ = System(cfg)
    run = sys_.run()
    from nfstate.harness.experiments import verdict
    assert verdict(run).passed
    ev = sys_.controller.scale_events
    # round-robin placement gives nf0 three of the six flows
    assert len(ev) == 3 and all(e[1:4:2] == ("nf0", "nf1") for e in ev)
    starts = [e.time for e in run.trace if e.kind is EventKind.MIGRATION_START]
    dones = [e.time for e in run.trace if e.kind is EventKind.MIGRATION_DONE]
    assert all(d <= s for d, s in zip(dones, starts[1:]))


def test_overload_trigger_fires_scale_event():
    cfg = small(**{"nf.count": 2, "traffic.flows": 8, "traffic.packets": 3000,
                   "traffic.rate_pps": 30_000, "control.overload_policy": True})
    sys_ = System(cfg)
    run = sys_.run()
    from nfstate.harness.experiments import verdict
    assert sys_.controller.scale_events
    assert verdict(run).passed


def test_scale_to_self_rejected():
    sys_ = System(small())
    with pytest.raises(ValueError):
        sys_.controller.orchestrate_scale("nf0", [1], "nf0")
