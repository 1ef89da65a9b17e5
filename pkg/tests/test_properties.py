"""Randomised whole-system properties checked against the reference oracle."""

from hypothesis import HealthCheck, given, settings, strategies as st

from nfstate.harness.config import HOOK_POINTS, load_config
from nfstate.harness.experiments import run_experiment
from nfstate.model import EventKind

SETTINGS = settings(max_examples=40, deadline=None,
                    suppress_health_check=[HealthCheck.too_slow])


@st.composite
def configs(draw):
    n = draw(st.integers(1, 3))
    batch = draw(st.sampled_from([5, 10, 20]))
    d = {
        "seed": draw(st.integers(0, 10_000)),
        "nf.count": n,
        "nf.batch_size": batch,
        "nf.buffer_batches": draw(st.integers(1, 5)),
        "traffic.packets": draw(st.integers(50, 600)),
        "traffic.flows": draw(st.integers(1, 10)),
        "traffic.rate_pps": draw(st.sampled_from([5_000, 10_000, 30_000])),
        "traffic.updates_per_batch": draw(st.integers(0, min(3, batch))),
        "net.reorder_prob": draw(st.sampled_from([0.0, 0.1, 0.3])),
        "net.jitter_ns": draw(st.sampled_from([0, 50_000])),
        "consensus.impl": draw(st.sampled_from(["sequencer", "quorum"])),
        "control.spare_nfs": draw(st.integers(0, 2)),
    }
    kind = draw(st.sampled_from(["none", "crash", "fail", "migrate", "pause"]))
    victim = f"nf{draw(st.integers(0, n - 1))}"
    if kind == "crash":
        d["scenario"] = [{"op": "crash_on", "nf": victim, "point": draw(st.sampled_from(HOOK_POINTS)),
                          "count": draw(st.integers(1, 20))}]
    elif kind == "fail":
        who = draw(st.sampled_from([victim, f"nf{n + int(victim[2:])}"]))
        d["scenario"] = [{"op": "fail_nf", "nf": who,
                          "at_ns": draw(st.integers(1, 60)) * 1_000_000}]
    elif kind == "migrate" and n > 1:
        d["scenario"] = [{"op": "migrate", "flows": [0, 1], "dst": f"nf{(int(victim[2:]) + 1) % n}",
                          "at_ns": draw(st.integers(1, 40)) * 1_000_000}]
    elif kind == "pause":
        d["scenario"] = [{"op": "pause_nf", "nf": f"nf{n + int(victim[2:])}",
                          "at_ns": draw(st.integers(1, 40)) * 1_000_000,
                          "duration_ns": draw(st.integers(1, 20)) * 1_000_000}]
    return load_config(d)


@SETTINGS
@given(configs())
def test_every_schedule_matches_oracle(cfg):
    res = run_experiment(cfg)
    assert res.passed, [(f.check, f.message) for f in res.report.findings[:5]]


@SETTINGS
@given(configs())
def test_trace_causality(cfg):
    trace = run_experiment(cfg).run.trace
    seen_in, processed = set(), set()
    last_time = {}
    for e in trace:
        assert e.time >= last_time.get(e.actor, 0)
        last_time[e.actor] = e.time
        if e.kind is EventKind.NF_IN:
            seen_in.add(e.packet)
        elif e.kind is EventKind.PROCESSED:
            assert e.packet in seen_in
            processed.add(e.packet)
        elif e.kind is EventKind.RELEASED:
            assert e.packet in processed


@settings(max_examples=10, deadline=None)
@given(configs())
def test_runs_are_deterministic(cfg):
    assert run_experiment(cfg).trace_hash() == run_experiment(cfg).trace_hash()


@SETTINGS
@given(configs())
def test_duplication_and_stamp_order(cfg):
    run = run_experiment(cfg).run
    dup = {}
    for e in run.trace:
        if e.kind is EventKind.DUP_OUT:
            dup[e.packet] = dup.get(e.packet, 0) + 1
    ins = {}
    for e in run.trace:
        if e.kind is EventKind.SWITCH_IN:
            ins[e.packet] = ins.get(e.packet, 0) + 1
    degraded = bool(run.final["degraded"])
    for pid, n in ins.items():
        assert dup[pid] == 2 * n or degraded
    last = {}
    for p in run.packets:
        assert p.counter > last.get(p.flow_id, 0)
        last[p.flow_id] = p.counter
