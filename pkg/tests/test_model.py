import io
import random

import pytest
from hypothesis import given, strategies as st

from nfstate.model import EventKind, FlowKey, Packet, PacketId, Trace, TraceEvent, flow_hash

keys = st.builds(FlowKey, st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1),
                 st.integers(0, 2**16 - 1), st.integers(0, 2**16 - 1), st.integers(0, 255))


def test_flowkey_is_value_type():
    assert FlowKey(1, 2, 3, 4, 6) == FlowKey(1, 2, 3, 4, 6)
    with pytest.raises(Exception):
        FlowKey(1, 2, 3, 4, 6).src_ip = 9


@pytest.mark.parametrize("field,value", [("src_ip", 2**32), ("src_port", -1), ("protocol", 256)])
def test_flowkey_rejects_out_of_range(field, value):
    args = dict(src_ip=1, dst_ip=2, src_port=3, dst_port=4, protocol=6)
    args[field] = value
    with pytest.raises(ValueError):
        FlowKey(**args)


def test_packet_invariants():
    with pytest.raises(ValueError):
        PacketId(1, 0)
    with pytest.raises(ValueError):
        Packet(PacketId(1, 1), FlowKey(1, 2, 3, 4, 6), 0, 0)


@given(keys)
def test_single_unit_always_zero(key):
    assert flow_hash(key, 1) == 0


@given(keys, st.integers(1, 64))
def test_flow_hash_deterministic_and_in_range(key, units):
    a = flow_hash(key, units)
    assert a == flow_hash(key, units)
    assert 0 <= a < units


def test_flow_hash_six_units_stable():
    k = FlowKey(0x0A000001, 0x0A800001, 1025, 9000, 17)
    assert flow_hash(k, 6) == flow_hash(FlowKey(0x0A000001, 0x0A800001, 1025, 9000, 17), 6)


def test_flow_hash_rejects_zero_units():
    with pytest.raises(ValueError):
        flow_hash(FlowKey(1, 2, 3, 4, 6), 0)


def test_flow_hash_distribution():
    # seeded keys; measured band 976..1024 per unit
    rng = random.Random(2024)
    counts = [0] * 10
    for _ in range(10_000):
        k = FlowKey(rng.getrandbits(32), rng.getrandbits(32), rng.getrandbits(16),
                    rng.getrandbits(16), rng.getrandbits(8))
        counts[flow_hash(k, 10)] += 1
    assert counts == [993, 1022, 983, 997, 997, 976, 999, 1009, 1000, 1024]
    assert all(700 <= c <= 1300 for c in counts)


def test_trace_event_json_fields():
    e = TraceEvent(5, "nf0", EventKind.RELEASED, PacketId(3, 4), 2)
    assert e.to_json() == ('{"time_ns":5,"actor":"nf0","kind":"Released",'
                           '"flow_id":3,"counter":4,"batch":2}')


events = st.builds(TraceEvent, st.integers(0, 10**12), st.sampled_from(["nf0", "switch"]),
                   st.sampled_from(list(EventKind)),
                   st.none() | st.builds(PacketId, st.integers(0, 2**64 - 1),
                                         st.integers(1, 2**64 - 1)),
                   st.none() | st.integers(0, 10**6))


@given(st.lists(events, max_size=20))
def test_trace_roundtrip(evs):
    t = Trace(list(evs))
    buf = io.StringIO()
    t.dump(buf)
    assert Trace.load(buf.getvalue().splitlines()).events == t.events
    assert buf.getvalue() == t.dumps()
