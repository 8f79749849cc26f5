import socket
import struct
import zlib

import pytest
from hypothesis import given, strategies as st

from mgdispatch import scenarios, sim
from mgdispatch.netharness import HarnessError, LinkState, run_networked
from mgdispatch.netharness.harness import drop_policy
from mgdispatch.netharness.wire import (CONTROLLER_ID, Codec, MsgType, Phase, WireError,
                                        WireMessage, decode, decode_json, encode, encode_json, tick)
from tracetools import max_trace_diff

msgs = st.builds(
    WireMessage,
    st.sampled_from([MsgType.SETPOINT_PLAN, MsgType.TICK, MsgType.ACK, MsgType.HELLO]),
    st.integers(0, 2**32 - 1), st.integers(0, 2**16 - 1),
    st.lists(st.floats(allow_nan=False), max_size=20),
)


@given(msgs)
def test_wire_round_trip(msg):
    assert decode(encode(msg)) == msg
    assert decode_json(encode_json(msg)) == msg


def test_frame_layout():
    m = WireMessage(MsgType.MEASUREMENT, 7, 2, (4.5,))
    raw = encode(m)
    assert raw[:4] == struct.pack(">I", len(raw) - 4)
    body = raw[4:-4]
    assert body == struct.pack(">BBIHHd", 1, 2, 7, 2, 1, 4.5)
    assert raw[-4:] == struct.pack(">I", zlib.crc32(body))
    assert tick(3, Phase.APPLY).unit_id == CONTROLLER_ID


def test_corruption_detected():
    raw = bytearray(encode(WireMessage(MsgType.SETPOINT_PLAN, 1, 0, (1.0, 2.0))))
    raw[12] ^= 0x01
    with pytest.raises(WireError, match="checksum"):
        decode(bytes(raw))
    with pytest.raises(WireError):
        decode(bytes(raw[:-1]))
    line = encode_json(WireMessage(MsgType.ACK, 1, 0, (0.0,))).replace(b'"k": 1', b'"k": 2')
    with pytest.raises(WireError, match="checksum"):
        decode_json(line)
    with pytest.raises(WireError):
        WireMessage(MsgType.MEASUREMENT, 0, 0, (1.0, 2.0))
    with pytest.raises(ValueError):
        Codec("xml")


def test_drop_policy_examples():
    link = LinkState(scenarios.case1())
    k_out = 44  # 11 h
    plan_b2 = WireMessage(MsgType.SETPOINT_PLAN, k_out, 1, (0.0,) * 13)
    assert drop_policy(link, plan_b2) == "drop"
    assert drop_policy(link, WireMessage(MsgType.MEASUREMENT, k_out, 1, (1.0,))) == "drop"
    assert drop_policy(link, WireMessage(MsgType.MEASUREMENT, k_out, 0, (1.0,))) == "deliver"
    assert drop_policy(link, WireMessage(MsgType.MEASUREMENT, 43, 1, (1.0,))) == "deliver"
    assert drop_policy(link, tick(k_out, Phase.SAMPLE)) == "deliver"
    # loads have no communication flag
    assert drop_policy(link, WireMessage(MsgType.AVAILABILITY, k_out, 6, (1.0,))) == "deliver"


def test_equivalence_short_case1():
    sc = scenarios.case1(4, duration=13.5)
    net = run_networked(sc)
    assert max_trace_diff(net, sim.run(sc)) <= 1e-9
    assert net.counters.conserved()
    assert net.counters.links[(1, "up")].dropped > 0
    assert net.counters.links[(1, "down")].dropped == 8
    assert net.counters.links[(0, "up")].dropped == 0
    for r in net:
        if not r.conn.A_b[1]:
            assert r.y[1] == 0.0  # dropped measurement enters the estimator as y = 0


def test_jitter_and_jsonl_do_not_change_result():
    sc = scenarios.case3(True)
    sc.duration = 3.0
    ref = sim.run(sc)
    assert max_trace_diff(run_networked(sc, jitter=0.003, jitter_seed=5), ref) <= 1e-9
    assert max_trace_diff(run_networked(sc, transport="jsonl"), ref) <= 1e-9


def test_hub_fault_drops_every_member():
    sc = scenarios.case1(0, duration=12.0)
    sc.faults = (sim.FaultEvent("hub", 3, "communication", 11.0, 11.5),)
    net = run_networked(sc)
    assert max_trace_diff(net, sim.run(sc)) <= 1e-9
    # hub 3 relays battery 3 (id 2) and PV 3 (id 5)
    assert net.counters.links[(2, "down")].dropped == 2
    assert net.counters.links[(5, "down")].dropped == 2


def test_bind_failure():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    port = s.getsockname()[1]
    try:
        sc = scenarios.case1(0, duration=0.5)
        with pytest.raises(HarnessError, match="cannot bind"):
            run_networked(sc, [("127.0.0.1", port)] + [("127.0.0.1", 0)] * 3)
        with pytest.raises(HarnessError, match="endpoints"):
            run_networked(sc, [("127.0.0.1", 0)])
    finally:
        s.close()
