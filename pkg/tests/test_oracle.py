import hashlib
import struct

import pytest

from vecsim.oracle import (
    Availability,
    Constant,
    FailAfter,
    OracleDirectory,
    OracleEndpoint,
    SeededStream,
    SteppedFeed,
    derive_secret_key,
    handle_request,
    reset_counters,
    seeded_stream_value,
)
from vecsim.verifiable_call import (
    ExternalCallRequest,
    Freshness,
    VerifiableExternalCall,
    public_key_of,
    verify_external_call,
)

NONCE = bytes(range(16))


def one(behavior, uri="oracle://t"):
    return OracleDirectory([OracleEndpoint.create(uri, behavior)])


def test_constant_answer_is_signed_and_echoes_nonce():
    d = one(Constant(b"\x2a"))
    req = ExternalCallRequest("oracle://t", b"q", NONCE, Freshness.FRESH)
    resp = handle_request(d, req, 5)
    assert resp.payload == b"\x2a"
    assert resp.response_nonce == NONCE
    assert resp.responder_timestamp == 5
    call = VerifiableExternalCall(req, d["oracle://t"].public_key, resp)
    assert verify_external_call(call, 5, 0).ok


def test_seeded_stream_follows_its_formula():
    d = one(SeededStream(3))
    req = ExternalCallRequest("oracle://t")
    got = [handle_request(d, req, 0).payload for _ in range(3)]
    for i, value in enumerate(got):
        expected = hashlib.sha256(b"vecsim/seeded-stream" + struct.pack(">QQ", 3, i)).digest()
        assert value == expected == seeded_stream_value(3, i)


def test_stepped_feed_advances_with_time():
    d = one(SteppedFeed((b"a", b"b", b"c"), ticks_per_step=10))
    req = ExternalCallRequest("oracle://t")
    assert [handle_request(d, req, t).payload for t in (0, 9, 10, 25, 1000)] == [b"a", b"a", b"b", b"c", b"c"]


def test_fail_after_goes_silent_but_still_counts():
    d = one(FailAfter(2, b"\x01"))
    req = ExternalCallRequest("oracle://t")
    out = [handle_request(d, req, 0) for _ in range(4)]
    assert [r is not None for r in out] == [True, True, False, False]
    assert d.invocations() == {"oracle://t": 4}


def test_down_endpoint_is_not_contacted():
    d = one(Constant(b"x"))
    d["oracle://t"].availability = Availability.DOWN
    assert handle_request(d, ExternalCallRequest("oracle://t"), 0) is None
    assert d.total_invocations() == 0


def test_all_down_restores_availability():
    d = one(Constant(b"x"))
    with d.all_down():
        assert handle_request(d, ExternalCallRequest("oracle://t"), 0) is None
    assert handle_request(d, ExternalCallRequest("oracle://t"), 0) is not None
    assert d.total_invocations() == 1


def test_unknown_uri_returns_none():
    assert handle_request(one(Constant(b"x")), ExternalCallRequest("oracle://nope"), 0) is None


def test_keys_are_derived_deterministically():
    e = OracleEndpoint.create("oracle://t", Constant(b""))
    assert e.secret_key == derive_secret_key("oracle://t")
    assert e.public_key == public_key_of(e.secret_key)
    assert OracleEndpoint.create("oracle://u", Constant(b"")).public_key != e.public_key


def test_duplicate_endpoint_rejected_and_counters_reset():
    d = one(Constant(b"x"))
    with pytest.raises(ValueError):
        d.add(OracleEndpoint.create("oracle://t", Constant(b"y")))
    handle_request(d, ExternalCallRequest("oracle://t"), 0)
    reset_counters(d)
    assert d.total_invocations() == 0


def test_stepped_feed_validates_arguments():
    with pytest.raises(ValueError):
        SteppedFeed(())
    with pytest.raises(ValueError):
        SteppedFeed((b"a",), ticks_per_step=0)


def test_seeded_stream_distinct_and_replayable():
    def three():
        d = one(SeededStream(7))
        return [handle_request(d, ExternalCallRequest("oracle://t"), 0).payload for _ in range(3)]

    first = three()
    assert len(set(first)) == 3
    assert three() == first


def test_reset_counts():
    reset_counters(OracleDirectory())
    d = one(Constant(b"x"))
    for _ in range(3):
        handle_request(d, ExternalCallRequest("oracle://t"), 0)
    reset_counters(d)
    for _ in range(2):
        handle_request(d, ExternalCallRequest("oracle://t"), 0)
    assert d.invocations() == {"oracle://t": 2}


def test_response_verifies_only_under_its_own_endpoint_key():
    d = OracleDirectory([OracleEndpoint.create(f"oracle://e{i}", Constant(b"v")) for i in range(4)])
    for endpoint in d:
        req = ExternalCallRequest(endpoint.endpoint_uri)
        resp = handle_request(d, req, 3)
        for other in d:
            call = VerifiableExternalCall(req, other.public_key, resp)
            assert verify_external_call(call, 3, None).ok == (other is endpoint)


def test_total_is_sum_of_per_endpoint_counts():
    d = OracleDirectory([OracleEndpoint.create(f"oracle://e{i}", Constant(b"v")) for i in range(3)])
    for i in range(6):
        handle_request(d, ExternalCallRequest(f"oracle://e{i % 3 if i < 5 else 0}"), 0)
    assert d.total_invocations() == sum(d.invocations().values()) == 6
