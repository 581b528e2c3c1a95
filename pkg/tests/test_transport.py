import socket
import threading

import pytest
from hypothesis import given, strategies as st

from gridemu.errors import (AddressInUse, ConnectionRefused, InvalidRequest, MalformedResponse, RemoteError,
                            Timeout, UnknownJob)
from gridemu.runtime import RealtimeRuntime, SteppedRuntime
from gridemu.transport import (Endpoint, Kind, Message, Pending, call, decode, dispatch, encode, serve,
                               stepped_deliver, unwrap)

json_values = st.recursive(
    st.none() | st.booleans() | st.integers(-2**53, 2**53) | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=8), inner, max_size=4),
    max_leaves=20,
)
messages = st.builds(Message, st.integers(0, 2**31), st.text(min_size=1, max_size=12),
                     st.sampled_from(list(Kind)), st.dictionaries(st.text(max_size=8), json_values, max_size=5))


@given(messages)
def test_encode_decode_roundtrip(msg):
    line = encode(msg)
    assert line.endswith(b"\n") and line.count(b"\n") == 1
    assert decode(line) == msg


@pytest.mark.parametrize("line", [
    b"not json\n", b"[]\n", b'{"msg_id": 1}\n',
    b'{"msg_id": 1, "sender": "a", "kind": "NOPE", "payload": {}}\n',
    b'{"msg_id": "1", "sender": "a", "kind": "PING", "payload": {}}\n',
    b'{"msg_id": 1, "sender": "a", "kind": "PING", "payload": []}\n',
])
def test_decode_rejects_malformed(line):
    with pytest.raises(MalformedResponse):
        decode(line)


def test_dispatch_maps_errors_by_name():
    req = Message(4, "client", Kind.QUERY_STATUS, {"job_id": 9})

    def handler(m):
        raise UnknownJob("unknown job 9", job_id=9)

    resp = dispatch(handler, req, "central")
    assert resp.kind is Kind.ERROR and resp.msg_id == 4
    with pytest.raises(UnknownJob) as info:
        unwrap(req, resp)
    assert info.value.info == {"job_id": "9"}

    resp = dispatch(lambda m: 1 / 0, req, "central")
    with pytest.raises(RemoteError):
        unwrap(req, resp)


def test_unwrap_rejects_mismatched_id():
    req = Message(1, "c", Kind.PING)
    with pytest.raises(MalformedResponse):
        unwrap(req, Message(2, "s", Kind.PONG))


def _echo(msg):
    if msg.kind is Kind.PING:
        return {"n": msg.payload.get("n")}
    if msg.kind is Kind.SHUTDOWN:
        return {}
    raise InvalidRequest("unsupported")


def test_concurrent_calls_are_correlated():
    listener = serve(Endpoint("echo", "127.0.0.1:0"), _echo)
    try:
        results, errors = {}, []

        def worker(i):
            try:
                resp = call(listener.address, Message(i, f"c{i % 3}", Kind.PING, {"n": i}))
                results[i] = (resp.msg_id, resp.kind, resp.payload["n"])
            except Exception as exc:  # pragma: no cover - reported below
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(64)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert results == {i: (i, Kind.PONG, i) for i in range(64)}
    finally:
        listener.stop()


def test_shutdown_then_connection_refused():
    listener = serve(Endpoint("echo", "127.0.0.1:0"), _echo)
    addr = listener.address
    resp = call(addr, Message(1, "c", Kind.SHUTDOWN))
    assert resp.kind is Kind.OK
    assert not listener.running
    with pytest.raises(ConnectionRefused):
        call(addr, Message(2, "c", Kind.PING))
    listener.stop()
    listener.stop()


def test_address_in_use():
    listener = serve(Endpoint("a", "127.0.0.1:0"), _echo)
    try:
        with pytest.raises(AddressInUse):
            serve(Endpoint("b", listener.address), _echo)
    finally:
        listener.stop()


def test_timeout_on_silent_server():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(1)
    try:
        with pytest.raises(Timeout):
            call("127.0.0.1:%d" % srv.getsockname()[1], Message(1, "c", Kind.PING), timeout_ms=200)
    finally:
        srv.close()


def test_malformed_request_gets_error_envelope():
    listener = serve(Endpoint("echo", "127.0.0.1:0"), _echo)
    try:
        host, port = listener.endpoint.host_port
        with socket.create_connection((host, port), timeout=2) as s:
            s.sendall(b"garbage\n")
            reply = decode(s.makefile("rb").readline())
        assert reply.kind is Kind.ERROR and reply.payload["error"] == "MalformedResponse"
    finally:
        listener.stop()


pendings = st.lists(st.tuples(st.integers(0, 50), st.sampled_from(["a", "b", "c"]), st.integers(0, 20)),
                    max_size=40)


@given(pendings, st.integers(0, 60))
def test_stepped_deliver_total_order(items, clock):
    pending = [Pending(t, Message(i, s, Kind.TICK)) for t, s, i in items]
    out = stepped_deliver(reversed(pending), clock)
    keys = [(p.at_ms, p.message.sender, p.message.msg_id) for p in out]
    assert keys == sorted((t, s, i) for t, s, i in items if t <= clock)


def test_stepped_runtime_timers_and_cancel():
    rt = SteppedRuntime(seed=1)
    fired = []
    rt.every("a", 100, lambda: fired.append(("a", rt.now_ms())))
    rt.every("b", 150, lambda: fired.append(("b", rt.now_ms())))
    rt.advance(300)
    assert fired == [("a", 100), ("b", 150), ("a", 200), ("a", 300), ("b", 300)]
    rt.cancel("a")
    rt.advance(300)
    assert [f for f in fired if f[0] == "a"] == [("a", 100), ("a", 200), ("a", 300)]
    assert rt.now_ms() == 600


def test_stepped_runtime_guids_are_seeded():
    a, b, c = SteppedRuntime(seed=7), SteppedRuntime(seed=7), SteppedRuntime(seed=8)
    ga = [a.new_guid() for _ in range(5)]
    assert ga == [b.new_guid() for _ in range(5)]
    assert ga != [c.new_guid() for _ in range(5)]
    assert all(len(g) == 32 for g in ga) and len(set(ga)) == 5


def test_stepped_call_roundtrips_envelope():
    rt = SteppedRuntime()
    rt.register("echo", _echo)
    assert rt.call("c", "echo", Kind.PING, {"n": 3}) == {"n": 3}
    with pytest.raises(InvalidRequest):
        rt.call("c", "echo", Kind.SUBMIT_JOB, {})
    rt.unregister("echo")
    with pytest.raises(ConnectionRefused):
        rt.call("c", "echo", Kind.PING)


def test_stepped_run_until_times_out_on_virtual_clock():
    rt = SteppedRuntime()
    rt.every("t", 100, lambda: None)
    assert rt.run_until(lambda: rt.now_ms() >= 450, 1000)
    assert rt.now_ms() == 500
    assert not rt.run_until(lambda: False, 250)
    assert rt.now_ms() == 750


def test_realtime_runtime_call_and_defer():
    listener = serve(Endpoint("echo", "127.0.0.1:0"), _echo)
    rt = RealtimeRuntime({"echo": listener.address})
    try:
        assert rt.call("c", "echo", Kind.PING, {"n": 1}) == {"n": 1}
        done = threading.Event()
        rt.defer("c", done.set)
        assert done.wait(2)
        ticks = []
        rt.every("c", 20, lambda: ticks.append(1))
        threading.Event().wait(0.15)
        rt.cancel("c")
        assert ticks
    finally:
        listener.stop()
