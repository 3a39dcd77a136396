from __future__ import annotations

import socket
import time

import pytest

from lpfarm.lpf.core import PASSIVE, ModuleSpec
from lpfarm.lpf.message import Address, Message
from lpfarm.lpf.tasks import Wait
from lpfarm.lpf.testing import Echo, Recorder
from lpfarm.net.client import Client, ClientTimeout
from lpfarm.net.proxy import Proxy
from lpfarm.net.transport import BindFailure, MpxServer, StaleRoute
from lpfarm.net.wire import HEADER, encode_message


def poll_until(server, n, timeout=2.0):
    out = []
    deadline = time.monotonic() + timeout
    while len(out) < n and time.monotonic() < deadline:
        out += server.poll()
        time.sleep(0.005)
    return out


def ping(i, frm="c"):
    return Message("Ping", Address(module="srv"), Address(module=frm), {"i": i})


@pytest.fixture
def server():
    s = MpxServer("127.0.0.1", 0)
    yield s
    s.close()


def test_no_clients(server):
    assert server.poll() == []


def test_bind_failure(server):
    with pytest.raises(BindFailure):
        MpxServer("127.0.0.1", server.port)


def test_three_clients_in_order(server):
    socks = [socket.create_connection(("127.0.0.1", server.port)) for _ in range(3)]
    for k, s in enumerate(socks):
        s.sendall(b"".join(encode_message(ping(i, f"c{k}")) for i in range(3)))
    got = poll_until(server, 9)
    assert len(got) == 9
    for k in range(3):
        assert [m.body["i"] for m in got if m.source.module == f"c{k}"] == [0, 1, 2]
    for s in socks:
        s.close()


def test_frames_per_poll_bound():
    server = MpxServer("127.0.0.1", 0, frames_per_poll=32)
    try:
        s = socket.create_connection(("127.0.0.1", server.port))
        s.sendall(b"".join(encode_message(ping(i)) for i in range(50)))
        time.sleep(0.1)
        first = server.poll()
        assert len(first) == 32
        rest = poll_until(server, 18)
        assert [m.body["i"] for m in first + rest] == list(range(50))
        s.close()
    finally:
        server.close()


def test_disconnect_mid_frame(server):
    good = socket.create_connection(("127.0.0.1", server.port))
    bad = socket.create_connection(("127.0.0.1", server.port))
    frame = encode_message(ping(1, "bad"))
    bad.sendall(frame[:len(frame) // 2])
    bad.close()
    good.sendall(encode_message(ping(2, "good")))
    got = poll_until(server, 1)
    time.sleep(0.05)
    got += server.poll()
    assert [m.source.module for m in got] == ["good"]
    assert len(server.slots) == 1
    good.close()


def test_malformed_frames_close_slot(server):
    s = socket.create_connection(("127.0.0.1", server.port))
    junk = b"nope"
    s.sendall((HEADER.pack(len(junk)) + junk) * 3)
    deadline = time.monotonic() + 2
    while server.slots or server.closed_slots == 0:
        server.poll()
        if time.monotonic() > deadline:
            break
        time.sleep(0.01)
    assert server.closed_slots == 1
    s.close()


def test_route_answer_once_then_stale(server):
    c = socket.create_connection(("127.0.0.1", server.port))
    q = ping(1)
    c.sendall(encode_message(q))
    [got] = poll_until(server, 1)
    assert server.route_answer(got.reply("Pong")) is True
    with pytest.raises(StaleRoute):
        server.route_answer(got.reply("Pong"))
    assert server.route_answer(Message("X", Address(module="a"), Address(module="b"),
                                       correlation_id="unknown")) is False
    c.settimeout(2)
    data = c.recv(65536)
    assert b"Pong" in data
    c.close()


def test_stale_route_when_client_gone(make_lpf, driver):
    lpf = make_lpf("srv")

    class Late(Recorder):
        def do(self, m):
            self.received.append(m)

    lpf.register_module(ModuleSpec("late", PASSIVE), factory=Late)
    c = Client()
    c.send(Address("late", host=lpf.host, port=lpf.port), "Q")
    late = lpf.modules["late"]
    assert driver.run_until(lambda: late.received, 2)
    c.close()
    driver.run_for(0.1)
    lpf.post(late.received[0].reply("A"))
    lpf.post(late.received[0].reply("A"))
    driver.run_for(0.1)
    assert any("StaleRoute" in a.text for a in lpf.alarms if a.level == "WARNING")


def test_client_request_reply(make_lpf, driver):
    lpf = make_lpf("srv")
    lpf.register_module(ModuleSpec("echo", PASSIVE), factory=Echo)
    driver.start()
    with Client() as c:
        ans = c.request(Address("echo", host=lpf.host, port=lpf.port), "Ping", {"x": 1})
        assert ans.verb == "Echoed" and ans.body == {"x": 1}
        with pytest.raises(ClientTimeout):
            c.request(Address("nobody", host=lpf.host, port=lpf.port), "Ping", timeout=0.3)
    driver.stop()


def test_proxy_to_remote_echo(make_lpf, driver):
    a = make_lpf("a")
    b = make_lpf("b")
    b.register_module(ModuleSpec("echo", PASSIVE), factory=Echo)
    a.register_module(ModuleSpec("echo", PASSIVE, {"service": "echo", "host": b.host, "port": b.port}),
                      factory=Proxy)

    def caller():
        return (yield Wait(Message("Ping", Address(module="echo"), Address(module="caller"), {"v": 7}), 3))

    t = a.spawn(caller())
    ans = driver.wait_task(t, 5)
    assert ans.verb == "Echoed" and ans.body == {"v": 7}
    assert b.modules["echo"].seen[0].hop_count == 1


def test_remote_dead_reports_unreachable(make_lpf, driver):
    a = make_lpf("a")
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        dead = s.getsockname()[1]
    a.register_module(ModuleSpec("svc", PASSIVE, {"service": "svc", "host": "127.0.0.1", "port": dead}),
                      factory=Proxy)
    t = a.spawn((yield_once(Message("Ping", Address(module="svc"), Address(module="c")))))
    ans = driver.wait_task(t, 8)
    assert ans.verb == "Undeliverable"
    assert "RemoteUnreachable" in ans.body["cause"]
    assert any("RemoteUnreachable" in al.text for al in a.alarms if al.level == "ERROR")


def yield_once(m):
    return (yield Wait(m, 5))


def test_forward_increments_hops_and_stamps_source(make_lpf, driver):
    a = make_lpf("a")
    b = make_lpf("b")
    b.register_module(ModuleSpec("rec", PASSIVE), factory=Recorder)
    a.post(Message("Hi", Address("rec", host=b.host, port=b.port), Address(module="x"), hop_count=2))
    rec = b.modules["rec"]
    assert driver.run_until(lambda: rec.received, 3)
    m = rec.received[0]
    assert m.hop_count == 3
    assert (m.source.host, m.source.port) == (a.host, a.port)


def test_link_loss_resumes_waiter(make_lpf, driver):
    a = make_lpf("a")
    b = make_lpf("b")

    class Sink(Recorder):
        pass

    b.register_module(ModuleSpec("sink", PASSIVE), factory=Sink)
    t = a.spawn(yield_once(Message("Q", Address("sink", host=b.host, port=b.port), Address(module="c"))))
    assert driver.run_until(lambda: b.modules["sink"].received, 3)
    b.stop()
    ans = driver.wait_task(t, 5)
    assert ans.verb == "Undeliverable" and "lost" in ans.body["cause"]
