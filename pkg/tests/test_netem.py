import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipstream.netem import DuplexLink, Link, LinkConfig, VirtualClock, World, serialization_time


def test_serialization_of_1500_bytes_at_20mbps():
    assert serialization_time(1500, 20e6) == 600.0


def test_single_packet_delivery_time():
    link = Link(LinkConfig())
    assert link.push(b"x" * 1500, 0.0)
    assert link.poll(15_599.0) == []
    assert link.poll(15_600.0) == [(b"x" * 1500, 15_600.0)]


def test_full_queue_drops_the_1001st():
    link = Link(LinkConfig())
    results = [link.push(b"y" * 1500, 0.0) for _ in range(1001)]
    assert all(results[:1000])
    assert results[1000] is False
    assert link.tail_drops == 1


def test_queue_drains_with_time():
    link = Link(LinkConfig(buffer_capacity=2))
    assert link.push(bytes(1500), 0.0) and link.push(bytes(1500), 0.0)
    assert not link.push(bytes(1500), 0.0)
    # first packet departs at 600 us, freeing a slot
    assert link.push(bytes(1500), 600.0)


def test_total_loss_delivers_nothing():
    link = Link(LinkConfig(loss_rate=1.0))
    for i in range(50):
        link.push(b"z", float(i))
    assert link.poll(1e9) == []
    assert link.wire_drops == 50


def test_poll_is_exactly_once_and_fifo():
    link = Link(LinkConfig())
    assert link.poll(0.0) == []
    link.push(b"a" * 1500, 0.0)
    link.push(b"b" * 1500, 0.0)
    out = link.poll(1e6)
    assert [d[:1] for d, _ in out] == [b"a", b"b"]
    assert out[1][1] - out[0][1] == 600.0
    assert link.poll(1e6) == []


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 1500), st.floats(0, 5000)), min_size=1, max_size=60),
       st.floats(0, 0.5), st.integers(0, 2 ** 32))
def test_fifo_and_determinism(sends, loss, seed):
    cfg = LinkConfig(loss_rate=loss, seed=seed, buffer_capacity=20)

    def replay():
        link = Link(cfg)
        now = 0.0
        for i, (size, gap) in enumerate(sends):
            now += gap
            link.push(i.to_bytes(2, "big") * (size // 2 + 1), now)
        return link.poll(1e12)

    a, b = replay(), replay()
    assert a == b
    ids = [int.from_bytes(d[:2], "big") for d, _ in a]
    assert ids == sorted(ids)
    times = [t for _, t in a]
    assert times == sorted(times)


def test_empirical_loss_rate_within_three_sigma():
    p, n = 0.0128, 1_000_000
    link = Link(LinkConfig(rate=1e15, one_way_delay=0.0, loss_rate=p, seed=99))
    dg = bytes(100)
    for i in range(n):
        link.push(dg, float(i))
        if i % 4096 == 0:
            link.poll(float(i))
    assert link.accepted == n
    observed = link.wire_drops / n
    assert abs(observed - p) <= 3 * math.sqrt(p * (1 - p) / n)


def test_duplex_directions_have_independent_loss():
    d = DuplexLink(LinkConfig(loss_rate=0.5, seed=5))
    for i in range(200):
        d.forward.push(i.to_bytes(1, "big"), float(i))
        d.reverse.push(i.to_bytes(1, "big"), float(i))
    fw = [dg for dg, _ in d.forward.poll(1e9)]
    rv = [dg for dg, _ in d.reverse.poll(1e9)]
    assert fw != rv


def test_clock_is_monotone():
    c = VirtualClock()
    c.advance(5.0)
    with pytest.raises(ValueError):
        c.advance(4.0)


def test_invalid_config():
    with pytest.raises(ValueError):
        LinkConfig(rate=0)
    with pytest.raises(ValueError):
        LinkConfig(loss_rate=1.5)
    with pytest.raises(ValueError):
        LinkConfig(buffer_capacity=0)


class Stub:
    def __init__(self, timeout=None):
        self.timeout = timeout
        self.outbox = []
        self.got = []
        self.fired = []

    def next_timeout(self):
        return self.timeout

    def on_timeout(self, now):
        self.fired.append(now)
        self.timeout = None

    def on_datagram(self, dg, now):
        self.got.append((dg, now))

    def poll_transmit(self, now):
        out, self.outbox = self.outbox, []
        return out


def test_world_next_event_is_minimum():
    srv, cli = Stub(), Stub()
    w = World(srv, cli, DuplexLink(LinkConfig(one_way_delay=5000.0, rate=1e15)))
    assert w.next_event_time() is None
    srv.outbox.append(b"p")
    w.flush(0.0)
    assert w.next_event_time() == pytest.approx(5000.0)
    cli.timeout = 3000.0
    assert w.next_event_time() == 3000.0


def test_world_run_delivers_and_fires_timers():
    srv, cli = Stub(), Stub(timeout=1000.0)
    srv.outbox.append(b"hello")
    w = World(srv, cli, DuplexLink(LinkConfig()))
    end = w.run(until=1e6)
    assert cli.fired == [1000.0]
    assert cli.got == [(b"hello", 15_000.0 + serialization_time(5, 20e6))]
    assert end == cli.got[0][1]
