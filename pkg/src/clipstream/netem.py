"""Deterministic bottleneck-link emulation in virtual time.

Times are float microseconds. A link is a rate limiter feeding a drop-tail
FIFO, followed by an i.i.d. Bernoulli loss stage and a fixed propagation delay.
"""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, replace

US_PER_S = 1_000_000.0


@dataclass(frozen=True)
class LinkConfig:
    rate: float = 20_000_000.0  # bits/s
    one_way_delay: float = 15_000.0  # us
    buffer_capacity: int = 1000  # packets
    loss_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.rate > 0:
            raise ValueError("rate must be positive")
        if self.buffer_capacity < 1:
            raise ValueError("buffer_capacity must be >= 1")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be within [0, 1]")
        if self.one_way_delay < 0:
            raise ValueError("one_way_delay must be >= 0")

    def with_seed(self, seed: int) -> "LinkConfig":
        return replace(self, seed=seed)


def serialization_time(size: int, rate: float) -> float:
    """Microseconds needed to clock ``size`` bytes onto a ``rate`` bit/s wire."""
    return size * 8 * US_PER_S / rate


class VirtualClock:
    def __init__(self, now: float = 0.0):
        self.now = now

    def advance(self, t: float) -> None:
        if t < self.now:
            raise ValueError(f"clock cannot go backwards ({t} < {self.now})")
        self.now = t


class Link:
    """One direction of the emulated path."""

    def __init__(self, cfg: LinkConfig):
        self.cfg = cfg
        self._rng = random.Random(cfg.seed)
        self._us_per_byte = 8 * US_PER_S / cfg.rate
        self._departures: deque[float] = deque()  # departure times of queued packets
        self._last_departure = 0.0
        self._in_flight: deque[tuple[float, bytes]] = deque()
        self.accepted = 0
        self.tail_drops = 0
        self.wire_drops = 0
        self.delivered = 0
        self.bytes_accepted = 0

    def queue_length(self, now: float) -> int:
        deps = self._departures
        while deps and deps[0] <= now:
            deps.popleft()
        return len(deps)

    def push(self, datagram: bytes, now: float) -> bool:
        if self.queue_length(now) >= self.cfg.buffer_capacity:
            self.tail_drops += 1
            return False
        start = self._last_departure if self._last_departure > now else now
        departure = start + len(datagram) * self._us_per_byte
        self._last_departure = departure
        self._departures.append(departure)
        self.accepted += 1
        self.bytes_accepted += len(datagram)
        loss = self.cfg.loss_rate
        if loss and self._rng.random() < loss:
            self.wire_drops += 1
        else:
            self._in_flight.append((departure + self.cfg.one_way_delay, datagram))
        return True

    def poll(self, now: float) -> list[tuple[bytes, float]]:
        out = []
        q = self._in_flight
        while q and q[0][0] <= now:
            t, dg = q.popleft()
            out.append((dg, t))
        self.delivered += len(out)
        return out

    def next_delivery(self) -> float | None:
        return self._in_flight[0][0] if self._in_flight else None


def link_push(link: Link, datagram: bytes, now: float) -> bool:
    return link.push(datagram, now)


def link_poll(link: Link, now: float) -> list[tuple[bytes, float]]:
    return link.poll(now)


class DuplexLink:
    """Two independent directions sharing one config; each gets its own loss stream."""

    def __init__(self, cfg: LinkConfig):
        self.cfg = cfg
        self.forward = Link(cfg)  # server -> client
        self.reverse = Link(replace(cfg, seed=(cfg.seed * 0x9E3779B97F4A7C15 + 1) & 0xFFFFFFFFFFFFFFFF))


class World:
    """Two endpoints and a duplex link, stepped event by event.

    Endpoints only need ``on_datagram(bytes, now)``, ``poll_transmit(now)``,
    ``on_timeout(now)`` and ``next_timeout()``. Optional application hooks run
    after network input and before transmission at every event.
    """

    def __init__(self, server, client, link: DuplexLink, clock: VirtualClock | None = None):
        self.server = server
        self.client = client
        self.link = link
        self.clock = clock or VirtualClock()
        self.app_hooks: list = []

    def next_event_time(self) -> float | None:
        cands = (
            self.link.forward.next_delivery(),
            self.link.reverse.next_delivery(),
            self.server.next_timeout(),
            self.client.next_timeout(),
        )
        best = None
        for t in cands:
            if t is not None and (best is None or t < best):
                best = t
        return best

    def flush(self, now: float) -> None:
        for dg in self.server.poll_transmit(now):
            self.link.forward.push(dg, now)
        for dg in self.client.poll_transmit(now):
            self.link.reverse.push(dg, now)

    def step(self, now: float) -> None:
        self._step(now, self.server.next_timeout(), self.client.next_timeout())

    def _step(self, now: float, t_server, t_client) -> None:
        self.clock.advance(now)
        for dg, _ in self.link.forward.poll(now):
            self.client.on_datagram(dg, now)
        for dg, _ in self.link.reverse.poll(now):
            self.server.on_datagram(dg, now)
        # timers armed before this event; packets just processed may have moved them
        if t_server is not None and t_server <= now:
            t = self.server.next_timeout()
            if t is not None and t <= now:
                self.server.on_timeout(now)
        if t_client is not None and t_client <= now:
            t = self.client.next_timeout()
            if t is not None and t <= now:
                self.client.on_timeout(now)
        for hook in self.app_hooks:
            hook(now)
        self.flush(now)

    def run(self, until: float, stop=None) -> float:
        """Advance until ``stop()`` is true, the world goes idle, or ``until``; returns the clock."""
        clock = self.clock
        fwd, rev = self.link.forward, self.link.reverse
        server, client = self.server, self.client
        self.flush(clock.now)
        while stop is None or not stop():
            ts = server.next_timeout()
            tc = client.next_timeout()
            t = None
            for c in (fwd.next_delivery(), rev.next_delivery(), ts, tc):
                if c is not None and (t is None or c < t):
                    t = c
            if t is None or t > until:
                break
            if t < clock.now:
                t = clock.now
            self._step(t, ts, tc)
        return clock.now


def next_event_time(world: World) -> float | None:
    return world.next_event_time()
