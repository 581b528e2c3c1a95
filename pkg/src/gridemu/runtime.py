"""Execution runtimes: wall-clock threads and sockets, or a virtual-time stepper.

Components never touch threads, clocks or sockets directly; they go through
one of these so the same component code runs in both modes.
"""

from __future__ import annotations

import itertools
import logging
import random
import threading
import time
import uuid
from collections import defaultdict
from typing import Callable

from . import transport
from .errors import ConnectionRefused
from .transport import Kind, Message, Pending

log = logging.getLogger(__name__)


class Runtime:
    mode = "abstract"

    def __init__(self, call_timeout_ms: int = 5000):
        self.call_timeout_ms = call_timeout_ms
        self._msg_ids: dict[str, itertools.count] = defaultdict(lambda: itertools.count(1))
        self._id_lock = threading.Lock()

    def next_msg_id(self, sender: str) -> int:
        with self._id_lock:
            return next(self._msg_ids[sender])

    def make_message(self, sender: str, kind: Kind, payload: dict | None = None) -> Message:
        return Message(self.next_msg_id(sender), sender, Kind(kind), payload or {})


class RealtimeRuntime(Runtime):
    mode = "realtime"

    def __init__(self, endpoints: dict[str, str] | None = None, start_epoch: float | None = None,
                 call_timeout_ms: int = 5000):
        super().__init__(call_timeout_ms)
        self.endpoints = dict(endpoints or {})
        self.start_epoch = time.time() if start_epoch is None else start_epoch
        self._timers: dict[str, list[threading.Event]] = defaultdict(list)
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        return int((time.time() - self.start_epoch) * 1000)

    def set_endpoint(self, name: str, address: str) -> None:
        with self._lock:
            self.endpoints[name] = address

    def address_of(self, name: str) -> str:
        with self._lock:
            try:
                return self.endpoints[name]
            except KeyError:
                raise ConnectionRefused(f"no known endpoint for {name!r}", component=name) from None

    def call(self, sender: str, target: str, kind: Kind, payload: dict | None = None,
             timeout_ms: int | None = None) -> dict:
        request = self.make_message(sender, kind, payload)
        response = transport.call(self.address_of(target), request,
                                  timeout_ms or self.call_timeout_ms)
        return transport.unwrap(request, response)

    def every(self, owner: str, interval_ms: int, fn: Callable[[], None]) -> None:
        stop = threading.Event()
        with self._lock:
            self._timers[owner].append(stop)

        def loop():
            while not stop.wait(interval_ms / 1000.0):
                try:
                    fn()
                except Exception:
                    log.exception("periodic task of %s failed", owner)

        threading.Thread(target=loop, name=f"timer-{owner}", daemon=True).start()

    def defer(self, owner: str, fn: Callable[[], None]) -> None:
        def run():
            try:
                fn()
            except Exception:
                log.exception("deferred task of %s failed", owner)

        threading.Thread(target=run, name=f"task-{owner}", daemon=True).start()

    def cancel(self, owner: str) -> None:
        with self._lock:
            for stop in self._timers.pop(owner, []):
                stop.set()

    def sleep(self, ms: int) -> None:
        time.sleep(ms / 1000.0)

    def new_guid(self) -> str:
        return uuid.uuid4().hex


class SteppedRuntime(Runtime):
    """Single-threaded discrete-event runtime under a virtual millisecond clock.

    Calls are delivered inline. Timers and deferred tasks become pending
    TICK messages released in :func:`transport.stepped_deliver` order, so a
    run is a pure function of its inputs and seed.
    """

    mode = "stepped"

    def __init__(self, seed: int = 0, call_timeout_ms: int = 5000, trace: bool = False):
        super().__init__(call_timeout_ms)
        self.clock = 0
        self.handlers: dict[str, transport.Handler] = {}
        self.pending: list[Pending] = []
        self._cancelled: set[str] = set()
        self._rng = random.Random(seed)
        self.trace: list[tuple[int, str, str, str, int]] | None = [] if trace else None

    def now_ms(self) -> int:
        return self.clock

    def register(self, name: str, handler: transport.Handler) -> None:
        self.handlers[name] = handler
        self._cancelled.discard(name)

    def unregister(self, name: str) -> None:
        self.handlers.pop(name, None)

    def address_of(self, name: str) -> str:
        if name not in self.handlers:
            raise ConnectionRefused(f"no in-process endpoint for {name!r}", component=name)
        return f"inproc:{name}"

    def call(self, sender: str, target: str, kind: Kind, payload: dict | None = None,
             timeout_ms: int | None = None) -> dict:
        request = self.make_message(sender, kind, payload)
        handler = self.handlers.get(target)
        if handler is None:
            raise ConnectionRefused(f"{target!r} is not accepting connections", component=target)
        if self.trace is not None:
            self.trace.append((self.clock, sender, target, request.kind.value, request.msg_id))
        # same envelope discipline as the socket path
        request = transport.decode(transport.encode(request))
        response = transport.decode(transport.encode(transport.dispatch(handler, request, target)))
        return transport.unwrap(request, response)

    def _schedule(self, owner: str, at_ms: int, task: str, action: Callable[[], None]) -> None:
        msg = self.make_message(owner, Kind.TICK, {"task": task})
        self.pending.append(Pending(at_ms, msg, action))

    def every(self, owner: str, interval_ms: int, fn: Callable[[], None]) -> None:
        def fire():
            if owner in self._cancelled:
                return
            try:
                fn()
            except Exception:
                log.exception("periodic task of %s failed", owner)
            if owner not in self._cancelled:
                self._schedule(owner, self.clock + interval_ms, "timer", fire)

        self._schedule(owner, self.clock + interval_ms, "timer", fire)

    def defer(self, owner: str, fn: Callable[[], None]) -> None:
        def run():
            try:
                fn()
            except Exception:
                log.exception("deferred task of %s failed", owner)

        self._schedule(owner, self.clock, "task", run)

    def cancel(self, owner: str) -> None:
        self._cancelled.add(owner)
        self.pending = [p for p in self.pending if p.message.sender != owner]

    def sleep(self, ms: int) -> None:
        self.clock += max(0, int(ms))

    def new_guid(self) -> str:
        return uuid.UUID(int=self._rng.getrandbits(128), version=4).hex

    # driving the simulation

    def next_event_ms(self) -> int | None:
        return min((p.at_ms for p in self.pending), default=None)

    def step(self) -> bool:
        """Deliver every item due at the next event time. False when idle."""
        nxt = self.next_event_ms()
        if nxt is None:
            return False
        self.clock = max(self.clock, nxt)
        batch = transport.stepped_deliver(self.pending, self.clock)
        due = {id(p) for p in batch}
        self.pending = [p for p in self.pending if id(p) not in due]
        for item in batch:
            if item.message.sender in self._cancelled:
                continue
            if self.trace is not None:
                self.trace.append((self.clock, item.message.sender, item.message.sender,
                                   item.message.payload.get("task", ""), item.message.msg_id))
            item.action()
        return True

    def advance(self, ms: int) -> None:
        target = self.clock + max(0, int(ms))
        while True:
            nxt = self.next_event_ms()
            if nxt is None or nxt > target:
                break
            self.step()
        self.clock = max(self.clock, target)

    def run_until(self, predicate: Callable[[], bool], timeout_ms: int) -> bool:
        deadline = self.clock + timeout_ms
        while not predicate():
            nxt = self.next_event_ms()
            if nxt is None or nxt > deadline:
                self.clock = max(self.clock, deadline)
                return predicate()
            self.step()
        return True
