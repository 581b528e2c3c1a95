"""Shared plumbing for the five grid components."""

from __future__ import annotations

import logging
import os
import threading
from pathlib import Path

from .config import RunConfig
from .core import EventKind, Journal, journal_path
from .errors import InvalidRequest
from .transport import Kind, Message

log = logging.getLogger(__name__)


class Component:
    """Message handler with a journal, a runtime and an on/off lifecycle.

    Subclasses implement ``on_<kind>`` methods taking the request payload.
    """

    name = "component"

    def __init__(self, runtime, config: RunConfig, name: str | None = None):
        self.name = name or self.name
        self.rt = runtime
        self.config = config
        self.run_dir = Path(config.run_dir)
        self.journal = Journal(journal_path(self.run_dir, self.name), self.name, clock=runtime.now_ms)
        self.faults = config.fault_plan
        self.address = f"inproc:{self.name}"
        self.stopped = threading.Event()

    def handle(self, msg: Message) -> dict:
        method = getattr(self, f"on_{msg.kind.value.lower()}", None)
        if method is None:
            raise InvalidRequest(f"{self.name} does not handle {msg.kind}", kind=msg.kind)
        return method(msg.payload) or {}

    def on_ping(self, payload: dict) -> dict:
        return {"component": self.name, "describe": self.describe()}

    def on_shutdown(self, payload: dict) -> dict:
        self.stop()
        return {"stopped": self.name}

    def describe(self) -> dict:
        return {
            "component": self.name,
            "address": self.address,
            "pid": os.getpid(),
            "mode": self.rt.mode,
            "journal": str(journal_path(self.run_dir, self.name).relative_to(self.run_dir)),
            "config": self.config_section(),
        }

    def config_section(self) -> dict:
        return {}

    def call(self, target: str, kind: Kind, payload: dict | None = None, timeout_ms: int | None = None) -> dict:
        return self.rt.call(self.name, target, kind, payload, timeout_ms)

    def start(self) -> None:
        self.journal.append(EventKind.COMPONENT_STARTED, detail={"mode": self.rt.mode})

    def stop(self) -> None:
        if self.stopped.is_set():
            return
        self.stopped.set()
        self.rt.cancel(self.name)
        if hasattr(self.rt, "unregister"):
            self.rt.unregister(self.name)
        try:
            self.journal.append(EventKind.COMPONENT_STOPPED)
        except Exception:
            pass
        self.journal.close()

    def error(self, job_id: int | None = None, **detail) -> None:
        try:
            self.journal.append(EventKind.ERROR, job_id=job_id, detail=detail)
        except Exception:
            log.warning("%s: could not journal error %s", self.name, detail)
