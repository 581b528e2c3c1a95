"""FIFO batch queue placing agent startup scripts onto worker slots."""

from __future__ import annotations

import enum
import threading
from dataclasses import dataclass, field

from .component import Component
from .core import EventKind
from .errors import DuplicateAgent, InvalidRequest, TransportError, UnknownAgent, WorkerUnreachable, WrongState
from .transport import Kind


class EntryState(str, enum.Enum):
    QUEUED = "QUEUED"
    SCHEDULED = "SCHEDULED"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


@dataclass(frozen=True)
class AgentStartupScript:
    agent_id: str
    central_endpoint: str
    worker_env: dict = field(default_factory=dict)
    created_at: int = 0

    def to_dict(self) -> dict:
        return {"agent_id": self.agent_id, "central_endpoint": self.central_endpoint,
                "worker_env": dict(self.worker_env), "created_at": self.created_at}

    @classmethod
    def from_dict(cls, d: dict) -> "AgentStartupScript":
        return cls(str(d["agent_id"]), str(d.get("central_endpoint", "")),
                   dict(d.get("worker_env") or {}), int(d.get("created_at", 0)))


@dataclass
class QueueEntry:
    script: AgentStartupScript
    state: EntryState
    submitted_at: int
    scheduled_at: int | None = None
    assigned_slot: tuple[str, int] | None = None


@dataclass
class SlotState:
    total_slots: int
    busy: set = field(default_factory=set)
    address: str = ""

    @property
    def busy_slots(self) -> int:
        return len(self.busy)

    def free_slot(self) -> int | None:
        return next((i for i in range(self.total_slots) if i not in self.busy), None)


class BatchQueue(Component):
    name = "schedd"

    def __init__(self, runtime, config, name: str | None = None):
        super().__init__(runtime, config, name)
        self._lock = threading.RLock()
        self._tick_lock = threading.Lock()
        self.entries: dict[str, QueueEntry] = {}  # insertion order is FIFO order
        self.slots: dict[str, SlotState] = {}

    def config_section(self) -> dict:
        return {"port": self.config.schedd.port, "tick_ms": self.config.schedd.tick_ms}

    def start(self) -> None:
        super().start()
        self.rt.every(self.name, self.config.schedd.tick_ms, self.schedule_tick)

    def register_worker(self, worker: str, slots: int, address: str = "") -> None:
        with self._lock:
            state = self.slots.get(worker)
            if state is None:
                self.slots[worker] = SlotState(int(slots), set(), address)
            else:
                state.total_slots, state.address = int(slots), address
            self.journal.append(EventKind.WORKER_ANNOUNCED, detail={"worker": worker, "slots": slots})
        if address and hasattr(self.rt, "set_endpoint"):
            self.rt.set_endpoint(worker, address)

    def enqueue(self, script: AgentStartupScript) -> int:
        with self._lock:
            if script.agent_id in self.entries:
                raise DuplicateAgent(f"agent {script.agent_id} already queued", agent=script.agent_id)
            self.entries[script.agent_id] = QueueEntry(script, EntryState.QUEUED, self.rt.now_ms())
            position = sum(1 for e in self.entries.values() if e.state is EntryState.QUEUED)
            self.journal.append(EventKind.AGENT_QUEUED, detail={"agent": script.agent_id, "position": position})
        self.rt.defer(self.name, self.schedule_tick)
        return position

    def _place(self) -> list[tuple[QueueEntry, str, int]]:
        placed = []
        with self._lock:
            for entry in self.entries.values():
                if entry.state is not EntryState.QUEUED:
                    continue
                target = next(((w, s.free_slot()) for w, s in sorted(self.slots.items())
                               if s.free_slot() is not None), None)
                if target is None:
                    break  # strict FIFO, no backfill
                worker, slot = target
                self.slots[worker].busy.add(slot)
                entry.state = EntryState.SCHEDULED
                entry.scheduled_at = self.rt.now_ms()
                entry.assigned_slot = (worker, slot)
                self.journal.append(EventKind.AGENT_SCHEDULED,
                                    detail={"agent": entry.script.agent_id, "worker": worker, "slot": slot})
                placed.append((entry, worker, slot))
        return placed

    def schedule_tick(self) -> list[tuple[str, str, int]]:
        if self.stopped.is_set():
            return []
        with self._tick_lock:
            placements = []
            for entry, worker, slot in self._place():
                try:
                    self.call(worker, Kind.START_AGENT, {"script": entry.script.to_dict(), "slot": slot})
                except Exception as exc:
                    self._requeue(entry, worker, slot, exc)
                    continue
                placements.append((entry.script.agent_id, worker, slot))
            return placements

    def _requeue(self, entry: QueueEntry, worker: str, slot: int, exc: Exception) -> None:
        with self._lock:
            self.slots[worker].busy.discard(slot)
            entry.state = EntryState.QUEUED
            entry.scheduled_at = entry.assigned_slot = None
            self.journal.append(EventKind.AGENT_REQUEUED,
                                detail={"agent": entry.script.agent_id, "worker": worker, "slot": slot,
                                        "reason": str(exc)})
        if isinstance(exc, TransportError):
            self.error(stage="schedule", agent=entry.script.agent_id,
                       reason=str(WorkerUnreachable(f"{worker}: {exc}")))

    def complete_agent(self, agent_id: str, outcome: EntryState | str) -> None:
        outcome = EntryState(outcome)
        if outcome not in (EntryState.COMPLETED, EntryState.FAILED):
            raise InvalidRequest(f"outcome must be COMPLETED or FAILED, not {outcome}")
        with self._lock:
            entry = self.entries.get(agent_id)
            if entry is None:
                raise UnknownAgent(f"unknown agent {agent_id}", agent=agent_id)
            if entry.state is not EntryState.SCHEDULED:
                raise WrongState(f"agent {agent_id} is {entry.state.value}, not SCHEDULED", agent=agent_id)
            entry.state = outcome
            worker, slot = entry.assigned_slot
            self.slots[worker].busy.discard(slot)
            kind = EventKind.AGENT_COMPLETED if outcome is EntryState.COMPLETED else EventKind.AGENT_FAILED
            self.journal.append(kind, detail={"agent": agent_id, "worker": worker, "slot": slot})
        self.rt.defer(self.name, self.schedule_tick)

    def counts(self) -> dict:
        with self._lock:
            tally = {s.value.lower(): 0 for s in EntryState}
            for e in self.entries.values():
                tally[e.state.value.lower()] += 1
            tally["outstanding"] = tally["queued"] + tally["scheduled"]
            tally["slots"] = {w: {"total_slots": s.total_slots, "busy_slots": s.busy_slots}
                              for w, s in self.slots.items()}
            return tally

    # wire handlers

    def on_submit_agent(self, p: dict) -> dict:
        return {"position": self.enqueue(AgentStartupScript.from_dict(p["script"]))}

    def on_complete_agent(self, p: dict) -> dict:
        self.complete_agent(str(p.get("agent_id")), p.get("outcome", ""))
        return {}

    def on_announce(self, p: dict) -> dict:
        if p.get("role") != "worker":
            raise InvalidRequest(f"schedd accepts worker announcements only, got {p.get('role')!r}")
        self.register_worker(str(p["name"]), int(p.get("slots", 0)), str(p.get("address", "")))
        return {"registered": p["name"]}

    def on_query_status(self, p: dict) -> dict:
        return self.counts()
