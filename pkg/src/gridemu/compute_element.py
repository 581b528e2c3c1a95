"""Compute element: announces resources and feeds agent scripts to the batch queue."""

from __future__ import annotations

import itertools
import threading

from .batch_queue import AgentStartupScript
from .component import Component
from .core import EventKind
from .errors import CentralUnreachable, GridError, QueueUnreachable, TransportError
from .transport import Kind


class ComputeElement(Component):
    name = "ce"

    def __init__(self, runtime, config, name: str | None = None):
        super().__init__(runtime, config, name)
        self._agent_ids = itertools.count(1)
        self._cycle_lock = threading.Lock()
        self.announced = False

    def config_section(self) -> dict:
        c = self.config.ce
        return {"port": c.port, "poll_interval_ms": c.poll_interval_ms,
                "max_pending_agents": c.max_pending_agents, "slots": self.config.announced_slots}

    def start(self) -> None:
        super().start()
        self.announce_resources()
        self.rt.every(self.name, self.config.ce.poll_interval_ms, self._periodic_cycle)

    def announce_resources(self) -> dict:
        res = self.config.ce.resource_announcement
        try:
            ack = self.call("central", Kind.ANNOUNCE, {
                "role": "ce", "name": self.name, "address": self.address,
                "slots": self.config.announced_slots, "memory_mb": res.get("memory_mb", 0)})
        except TransportError as exc:
            raise CentralUnreachable(f"central unreachable: {exc}") from exc
        self.announced = True
        self.journal.append(EventKind.CE_ANNOUNCED, detail={"slots": self.config.announced_slots})
        return ack

    def _periodic_cycle(self) -> None:
        try:
            self.ce_cycle()
        except (CentralUnreachable, QueueUnreachable) as exc:
            self.error(stage="ce_cycle", reason=str(exc))

    def ce_cycle(self) -> int:
        """One poll: submit an agent per visible waiting job, within the pending cap."""
        if not self._cycle_lock.acquire(blocking=False):
            return 0
        try:
            return self._cycle()
        finally:
            self._cycle_lock.release()

    def _cycle(self) -> int:
        try:
            pending = int(self.call("schedd", Kind.QUERY_STATUS)["outstanding"])
        except TransportError as exc:
            raise QueueUnreachable(f"batch queue unreachable: {exc}") from exc
        room = self.config.ce.max_pending_agents - pending
        if room <= 0:
            return 0
        try:
            waiting = self.call("central", Kind.POLL_WAITING, {"max": room})["jobs"]
        except TransportError as exc:
            raise CentralUnreachable(f"central unreachable: {exc}") from exc
        if not waiting:
            return 0
        self.journal.append(EventKind.JOB_POLLED, detail={"waiting": len(waiting), "pending": pending})
        scripts = [self._make_script(job["job_id"]) for job in waiting]
        try:
            self.call("central", Kind.ANNOUNCE, {"role": "agents", "agent_ids": [s.agent_id for s in scripts]})
        except TransportError as exc:
            raise CentralUnreachable(f"central unreachable: {exc}") from exc
        submitted = 0
        for script in scripts:
            try:
                self.call("schedd", Kind.SUBMIT_AGENT, {"script": script.to_dict()})
                submitted += 1
            except (TransportError, GridError) as exc:
                self.journal.append(EventKind.AGENT_REJECTED, detail={"agent": script.agent_id, "reason": str(exc)})
                if isinstance(exc, TransportError):
                    raise QueueUnreachable(f"batch queue unreachable: {exc}") from exc
        return submitted

    def _make_script(self, job_id: int) -> AgentStartupScript:
        script = AgentStartupScript(
            agent_id=f"{self.name}-agent-{next(self._agent_ids)}",
            central_endpoint=self._central_address(),
            worker_env={"CE": self.name},
            created_at=self.rt.now_ms(),
        )
        self.journal.append(EventKind.AGENT_SCRIPT_CREATED, job_id=job_id, detail={"agent": script.agent_id})
        return script

    def _central_address(self) -> str:
        try:
            return self.rt.address_of("central")
        except GridError:
            return ""
