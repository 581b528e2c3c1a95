"""Central service: task queue, file catalog and job status API.

All mutations go through one lock, so concurrent handlers observe
linearizable state. State lives in memory and is written to
``<run_dir>/central_state.json`` at shutdown.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, replace

from .component import Component
from .core import (Checksum, EventKind, JobRecord, JobSpec, JobStatus, is_valid_lfn, lfn_problems,
                   lfn_under, validate_job_spec)
from .errors import (DuplicateLFN, InvalidRequest, InvalidSpec, MissingInput, NotFound, UnknownAgent,
                     UnknownJob, UnknownSE, WrongState)


@dataclass(frozen=True)
class CatalogEntry:
    lfn: str
    guid: str
    size_bytes: int
    checksum: Checksum
    replicas: tuple[tuple[str, str], ...]
    job_id: int | None = None

    def to_dict(self) -> dict:
        return {"lfn": self.lfn, "guid": self.guid, "size_bytes": self.size_bytes,
                "checksum": self.checksum.to_dict(), "replicas": [list(r) for r in self.replicas],
                "job_id": self.job_id}

    @classmethod
    def from_dict(cls, d: dict) -> "CatalogEntry":
        return cls(d["lfn"], d["guid"], int(d["size_bytes"]), Checksum.from_dict(d["checksum"]),
                   tuple((se, path) for se, path in d["replicas"]), d.get("job_id"))


class Central(Component):
    name = "central"

    def __init__(self, runtime, config, name: str | None = None):
        super().__init__(runtime, config, name)
        self._lock = threading.RLock()
        self.jobs: dict[int, JobRecord] = {}
        self.next_id = 1
        self.catalog: dict[str, CatalogEntry] = {}
        self.user_homes: list[str] = []
        self.ses: dict[str, dict] = {}
        self.ces: dict[str, dict] = {}
        self.agents: set[str] = set()
        for home in config.central.user_homes:
            if lfn_problems(home):
                raise InvalidRequest(f"bad user home {home!r}")
            self.user_homes.append(home)

    def config_section(self) -> dict:
        c = self.config.central
        return {"port": c.port, "expire_interval_ms": c.expire_interval_ms, "user_homes": list(c.user_homes)}

    def start(self) -> None:
        super().start()
        self.rt.every(self.name, self.config.central.expire_interval_ms,
                      lambda: self.expire_jobs(self.rt.now_ms()))

    def stop(self) -> None:
        if not self.stopped.is_set():
            self.write_snapshot()
        super().stop()

    # jobs

    def submit_job(self, spec: JobSpec) -> int:
        violations = validate_job_spec(spec)
        if violations:
            raise InvalidSpec(violations=violations)
        with self._lock:
            for lfn in spec.input_lfns:
                if lfn not in self.catalog:
                    raise MissingInput(f"input {lfn} is not in the catalog", lfn=lfn)
            job_id = self.next_id
            self.next_id += 1
            now = self.rt.now_ms()
            self.jobs[job_id] = JobRecord(job_id, spec, JobStatus.WAITING, ((JobStatus.WAITING, now),))
            self.journal.append(EventKind.JOB_SUBMITTED, job_id=job_id,
                                detail={"submitter": spec.submitter, "inputs": len(spec.input_lfns)})
        return job_id

    def poll_waiting(self, max_jobs: int) -> list[tuple[int, dict]]:
        if max_jobs < 1:
            return []
        with self._lock:
            waiting = [r for r in self.jobs.values() if r.status is JobStatus.WAITING][:max_jobs]
            return [(r.id, {"ttl_seconds": r.spec.ttl_seconds, "inputs": len(r.spec.input_lfns)})
                    for r in waiting]

    def request_job(self, agent: str, worker: str) -> tuple[int, JobSpec] | None:
        with self._lock:
            if agent not in self.agents:
                raise UnknownAgent(f"agent {agent!r} was never registered", agent=agent)
            record = next((r for r in self.jobs.values() if r.status is JobStatus.WAITING), None)
            if record is None:
                return None
            self.faults.apply(self.name, "request_job", record.id, self.rt.sleep)
            record = replace(record.advanced(JobStatus.ASSIGNED, self.rt.now_ms(), {"agent": agent}),
                             assigned_worker=worker)
            self.jobs[record.id] = record
            self.journal.append(EventKind.STATUS_UPDATED, job_id=record.id,
                                detail={"status": "ASSIGNED", "from": "WAITING", "agent": agent, "worker": worker})
            return record.id, record.spec

    def _record(self, job_id: int) -> JobRecord:
        try:
            return self.jobs[int(job_id)]
        except (KeyError, TypeError, ValueError):
            raise UnknownJob(f"unknown job {job_id}", job_id=job_id) from None

    def update_status(self, job_id: int, nxt: JobStatus, detail: dict | None = None) -> JobRecord:
        with self._lock:
            record = self._record(job_id)
            updated = record.advanced(JobStatus(nxt), self.rt.now_ms(), detail)
            self.jobs[record.id] = updated
            self.journal.append(EventKind.STATUS_UPDATED, job_id=record.id,
                                detail={**(detail or {}), "status": updated.status.value,
                                        "from": record.status.value})
            return updated

    def query_status(self, job_id: int) -> JobRecord:
        with self._lock:
            return self._record(job_id)

    def expire_jobs(self, now_ms: int) -> list[int]:
        expired = []
        with self._lock:
            for record in list(self.jobs.values()):
                if record.status.terminal:
                    continue
                if now_ms - record.submitted_ms > record.spec.ttl_seconds * 1000:
                    self.jobs[record.id] = record.advanced(JobStatus.EXPIRED, now_ms,
                                                           {"reason": "ttl exceeded"})
                    self.journal.append(EventKind.STATUS_UPDATED, job_id=record.id,
                                        detail={"status": "EXPIRED", "from": record.status.value,
                                                "reason": "ttl exceeded"})
                    expired.append(record.id)
        return expired

    # catalog

    def _check_registration(self, lfn: str, replica: tuple[str, str]) -> None:
        problems = lfn_problems(lfn)
        if problems:
            raise InvalidRequest("; ".join(problems), lfn=lfn)
        if lfn in self.catalog:
            raise DuplicateLFN(f"{lfn} is already registered", lfn=lfn)
        if replica[0] not in self.ses:
            raise UnknownSE(f"storage element {replica[0]!r} is not registered", se=replica[0])

    def register_output(self, job_id: int, lfn: str, guid: str, size: int, checksum: Checksum,
                        replica: tuple[str, str]) -> CatalogEntry:
        with self._lock:
            record = self._record(job_id)
            if record.status is not JobStatus.SAVING:
                raise WrongState(f"job {record.id} is {record.status}, outputs register only in SAVING",
                                 job_id=record.id, status=record.status)
            self._check_registration(lfn, replica)
            self.faults.apply(self.name, "register", record.id, self.rt.sleep)
            entry = CatalogEntry(lfn, guid, int(size), checksum, (tuple(replica),), record.id)
            self.catalog[lfn] = entry
            self.jobs[record.id] = replace(record, output_lfns=record.output_lfns + (lfn,))
            self.journal.append(EventKind.OUTPUT_REGISTERED, job_id=record.id,
                                detail={"lfn": lfn, "guid": guid, "size": size})
            return entry

    def register_file(self, lfn: str, guid: str, size: int, checksum: Checksum,
                      replica: tuple[str, str]) -> CatalogEntry:
        """Catalog a user-supplied file, e.g. a job input, under a user home."""
        with self._lock:
            if is_valid_lfn(lfn) and not any(lfn_under(lfn, h) and lfn != h for h in self.user_homes):
                raise InvalidRequest(f"{lfn} is not under a user home {self.user_homes}", lfn=lfn)
            self._check_registration(lfn, replica)
            entry = CatalogEntry(lfn, guid, int(size), checksum, (tuple(replica),))
            self.catalog[lfn] = entry
            self.journal.append(EventKind.FILE_REGISTERED, detail={"lfn": lfn, "guid": guid, "size": size})
            return entry

    def lookup(self, lfn: str) -> CatalogEntry:
        with self._lock:
            try:
                return self.catalog[lfn]
            except KeyError:
                raise NotFound(f"no catalog entry for {lfn}", lfn=lfn) from None

    # registrations

    def announce(self, payload: dict) -> dict:
        role = payload.get("role")
        with self._lock:
            if role == "ce":
                name = payload["name"]
                first = name not in self.ces
                self.ces[name] = {"slots": int(payload.get("slots", 0)),
                                  "memory_mb": int(payload.get("memory_mb", 0)),
                                  "address": payload.get("address", "")}
                if first:
                    self.journal.append(EventKind.CE_ANNOUNCED, detail={"ce": name, "slots": payload.get("slots")})
                return {"registered": name, "ces": len(self.ces)}
            if role == "se":
                name = payload["name"]
                first = name not in self.ses
                self.ses[name] = {"capacity_bytes": int(payload.get("capacity_bytes", 0)),
                                  "address": payload.get("address", "")}
                if first:
                    self.journal.append(EventKind.SE_REGISTERED, detail={"se": name})
                return {"registered": name, "ses": len(self.ses)}
            if role == "agents":
                ids = [str(a) for a in payload.get("agent_ids", [])]
                self.agents.update(ids)
                return {"registered": len(ids)}
        raise InvalidRequest(f"unknown announce role {role!r}")

    def register_agent(self, agent_id: str) -> None:
        with self._lock:
            self.agents.add(agent_id)

    def register_se(self, name: str, capacity_bytes: int = 0, address: str = "") -> None:
        self.announce({"role": "se", "name": name, "capacity_bytes": capacity_bytes, "address": address})

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "jobs": {str(i): r.to_dict() for i, r in self.jobs.items()},
                "catalog": {"files": {lfn: e.to_dict() for lfn, e in self.catalog.items()},
                            "dirs": list(self.user_homes)},
                "ses": {n: dict(v) for n, v in self.ses.items()},
                "next_id": self.next_id,
            }

    def write_snapshot(self) -> None:
        path = self.run_dir / "central_state.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.snapshot(), indent=2, sort_keys=True))
        tmp.replace(path)

    # wire handlers

    def on_submit_job(self, p: dict) -> dict:
        try:
            spec = JobSpec.from_dict(p["spec"])
        except (KeyError, TypeError) as exc:
            raise InvalidRequest(f"bad SUBMIT_JOB payload: {exc}") from exc
        return {"job_id": self.submit_job(spec)}

    def on_poll_waiting(self, p: dict) -> dict:
        return {"jobs": [{"job_id": i, "requirements": req}
                         for i, req in self.poll_waiting(int(p.get("max", 1)))]}

    def on_request_job(self, p: dict) -> dict:
        grant = self.request_job(str(p.get("agent_id")), str(p.get("worker")))
        if grant is None:
            return {"job": None}
        job_id, spec = grant
        return {"job": {"job_id": job_id, "spec": spec.to_dict()}}

    def on_update_status(self, p: dict) -> dict:
        try:
            status = JobStatus(p["status"])
        except (KeyError, ValueError) as exc:
            raise InvalidRequest(f"bad status in UPDATE_STATUS: {exc}") from exc
        detail = {str(k): str(v) for k, v in (p.get("detail") or {}).items()}
        record = self.update_status(p.get("job_id"), status, detail)
        return {"job_id": record.id, "status": record.status.value}

    def _replica(self, p: dict) -> tuple[str, str]:
        replica = p.get("replica") or {}
        return str(replica.get("se", "")), str(replica.get("path", ""))

    def on_register_output(self, p: dict) -> dict:
        entry = self.register_output(p.get("job_id"), p.get("lfn", ""), p.get("guid", ""),
                                     int(p.get("size", 0)), Checksum.from_dict(p["checksum"]),
                                     self._replica(p))
        return {"entry": entry.to_dict()}

    def on_register_file(self, p: dict) -> dict:
        entry = self.register_file(p.get("lfn", ""), p.get("guid", ""), int(p.get("size", 0)),
                                   Checksum.from_dict(p["checksum"]), self._replica(p))
        return {"entry": entry.to_dict()}

    def on_lookup(self, p: dict) -> dict:
        return {"entry": self.lookup(p.get("lfn", "")).to_dict()}

    def on_query_status(self, p: dict) -> dict:
        return {"record": self.query_status(p.get("job_id")).to_dict()}

    def on_fetch_output_list(self, p: dict) -> dict:
        with self._lock:
            record = self._record(p.get("job_id"))
            outputs = [self.catalog[lfn].to_dict() for lfn in record.output_lfns]
        return {"job_id": record.id, "status": record.status.value, "outputs": outputs}

    def on_announce(self, p: dict) -> dict:
        return self.announce(p)

    def on_snapshot(self, p: dict) -> dict:
        with self._lock:
            return {"state": self.snapshot(), "ces": {n: dict(v) for n, v in self.ces.items()},
                    "agents": len(self.agents)}
