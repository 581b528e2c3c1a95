"""Domain types, the job state machine, checksums and the event journal."""

from __future__ import annotations

import enum
import hashlib
import json
import os
import re
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

from .errors import IllegalTransition, JournalIOFailure, UnsupportedAlgorithm


class JobStatus(str, enum.Enum):
    WAITING = "WAITING"
    ASSIGNED = "ASSIGNED"
    RUNNING = "RUNNING"
    SAVING = "SAVING"
    DONE = "DONE"
    ERROR_EXEC = "ERROR_EXEC"
    ERROR_SAVE = "ERROR_SAVE"
    ERROR_AGENT = "ERROR_AGENT"
    EXPIRED = "EXPIRED"

    @property
    def terminal(self) -> bool:
        return self in TERMINAL_STATUSES

    def __str__(self) -> str:
        return self.value


TERMINAL_STATUSES = frozenset(
    {JobStatus.DONE, JobStatus.ERROR_EXEC, JobStatus.ERROR_SAVE,
     JobStatus.ERROR_AGENT, JobStatus.EXPIRED}
)
FAILURE_STATUSES = (JobStatus.ERROR_EXEC, JobStatus.ERROR_SAVE,
                    JobStatus.ERROR_AGENT, JobStatus.EXPIRED)
HAPPY_PATH = (JobStatus.WAITING, JobStatus.ASSIGNED, JobStatus.RUNNING,
              JobStatus.SAVING, JobStatus.DONE)


def _edges() -> frozenset[tuple[JobStatus, JobStatus]]:
    edges = set(zip(HAPPY_PATH, HAPPY_PATH[1:]))
    for status in JobStatus:
        if not status.terminal:
            edges.update((status, failure) for failure in FAILURE_STATUSES)
    return frozenset(edges)


ALLOWED_EDGES = _edges()


def advance_status(current: JobStatus, nxt: JobStatus) -> JobStatus:
    current, nxt = JobStatus(current), JobStatus(nxt)
    if (current, nxt) not in ALLOWED_EDGES:
        raise IllegalTransition(f"illegal transition {current} -> {nxt}",
                                current=current, next=nxt)
    return nxt


# Logical file names

_SEGMENT = re.compile(r"[A-Za-z0-9._-]+")


def lfn_problems(value: str) -> list[str]:
    if not isinstance(value, str) or not value.startswith("/"):
        return [f"LFN {value!r} must be an absolute path"]
    segments = value[1:].split("/")
    problems = []
    for seg in segments:
        if seg == "":
            problems.append(f"LFN {value!r} has an empty segment")
        elif seg in (".", ".."):
            problems.append(f"LFN {value!r} has a '{seg}' segment")
        elif not _SEGMENT.fullmatch(seg):
            problems.append(f"LFN {value!r} has invalid segment {seg!r}")
    return problems


def is_valid_lfn(value: str) -> bool:
    return not lfn_problems(value)


def lfn_under(lfn: str, prefix: str) -> bool:
    prefix = prefix.rstrip("/")
    return lfn == prefix or lfn.startswith(prefix + "/")


# Checksums

_DIGEST_LENGTHS = {"md5": 32, "sha1": 40, "sha256": 64}


@dataclass(frozen=True)
class Checksum:
    digest: str
    algorithm: str = "md5"

    def __post_init__(self):
        if self.algorithm not in _DIGEST_LENGTHS:
            raise UnsupportedAlgorithm(f"unsupported checksum algorithm {self.algorithm!r}")
        if len(self.digest) != _DIGEST_LENGTHS[self.algorithm] or not re.fullmatch(r"[0-9a-f]+", self.digest):
            raise ValueError(f"malformed {self.algorithm} digest {self.digest!r}")

    def to_dict(self) -> dict:
        return {"algorithm": self.algorithm, "digest": self.digest}

    @classmethod
    def from_dict(cls, d: dict) -> "Checksum":
        return cls(digest=d["digest"], algorithm=d.get("algorithm", "md5"))

    def matches(self, data: bytes) -> bool:
        return compute_checksum(data, self.algorithm) == self


def compute_checksum(data: bytes, algorithm: str = "md5") -> Checksum:
    if algorithm not in _DIGEST_LENGTHS:
        raise UnsupportedAlgorithm(f"unsupported checksum algorithm {algorithm!r}")
    return Checksum(hashlib.new(algorithm, data).hexdigest(), algorithm)


# Jobs

@dataclass(frozen=True)
class JobSpec:
    script: str
    arguments: tuple[str, ...] = ()
    input_lfns: tuple[str, ...] = ()
    output_patterns: tuple[str, ...] = ()
    ttl_seconds: int = 600
    submitter: str = "anonymous"

    def to_dict(self) -> dict:
        return {
            "script": self.script,
            "arguments": list(self.arguments),
            "input_lfns": list(self.input_lfns),
            "output_patterns": list(self.output_patterns),
            "ttl_seconds": self.ttl_seconds,
            "submitter": self.submitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobSpec":
        return cls(
            script=d.get("script", ""),
            arguments=tuple(d.get("arguments", ())),
            input_lfns=tuple(d.get("input_lfns", ())),
            output_patterns=tuple(d.get("output_patterns", ())),
            ttl_seconds=d.get("ttl_seconds", 600),
            submitter=d.get("submitter", "anonymous"),
        )


def validate_job_spec(spec: JobSpec) -> list[str]:
    """Return every violated invariant of ``spec``; an empty list means valid."""
    violations = []
    if not isinstance(spec.script, str) or not spec.script.strip():
        violations.append("script non-empty")
    ttl = spec.ttl_seconds
    if not isinstance(ttl, int) or isinstance(ttl, bool) or ttl < 1:
        violations.append("ttl_seconds >= 1")
    for pattern in spec.output_patterns:
        if not isinstance(pattern, str) or not pattern:
            violations.append(f"output pattern {pattern!r} is empty")
        elif pattern.startswith("/") or re.match(r"^[A-Za-z]:[\\/]", pattern):
            violations.append(f"no absolute paths: output pattern {pattern!r}")
        elif ".." in pattern.replace("\\", "/").split("/"):
            violations.append(f"no parent references: output pattern {pattern!r}")
    for lfn in spec.input_lfns:
        violations.extend(lfn_problems(lfn))
    if not all(isinstance(a, str) for a in spec.arguments):
        violations.append("arguments must be text")
    return violations


@dataclass(frozen=True)
class JobRecord:
    id: int
    spec: JobSpec
    status: JobStatus
    status_history: tuple[tuple[JobStatus, int], ...]
    assigned_worker: str | None = None
    exit_code: int | None = None
    output_lfns: tuple[str, ...] = ()
    status_detail: dict = field(default_factory=dict)

    @property
    def submitted_ms(self) -> int:
        return self.status_history[0][1]

    def advanced(self, nxt: JobStatus, ts_ms: int, detail: dict | None = None) -> "JobRecord":
        status = advance_status(self.status, nxt)
        detail = dict(detail or {})
        exit_code = None
        if status is JobStatus.DONE:
            exit_code = int(detail.get("exit_code", 0))
        elif status is JobStatus.ERROR_EXEC:
            exit_code = int(detail.get("exit_code", 1))
        outputs = self.output_lfns if status in (JobStatus.SAVING, JobStatus.DONE) else ()
        return replace(self, status=status,
                       status_history=self.status_history + ((status, ts_ms),),
                       exit_code=exit_code, output_lfns=outputs, status_detail=detail)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "spec": self.spec.to_dict(),
            "status": self.status.value,
            "status_history": [[s.value, ts] for s, ts in self.status_history],
            "assigned_worker": self.assigned_worker,
            "exit_code": self.exit_code,
            "output_lfns": list(self.output_lfns),
            "status_detail": dict(self.status_detail),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JobRecord":
        return cls(
            id=int(d["id"]),
            spec=JobSpec.from_dict(d["spec"]),
            status=JobStatus(d["status"]),
            status_history=tuple((JobStatus(s), int(ts)) for s, ts in d["status_history"]),
            assigned_worker=d.get("assigned_worker"),
            exit_code=d.get("exit_code"),
            output_lfns=tuple(d.get("output_lfns", ())),
            status_detail=dict(d.get("status_detail") or {}),
        )


# Journal

class EventKind(str, enum.Enum):
    JOB_SUBMITTED = "JOB_SUBMITTED"
    JOB_POLLED = "JOB_POLLED"
    JOB_GRANTED = "JOB_GRANTED"
    JOB_EXPIRED = "JOB_EXPIRED"
    NO_JOB = "NO_JOB"
    CE_ANNOUNCED = "CE_ANNOUNCED"
    SE_REGISTERED = "SE_REGISTERED"
    WORKER_ANNOUNCED = "WORKER_ANNOUNCED"
    AGENT_SCRIPT_CREATED = "AGENT_SCRIPT_CREATED"
    AGENT_REJECTED = "AGENT_REJECTED"
    AGENT_QUEUED = "AGENT_QUEUED"
    AGENT_SCHEDULED = "AGENT_SCHEDULED"
    AGENT_REQUEUED = "AGENT_REQUEUED"
    AGENT_STARTED = "AGENT_STARTED"
    AGENT_COMPLETED = "AGENT_COMPLETED"
    AGENT_FAILED = "AGENT_FAILED"
    WRAPPER_STARTED = "WRAPPER_STARTED"
    INPUT_DOWNLOADED = "INPUT_DOWNLOADED"
    JOB_EXECUTED = "JOB_EXECUTED"
    OUTPUT_UPLOADED = "OUTPUT_UPLOADED"
    OUTPUT_REGISTERED = "OUTPUT_REGISTERED"
    FILE_REGISTERED = "FILE_REGISTERED"
    OBJECT_STORED = "OBJECT_STORED"
    OBJECT_SERVED = "OBJECT_SERVED"
    STATUS_UPDATED = "STATUS_UPDATED"
    COMPONENT_STARTED = "COMPONENT_STARTED"
    COMPONENT_STOPPED = "COMPONENT_STOPPED"
    ERROR = "ERROR"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class JournalEvent:
    seq: int
    ts_ms: int
    component: str
    kind: EventKind
    job_id: int | None = None
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"seq": self.seq, "ts_ms": self.ts_ms, "component": self.component,
                "kind": self.kind.value, "job_id": self.job_id, "detail": dict(self.detail)}

    @classmethod
    def from_dict(cls, d: dict) -> "JournalEvent":
        return cls(seq=int(d["seq"]), ts_ms=int(d["ts_ms"]), component=d["component"],
                   kind=EventKind(d["kind"]), job_id=d.get("job_id"),
                   detail=dict(d.get("detail") or {}))


class Journal:
    """Append-only JSONL journal for one component.

    The journal, not the caller, assigns ``seq``. When reopened over an
    existing file the counter continues from the last line.
    """

    def __init__(self, path: str | os.PathLike, component: str,
                 clock: Callable[[], int] = lambda: 0, fsync: bool = False):
        self.path = Path(path)
        self.component = component
        self.clock = clock
        self.fsync = fsync
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            existing = read_journal(self.path) if self.path.exists() else []
            self._seq = existing[-1].seq if existing else 0
            self._fh = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise JournalIOFailure(f"cannot open journal {self.path}: {exc}") from exc

    @property
    def last_seq(self) -> int:
        return self._seq

    def append(self, kind: EventKind | str, job_id: int | None = None,
               detail: dict | None = None, **extra) -> JournalEvent:
        detail = {str(k): str(v) for k, v in {**(detail or {}), **extra}.items()}
        kind = EventKind(kind)
        with self._lock:
            if self._fh is None:
                raise JournalIOFailure(f"journal {self.path} is closed")
            event = JournalEvent(self._seq + 1, int(self.clock()), self.component,
                                 kind, job_id, detail)
            line = json.dumps(event.to_dict(), sort_keys=True, ensure_ascii=False) + "\n"
            try:
                self._fh.write(line)
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as exc:
                raise JournalIOFailure(f"cannot append to {self.path}: {exc}") from exc
            self._seq = event.seq
        return event

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def read_journal(path: str | os.PathLike) -> list[JournalEvent]:
    events = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                events.append(JournalEvent.from_dict(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise JournalIOFailure(f"{path}:{lineno}: unparseable journal line") from exc
    return events


def read_journals(run_dir: str | os.PathLike) -> dict[str, list[JournalEvent]]:
    journal_dir = Path(run_dir) / "journal"
    if not journal_dir.is_dir():
        return {}
    return {p.stem: read_journal(p) for p in sorted(journal_dir.glob("*.jsonl"))}


def journal_path(run_dir: str | os.PathLike, component: str) -> Path:
    return Path(run_dir) / "journal" / f"{component}.jsonl"


def walk_is_legal(statuses: Iterable[JobStatus]) -> bool:
    """True if ``statuses`` starts at WAITING and follows allowed edges only."""
    statuses = [JobStatus(s) for s in statuses]
    if not statuses or statuses[0] is not JobStatus.WAITING:
        return False
    return all((a, b) in ALLOWED_EDGES for a, b in zip(statuses, statuses[1:]))
