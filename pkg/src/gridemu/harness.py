"""Reproducible multi-job scenarios and assertions over replayed journals.

A scenario file looks like::

    {"name": "upload_fault_job2",
     "config": {"worker": {"slots": 2}},
     "jobs": [{"script": "echo hi", "outputs": ["stdout.log"], "count": 2}],
     "faults": [{"component": "worker", "stage": "upload", "mode": "fail", "match": [2]}],
     "expected": {"1": "DONE", "2": "ERROR_SAVE"}}

Jobs are numbered in submission order from 1. ``expected_default`` fills in
any job not listed under ``expected``.
"""

from __future__ import annotations

import json
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from . import grid as gridmod
from .config import RunConfig, merge
from .core import TERMINAL_STATUSES, EventKind, JobSpec, JobStatus, read_journals, walk_is_legal
from .errors import ConfigError, ScenarioTimeout

SCENARIO_DIR = Path(__file__).resolve().parents[2] / "scenarios"


@dataclass(frozen=True)
class ScenarioJob:
    spec: JobSpec
    submit_at_ms: int = 0


@dataclass
class Scenario:
    name: str
    config: dict = field(default_factory=dict)
    jobs: list = field(default_factory=list)
    files: dict = field(default_factory=dict)  # lfn -> text
    faults: list = field(default_factory=list)
    expected: dict = field(default_factory=dict)  # job id -> JobStatus
    timeout_ms: int | None = None

    def __post_init__(self):
        bad = {j: s for j, s in self.expected.items() if JobStatus(s) not in TERMINAL_STATUSES}
        if bad:
            raise ConfigError(f"scenario {self.name}: expected statuses must be terminal: {bad}")

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        jobs = []
        for entry in doc.get("jobs", []):
            spec = JobSpec(script=entry["script"], arguments=tuple(entry.get("args", ())),
                           input_lfns=tuple(entry.get("inputs", ())),
                           output_patterns=tuple(entry.get("outputs", ("stdout.log",))),
                           ttl_seconds=int(entry.get("ttl_seconds", 600)),
                           submitter=entry.get("submitter", "scenario"))
            for _ in range(int(entry.get("count", 1))):
                jobs.append(ScenarioJob(spec, int(entry.get("submit_at_ms", 0))))
        expected = {i: JobStatus(doc["expected_default"]) for i in range(1, len(jobs) + 1)} \
            if "expected_default" in doc else {}
        expected.update({int(k): JobStatus(v) for k, v in doc.get("expected", {}).items()})
        return cls(name=doc["name"], config=dict(doc.get("config", {})), jobs=jobs,
                   files=dict(doc.get("files", {})), faults=list(doc.get("faults", [])),
                   expected=expected, timeout_ms=doc.get("timeout_ms"))

    @classmethod
    def load(cls, name_or_path: str | Path) -> "Scenario":
        path = Path(name_or_path)
        if not path.suffix:
            path = SCENARIO_DIR / f"{name_or_path}.json"
        return cls.from_dict(json.loads(path.read_text()))

    def run_config(self, run_dir: str, seed: int = 0) -> RunConfig:
        config = merge(RunConfig(), self.config)
        return merge(config, {"mode": "stepped", "processes": False, "run_dir": run_dir, "seed": seed,
                              "faults": self.faults or config.faults}).validate()

    @property
    def default_timeout_ms(self) -> int:
        # generous virtual-time budget: every job gets 5 s plus its submit offset
        last = max((j.submit_at_ms for j in self.jobs), default=0)
        return last + max(60_000, 5_000 * len(self.jobs))


def list_scenarios(directory: Path = SCENARIO_DIR) -> list[str]:
    return sorted(p.stem for p in directory.glob("*.json"))


# replay


@dataclass
class ReplayIndex:
    """All journals merged into one (ts_ms, component, seq)-ordered stream."""

    events: list = field(default_factory=list)

    def __post_init__(self):
        self.events.sort(key=lambda e: (e.ts_ms, e.component, e.seq))
        self.by_job: dict[int, list] = defaultdict(list)
        self.by_kind: dict[EventKind, list] = defaultdict(list)
        for e in self.events:
            if e.job_id is not None:
                self.by_job[e.job_id].append(e)
            self.by_kind[e.kind].append(e)

    @classmethod
    def from_journals(cls, journals: dict) -> "ReplayIndex":
        return cls([e for events in journals.values() for e in events])

    @classmethod
    def from_run_dir(cls, run_dir: str | Path) -> "ReplayIndex":
        return cls.from_journals(read_journals(run_dir))

    def kind(self, kind: EventKind, component: str | None = None) -> list:
        return [e for e in self.by_kind.get(kind, []) if component is None or e.component == component]

    def job_ids(self) -> list[int]:
        return sorted({e.job_id for e in self.kind(EventKind.JOB_SUBMITTED, "central")} | set(self.by_job))

    def status_walk(self, job_id: int) -> list[JobStatus]:
        walk = [JobStatus.WAITING] if any(e.kind is EventKind.JOB_SUBMITTED for e in self.by_job[job_id]) else []
        walk += [JobStatus(e.detail["status"]) for e in self.by_job[job_id]
                 if e.kind is EventKind.STATUS_UPDATED and e.component == "central"]
        return walk

    def final_status(self, job_id: int) -> JobStatus | None:
        walk = self.status_walk(job_id)
        return walk[-1] if walk else None

    def signature(self) -> list[tuple]:
        """The merged stream without timestamps, for run-to-run comparison."""
        return [(e.component, e.seq, e.kind.value, e.job_id, tuple(sorted(e.detail.items())))
                for e in self.events]


@dataclass(frozen=True)
class ReplayCheck:
    ok: bool
    offending: tuple = ()
    message: str = ""

    def __bool__(self) -> bool:
        return self.ok


def assert_exactly_once(idx: ReplayIndex) -> ReplayCheck:
    """Every job that ran to a worker verdict started exactly one wrapper; none started two."""
    starts = defaultdict(int)
    for e in idx.kind(EventKind.WRAPPER_STARTED):
        starts[e.job_id] += 1
    must_run = (JobStatus.DONE, JobStatus.ERROR_EXEC, JobStatus.ERROR_SAVE)
    bad = sorted(j for j in set(idx.job_ids()) | set(starts)
                 if starts[j] > 1 or (idx.final_status(j) in must_run and starts[j] != 1))
    if bad:
        return ReplayCheck(False, tuple(bad), "wrapper start count != 1 for jobs "
                           + ", ".join(f"{j} ({starts[j]})" for j in bad))
    return ReplayCheck(True)


def assert_single_grant(idx: ReplayIndex) -> ReplayCheck:
    grants = defaultdict(int)
    for e in idx.kind(EventKind.STATUS_UPDATED, "central"):
        if e.detail.get("status") == JobStatus.ASSIGNED.value:
            grants[e.job_id] += 1
    bad = sorted(j for j, n in grants.items() if n > 1)
    return ReplayCheck(not bad, tuple(bad), f"jobs granted more than once: {bad}" if bad else "")


def assert_legal_transitions(idx: ReplayIndex) -> ReplayCheck:
    bad = sorted(j for j in idx.job_ids() if not walk_is_legal(idx.status_walk(j)))
    return ReplayCheck(not bad, tuple(bad),
                       "; ".join(f"job {j}: {[s.value for s in idx.status_walk(j)]}" for j in bad))


def assert_slot_capacity(idx: ReplayIndex, slots: int) -> ReplayCheck:
    """Busy slots per worker never exceed ``slots`` and no slot is double-booked."""
    busy: dict[str, set] = defaultdict(set)
    for e in idx.events:
        if e.component != "schedd":
            continue
        worker, slot = e.detail.get("worker"), e.detail.get("slot")
        if e.kind is EventKind.AGENT_SCHEDULED:
            if slot in busy[worker] or len(busy[worker]) >= slots:
                return ReplayCheck(False, (e.detail.get("agent"),),
                                   f"{worker} slot {slot} over-booked by {e.detail.get('agent')}")
            busy[worker].add(slot)
        elif e.kind in (EventKind.AGENT_COMPLETED, EventKind.AGENT_FAILED, EventKind.AGENT_REQUEUED):
            busy[worker].discard(slot)
    return ReplayCheck(True)


def assert_fifo(idx: ReplayIndex) -> ReplayCheck:
    """Agents are first scheduled in the order they were queued."""
    queued = [e.detail["agent"] for e in idx.kind(EventKind.AGENT_QUEUED, "schedd")]
    seen, scheduled = set(), []
    for e in idx.kind(EventKind.AGENT_SCHEDULED, "schedd"):
        if e.detail["agent"] not in seen:
            seen.add(e.detail["agent"])
            scheduled.append(e.detail["agent"])
    expected = [a for a in queued if a in seen]
    if scheduled != expected:
        first = next(i for i, (a, b) in enumerate(zip(scheduled, expected)) if a != b)
        return ReplayCheck(False, (scheduled[first],),
                           f"agent {scheduled[first]} scheduled before {expected[first]}")
    return ReplayCheck(True)


def assert_pending_cap(idx: ReplayIndex, cap: int) -> ReplayCheck:
    """Queued plus scheduled agents never exceed the CE's pending cap."""
    outstanding = 0
    for e in idx.events:
        if e.component != "schedd":
            continue
        if e.kind is EventKind.AGENT_QUEUED:
            outstanding += 1
            if outstanding > cap:
                return ReplayCheck(False, (e.detail.get("agent"),),
                                   f"{outstanding} agents outstanding after {e.detail.get('agent')}, cap {cap}")
        elif e.kind in (EventKind.AGENT_COMPLETED, EventKind.AGENT_FAILED):
            outstanding -= 1
    return ReplayCheck(True)


# running


@dataclass
class ScenarioResult:
    statuses: dict
    index: ReplayIndex
    run_dir: Path
    config: RunConfig

    def mismatches(self, expected: dict) -> dict:
        return {j: (s, self.statuses.get(j)) for j, s in expected.items() if self.statuses.get(j) is not s}


def run_scenario(scenario: Scenario | str, seed: int = 0, run_dir: str | Path | None = None,
                 timeout_ms: int | None = None) -> ScenarioResult:
    """Run ``scenario`` in stepped mode from a fresh grid and collect its journals."""
    if not isinstance(scenario, Scenario):
        scenario = Scenario.load(scenario)
    run_dir = Path(run_dir or tempfile.mkdtemp(prefix=f"scenario-{scenario.name}-"))
    config = scenario.run_config(str(run_dir), seed)
    handle = gridmod.up(config)
    runtime = handle.runtime
    client = handle.client("harness")
    central = handle.components["central"]
    timeout_ms = timeout_ms or scenario.timeout_ms or scenario.default_timeout_ms
    ids: list[int] = []

    def statuses() -> dict[int, JobStatus]:
        return {i: central.jobs[i].status for i in ids}

    try:
        for lfn, text in sorted(scenario.files.items()):
            client.put_file(text.encode(), lfn)
        for job in sorted(scenario.jobs, key=lambda j: j.submit_at_ms):
            if job.submit_at_ms > runtime.clock:
                runtime.advance(job.submit_at_ms - runtime.clock)
            ids.append(client.submit(job.spec))
        finished = runtime.run_until(lambda: all(s.terminal for s in statuses().values()), timeout_ms)
        final = statuses()
    finally:
        gridmod.down(handle)
    if not finished:
        pending = {i: s.value for i, s in final.items() if not s.terminal}
        raise ScenarioTimeout(f"scenario {scenario.name}: jobs not terminal after {timeout_ms} ms: {pending}",
                              statuses={i: s.value for i, s in final.items()})
    return ScenarioResult(final, ReplayIndex.from_run_dir(run_dir), run_dir, handle.config)
