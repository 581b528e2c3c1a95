"""Severity-tiered checks over the host, the components, the catalog and the job flow.

Checks run strictly in id order. The first Critical failure aborts the run:
every later check is reported SKIPPED and the report is marked aborted.
Warning and Minor failures are recorded and the run carries on.
"""

from __future__ import annotations

import dataclasses
import os
import re
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable

from .config import COMPONENTS, SCOPES, RunConfig
from .core import EventKind, JobRecord, JobSpec, JobStatus, journal_path
from .errors import ConfigError, GridError, GridNotRunning, ProbeTimeout, TransportError
from .report import CheckResult, CheckStatus, Severity, TestReport
from .worker import output_lfn

PROBE_SCRIPT = "echo hello"
PROBE_OUTPUT = "stdout.log"
PROBE_INPUT = b"probe input\n"
LATENCY_STAGES = ("submit_to_schedule", "schedule_to_wrapper", "wrapper_to_done", "total")
GRID_SCOPES = frozenset({"component", "catalog", "flow"})


class CheckFailed(Exception):
    """Raised by a check body; the message becomes the report's Message column."""


def fail(message: str):
    raise CheckFailed(message)


@dataclass(frozen=True)
class Check:
    id: int
    name: str
    severity: Severity
    scope: str
    body: Callable[["SuiteContext"], None] = field(compare=False, repr=False)


class CheckRegistry:
    """Ordered checks; ids are dense from 1 in registration order. Names may repeat."""

    def __init__(self):
        self.checks: list[Check] = []

    def add(self, name: str, severity: Severity, scope: str, body: Callable) -> Check:
        check = Check(len(self.checks) + 1, name, Severity(severity), scope, body)
        self.checks.append(check)
        return check

    def __iter__(self):
        return iter(self.checks)

    def __len__(self) -> int:
        return len(self.checks)


def run_checks(checks, ctx=None, metadata: dict | None = None) -> TestReport:
    results, aborted = [], False
    for check in sorted(checks, key=lambda c: c.id):
        if aborted:
            results.append(CheckResult(check.id, check.name, check.severity, CheckStatus.SKIPPED))
            continue
        try:
            check.body(ctx)
            result = CheckResult(check.id, check.name, check.severity, CheckStatus.PASSED)
        except CheckFailed as exc:
            result = CheckResult(check.id, check.name, check.severity, CheckStatus.FAILED,
                                 str(exc) or "check failed without detail")
        except Exception as exc:  # a crashing check is a failing check
            result = CheckResult(check.id, check.name, check.severity, CheckStatus.FAILED,
                                 f"check raised {type(exc).__name__}: {exc}")
        results.append(result)
        if result.status is CheckStatus.FAILED and result.severity is Severity.CRITICAL:
            aborted = True
    meta = dict(metadata or {})
    meta["skipped"] = sum(1 for r in results if r.status is CheckStatus.SKIPPED)
    return TestReport(tuple(results), aborted, meta)


# context and the flow probe


@dataclass
class ProbeObservation:
    job_id: int | None = None
    input_lfn: str | None = None
    record: JobRecord | None = None
    submit_error: str = ""
    timeout: ProbeTimeout | None = None
    started_ms: int = 0
    journals: dict = field(default_factory=dict)

    @property
    def status(self) -> JobStatus | None:
        return self.record.status if self.record else None

    def events(self, component: str, kind: EventKind) -> list:
        return [e for e in self.journals.get(component, []) if e.kind is kind]

    def job_events(self, component: str, kind: EventKind) -> list:
        return [e for e in self.events(component, kind) if e.job_id == self.job_id]

    @property
    def agents(self) -> set[str]:
        found = {e.detail.get("agent") for e in self.job_events("ce", EventKind.AGENT_SCRIPT_CREATED)}
        found |= {e.detail.get("agent") for e in self.job_events("worker", EventKind.JOB_GRANTED)}
        found.discard(None)
        return found

    def failed_stage(self) -> tuple[str, str] | None:
        detail = self.record.status_detail if self.record else {}
        if detail.get("stage"):
            return detail["stage"], detail.get("reason", "")
        for component in COMPONENTS:
            for e in self.job_events(component, EventKind.ERROR):
                if e.detail.get("stage"):
                    return e.detail["stage"], e.detail.get("reason", "")
        return None

    def diagnosis(self) -> str:
        parts = []
        if self.timeout is not None:
            parts.append(str(self.timeout))
        elif self.record is not None:
            parts.append(f"job {self.job_id} ended {self.status.value}")
        stage = self.failed_stage()
        if stage:
            parts.append(f"failed stage {stage[0]}" + (f" ({stage[1]})" if stage[1] else ""))
        return "; ".join(parts) or "no further information"


class SuiteContext:
    def __init__(self, config: RunConfig, grid=None):
        self.config = config
        self.grid = grid
        self._probe: ProbeObservation | None = None
        self._pings: dict[str, dict] = {}

    def ping(self, component: str) -> dict:
        if component not in self._pings:
            self._pings[component] = self.grid.ping(component)
        return self._pings[component]

    def describe(self, component: str) -> dict:
        return self.ping(component).get("describe", {})

    @property
    def probe(self) -> ProbeObservation:
        if self._probe is None:
            self._probe = run_probe(self.config, self.grid)
        return self._probe


def _probe_input_lfn(config: RunConfig, grid) -> str | None:
    homes = [h for h in config.central.user_homes if h.rstrip("/").endswith("/probe")] or \
        list(config.central.user_homes)
    if not homes:
        return None
    home = homes[0].rstrip("/")
    n = 1
    while True:
        lfn = f"{home}/probe-input-{n}.txt"
        try:
            grid.lookup(lfn)
        except GridError:
            return lfn
        n += 1


def run_probe(config: RunConfig, grid) -> ProbeObservation:
    """Submit the probe job and poll until it is terminal or the probe timeout passes."""
    suite = config.suite
    obs = ProbeObservation(started_ms=grid.now_ms())
    try:
        obs.input_lfn = _probe_input_lfn(config, grid)
        if obs.input_lfn:
            grid.put_file(PROBE_INPUT, obs.input_lfn)
        spec = JobSpec(script=PROBE_SCRIPT, input_lfns=(obs.input_lfn,) if obs.input_lfn else (),
                       output_patterns=(PROBE_OUTPUT,), submitter="probe")
        obs.job_id = grid.submit(spec)
    except (GridError, TransportError) as exc:
        obs.submit_error = f"{type(exc).__name__}: {exc}"
        obs.journals = grid.journals()
        return obs
    deadline = obs.started_ms + suite.probe_timeout_ms
    wall_deadline = time.monotonic() + suite.probe_timeout_ms / 1000.0 + 5.0
    while True:
        try:
            obs.record = grid.record(obs.job_id)
        except (GridError, TransportError):
            pass
        if obs.record is not None and obs.record.status.terminal:
            break
        if grid.now_ms() >= deadline or time.monotonic() >= wall_deadline:
            last = obs.status.value if obs.record else "unknown"
            obs.timeout = ProbeTimeout(
                f"probe job {obs.job_id} not terminal after {suite.probe_timeout_ms} ms; "
                f"last observed status {last}", job_id=obs.job_id, last_status=last)
            break
        grid.wait(suite.probe_poll_ms)
    obs.journals = grid.journals()
    return obs


def expected_probe_bytes() -> bytes:
    """What the probe script prints when run directly in a shell."""
    with tempfile.TemporaryDirectory() as tmp:
        done = subprocess.run(["/bin/sh", "-c", PROBE_SCRIPT], cwd=tmp, capture_output=True, timeout=30)
    return done.stdout


def probe_latencies(obs: ProbeObservation) -> dict[str, int]:
    def first(component, kind, pred=lambda e: True):
        return next((e.ts_ms for e in obs.events(component, kind) if pred(e)), None)

    submitted = first("central", EventKind.JOB_SUBMITTED, lambda e: e.job_id == obs.job_id)
    agents = obs.agents
    granted = {e.detail.get("agent") for e in obs.job_events("worker", EventKind.JOB_GRANTED)}
    runner = granted or agents
    scheduled = first("schedd", EventKind.AGENT_SCHEDULED, lambda e: e.detail.get("agent") in runner)
    wrapper = first("worker", EventKind.WRAPPER_STARTED, lambda e: e.job_id == obs.job_id)
    done = first("central", EventKind.STATUS_UPDATED,
                 lambda e: e.job_id == obs.job_id and e.detail.get("status") == JobStatus.DONE.value)
    marks = {"submit_to_schedule": (submitted, scheduled), "schedule_to_wrapper": (scheduled, wrapper),
             "wrapper_to_done": (wrapper, done), "total": (submitted, done)}
    return {k: b - a for k, (a, b) in marks.items() if a is not None and b is not None}


# check bodies


def _version_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split("."))


def _tool_version(path: str) -> str | None:
    try:
        done = subprocess.run([path, "--version"], capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return None
    m = re.search(r"\d+(?:\.\d+)+", done.stdout + done.stderr)
    return m.group(0) if m else None


def _host_python(ctx: SuiteContext) -> None:
    if sys.version_info < (3, 10):
        fail(f"Python is {sys.version.split()[0]}. It should be at least 3.10.")


def _host_tool(tool: dict):
    name, minimum = tool["name"], tool.get("min_version")

    def body(ctx: SuiteContext) -> None:
        path = shutil.which(name)
        if path is None:
            fail(f"{name} is not on PATH. It should be installed.")
        if minimum:
            found = _tool_version(path)
            if found is None:
                fail(f"{name} --version reported no version. It should be at least {minimum}.")
            if _version_tuple(found) < _version_tuple(minimum):
                fail(f"{name} version is {found}. It should be at least {minimum}.")
    return body


def _host_run_dir(ctx: SuiteContext) -> None:
    run_dir = Path(ctx.config.run_dir).resolve()
    probe = run_dir if run_dir.exists() else next(p for p in run_dir.parents if p.exists())
    if not os.access(probe, os.W_OK | os.X_OK):
        fail(f"{probe} is not writable. The run directory {run_dir} must be creatable.")


def expected_section(config: RunConfig, component: str) -> dict:
    section = dataclasses.asdict(getattr(config, component))
    if component == "ce":
        section["slots"] = config.announced_slots
    return section


def _component_ping(component: str):
    def body(ctx: SuiteContext) -> None:
        try:
            reply = ctx.ping(component)
        except (GridError, TransportError) as exc:
            fail(f"{component} does not answer PING: {type(exc).__name__}: {exc}")
        if reply.get("component") != component:
            fail(f"PING answered as {reply.get('component')!r}. It should be {component!r}.")
    return body


def _component_config(component: str):
    def body(ctx: SuiteContext) -> None:
        reported = ctx.describe(component).get("config", {})
        expected = expected_section(ctx.config, component)
        if not reported:
            fail(f"{component} reported no configuration")
        wrong = [f"{k} is {reported[k]!r}. It should be {expected.get(k)!r}"
                 for k in sorted(reported) if reported[k] != expected.get(k)]
        if wrong:
            fail(f"{component} config entry " + "; ".join(wrong) + ".")
    return body


def _component_mode(component: str):
    def body(ctx: SuiteContext) -> None:
        mode = ctx.describe(component).get("mode")
        if mode != ctx.config.mode:
            fail(f"{component} runs in mode {mode!r}. It should be {ctx.config.mode!r}.")
    return body


def _component_port(component: str):
    def body(ctx: SuiteContext) -> None:
        address = ctx.describe(component).get("address", "")
        if address.startswith("inproc:"):
            return
        want = ctx.config.port_of(component)
        port = int(address.rsplit(":", 1)[-1]) if ":" in address else None
        if port != want:
            fail(f"{component} listens on {address or 'nothing'}. It should listen on port {want}.")
    return body


def _component_directory(component: str):
    def body(ctx: SuiteContext) -> None:
        run_dir = Path(ctx.config.run_dir)
        desc = ctx.describe(component)
        paths = [run_dir / desc.get("journal", journal_path(run_dir, component).relative_to(run_dir))]
        for key in ("root", "sandbox_root"):
            if key in desc:
                paths.append(run_dir / desc[key])
        missing = [str(p) for p in paths if not p.exists()]
        if missing:
            fail(f"{component} directory entry {', '.join(missing)} is missing. It should exist.")
    return body


def _snapshot(ctx: SuiteContext) -> dict:
    return ctx.grid.snapshot()


def _catalog_se(ctx: SuiteContext) -> None:
    ses = _snapshot(ctx)["state"]["ses"]
    if "se" not in ses:
        fail(f"SE table has {sorted(ses) or 'no entries'}. It should contain 'se'.")


def _catalog_home(home: str):
    def body(ctx: SuiteContext) -> None:
        dirs = _snapshot(ctx)["state"]["catalog"]["dirs"]
        if home not in dirs:
            fail(f"catalog directory {home} is missing. It should exist.")
    return body


def _catalog_ce(ctx: SuiteContext) -> None:
    ces = _snapshot(ctx)["ces"]
    if "ce" not in ces:
        fail(f"CE table has {sorted(ces) or 'no entries'}. It should contain 'ce'.")


def _catalog_ce_slots(ctx: SuiteContext) -> None:
    entry = _snapshot(ctx)["ces"].get("ce")
    want = ctx.config.worker.slots
    if entry is None:
        fail(f"CE table entry slots is NULL. It should be {want}.")
    if entry.get("slots") != want:
        fail(f"CE table entry slots is {entry.get('slots')}. It should be {want}.")


def _catalog_job_counter(ctx: SuiteContext) -> None:
    state = _snapshot(ctx)["state"]
    ids = [int(i) for i in state["jobs"]]
    want = max(ids, default=0) + 1
    if state["next_id"] != want:
        fail(f"job counter next_id is {state['next_id']}. It should be {want}.")


def _flow_submission(ctx: SuiteContext) -> None:
    obs = ctx.probe
    if obs.job_id is None:
        fail(f"expected the probe job to be accepted, got {obs.submit_error}")


def _flow_agent_script(ctx: SuiteContext) -> None:
    obs = ctx.probe
    if not obs.job_events("ce", EventKind.AGENT_SCRIPT_CREATED):
        fail(f"expected an agent script for job {obs.job_id} in ce.jsonl, found none. "
             f"Probable reason: {obs.diagnosis()}")


def _flow_agent_scheduled(ctx: SuiteContext) -> None:
    obs = ctx.probe
    agents = obs.agents
    if not any(e.detail.get("agent") in agents for e in obs.events("schedd", EventKind.AGENT_SCHEDULED)):
        fail(f"expected one of agents {sorted(agents)} scheduled in schedd.jsonl, found none. "
             f"Probable reason: {obs.diagnosis()}")


def _flow_wrapper(ctx: SuiteContext) -> None:
    obs = ctx.probe
    if not obs.job_events("worker", EventKind.WRAPPER_STARTED):
        fail(f"expected a wrapper start for job {obs.job_id} in worker.jsonl, found none. "
             f"Probable reason: {obs.diagnosis()}")


def _flow_output_registered(ctx: SuiteContext) -> None:
    obs = ctx.probe
    lfn = output_lfn(obs.job_id, PROBE_OUTPUT)
    if obs.status is not JobStatus.DONE:
        got = obs.status.value if obs.status else "no status"
        fail(f"expected job {obs.job_id} DONE with {lfn} registered, got {got}. "
             f"Probable reason: {obs.diagnosis()}")
    try:
        ctx.grid.lookup(lfn)
    except GridError as exc:
        fail(f"expected {lfn} in the catalog, lookup said {exc}. Probable reason: {obs.diagnosis()}")


def _flow_output_content(ctx: SuiteContext) -> None:
    obs = ctx.probe
    lfn = output_lfn(obs.job_id, PROBE_OUTPUT)
    got = ctx.grid.read_bytes(ctx.grid.lookup(lfn))
    want = expected_probe_bytes()
    if got != want:
        fail(f"{lfn} holds {got!r}. It should be {want!r} as printed by running the probe script directly.")


def _flow_latency(ctx: SuiteContext) -> None:
    obs = ctx.probe
    measured = probe_latencies(obs)
    over = [f"{stage} took {measured[stage]} ms (bound {bound} ms)"
            for stage, bound in sorted(ctx.config.suite.latency_bounds_ms.items())
            if stage in measured and measured[stage] > bound]
    if over:
        fail("stage latency exceeded: " + "; ".join(over) + ".")


def _flow_no_errors(ctx: SuiteContext) -> None:
    obs = ctx.probe
    errors = [e for events in obs.journals.values() for e in events
              if e.kind is EventKind.ERROR and e.ts_ms >= obs.started_ms]
    if errors:
        first = errors[0]
        fail(f"journals hold {len(errors)} ERROR event(s) since the probe started, first from "
             f"{first.component}: {first.detail.get('stage', '?')}: {first.detail.get('reason', '')}")


# registry


def build_registry(config: RunConfig, scopes) -> CheckRegistry:
    reg = CheckRegistry()
    C, W, M = Severity.CRITICAL, Severity.WARNING, Severity.MINOR
    if "host" in scopes:
        reg.add("Host Python Version Check", C, "host", _host_python)
        for tool in config.host.required_tools:
            reg.add(f"Host {tool['name']} Tool Check", C, "host", _host_tool(tool))
        reg.add("Host Run Directory Check", C, "host", _host_run_dir)
    if "component" in scopes:
        for comp in COMPONENTS:
            label = comp.upper()
            reg.add(f"{label} Component Ping Check", C, f"component({comp})", _component_ping(comp))
            if comp in ("central", "se"):
                reg.add(f"{label} Component Port Check", C, f"component({comp})", _component_port(comp))
            reg.add(f"{label} Component Directory Check", C, f"component({comp})", _component_directory(comp))
            reg.add(f"{label} Component Config Check", W, f"component({comp})", _component_config(comp))
            reg.add(f"{label} Component Mode Check", M, f"component({comp})", _component_mode(comp))
    if "catalog" in scopes:
        reg.add("Central SE Table Check", C, "catalog", _catalog_se)
        reg.add("Central CE Table Check", C, "catalog", _catalog_ce)
        reg.add("Central CE Slot Capacity Check", C, "catalog", _catalog_ce_slots)
        for home in config.central.user_homes:
            reg.add(f"Central User Home {home} Check", W, "catalog", _catalog_home(home))
        reg.add("Central Job Counter Check", W, "catalog", _catalog_job_counter)
    if "flow" in scopes:
        reg.add("Flow Job Submission Check", C, "flow", _flow_submission)
        reg.add("Flow CE Agent Script Check", C, "flow", _flow_agent_script)
        reg.add("Flow Agent Scheduling Check", C, "flow", _flow_agent_scheduled)
        reg.add("Flow Wrapper Start Check", C, "flow", _flow_wrapper)
        reg.add("Flow Output Registration Check", C, "flow", _flow_output_registered)
        reg.add("Flow Output Content Check", C, "flow", _flow_output_content)
        reg.add("Flow Stage Latency Check", W, "flow", _flow_latency)
        reg.add("Flow Journal Error Check", M, "flow", _flow_no_errors)
    return reg


def _check_scopes(config: RunConfig, scopes) -> list[str]:
    scopes = list(scopes or config.suite.scopes)
    unknown = [s for s in scopes if s not in SCOPES]
    if unknown:
        raise ConfigError(f"unknown scope(s) {unknown}; known: {list(SCOPES)}")
    bad = [k for k in config.suite.latency_bounds_ms if k not in LATENCY_STAGES]
    if bad:
        raise ConfigError(f"unknown latency stage(s) {bad}; known: {list(LATENCY_STAGES)}")
    return [s for s in SCOPES if s in scopes]


def run_suite(config: RunConfig, scopes=None, grid=None) -> TestReport:
    """Run the checks for ``scopes`` (default: the config's) against ``grid``."""
    scopes = _check_scopes(config, scopes)
    if GRID_SCOPES.intersection(scopes) and (grid is None or not grid.alive()):
        raise GridNotRunning(f"scopes {sorted(GRID_SCOPES.intersection(scopes))} need a running grid")
    if grid is not None:
        config = grid.config
    metadata = {"config_hash": config.hash(), "mode": config.mode, "scopes": scopes,
                "start_time": datetime.now(timezone.utc).isoformat(timespec="seconds")}
    ctx = SuiteContext(config, grid)
    report = run_checks(build_registry(config, scopes), ctx, metadata)
    if ctx._probe is not None and ctx._probe.job_id is not None:
        report.run_metadata["probe_job_id"] = ctx._probe.job_id
        if ctx._probe.status is JobStatus.DONE:
            report.run_metadata["latencies_ms"] = probe_latencies(ctx._probe)
    return report


def flow_probe(config: RunConfig, grid) -> list[CheckResult]:
    return list(run_suite(config, ["flow"], grid).results)
