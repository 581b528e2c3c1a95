"""Run configuration and fault plans.

A config file is one JSON document whose keys mirror the dataclasses below,
e.g. ``{"worker": {"slots": 4}, "faults": [{"component": "worker",
"stage": "upload", "mode": "fail"}]}``. Anything omitted keeps its default,
so an empty document yields a working one-CE, one-worker, two-slot grid.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError, InjectedFault

COMPONENTS = ("central", "se", "schedd", "worker", "ce")
STAGES = ("download", "execute", "upload", "register", "request_job")
FAULT_STAGES = {
    "worker": frozenset(STAGES),
    "se": frozenset({"download", "upload"}),
    "central": frozenset({"request_job", "register"}),
}
FAULT_MODES = ("fail", "delay_ms", "corrupt")
SCOPES = ("host", "component", "catalog", "flow")


@dataclass
class CentralConfig:
    port: int = 8098
    expire_interval_ms: int = 1000
    user_homes: list = field(default_factory=lambda: ["/users/admin", "/users/probe"])


@dataclass
class SEConfig:
    port: int = 8099
    capacity_bytes: int = 10 * 1024**3


@dataclass
class CEConfig:
    port: int = 0
    poll_interval_ms: int = 200
    max_pending_agents: int = 4
    resource_announcement: dict = field(default_factory=lambda: {"slots": None, "memory_mb": 2048})


@dataclass
class ScheddConfig:
    port: int = 0
    tick_ms: int = 200


@dataclass
class WorkerConfig:
    port: int = 0
    slots: int = 2
    keep_sandboxes: bool = False


@dataclass
class HostConfig:
    required_tools: list = field(default_factory=lambda: [
        {"name": "sh"},
        {"name": "python3", "min_version": "3.10"},
    ])


@dataclass
class SuiteConfig:
    scopes: list = field(default_factory=lambda: list(SCOPES))
    probe_timeout_ms: int = 30000
    probe_poll_ms: int = 100
    latency_bounds_ms: dict = field(default_factory=lambda: {"total": 20000})


@dataclass(frozen=True)
class FaultSpec:
    component: str
    stage: str
    mode: str = "fail"
    delay_ms: int = 0
    match: tuple[int, ...] | None = None  # job ids; None matches every job

    def matches(self, component: str, stage: str, job_id: int | None) -> bool:
        if (component, stage) != (self.component, self.stage):
            return False
        return self.match is None or (job_id is not None and job_id in self.match)

    def to_dict(self) -> dict:
        d = {"component": self.component, "stage": self.stage, "mode": self.mode}
        if self.mode == "delay_ms":
            d["delay_ms"] = self.delay_ms
        if self.match is not None:
            d["match"] = list(self.match)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        mode = d.get("mode", "fail")
        delay = int(d.get("delay_ms", 0))
        if isinstance(mode, dict):  # {"delay_ms": 500}
            (mode, delay), = mode.items()
        elif isinstance(mode, str) and mode.startswith("delay_ms(") and mode.endswith(")"):
            mode, delay = "delay_ms", int(mode[len("delay_ms("):-1])
        match = d.get("match")
        if match is not None:
            match = tuple(int(j) for j in (match if isinstance(match, (list, tuple)) else [match]))
        return cls(d["component"], d["stage"], mode, int(delay), match)

    def problems(self) -> list[str]:
        if self.component not in FAULT_STAGES:
            return [f"fault component {self.component!r} accepts no faults"]
        out = []
        if self.stage not in FAULT_STAGES[self.component]:
            out.append(f"stage {self.stage!r} is not valid for component {self.component!r}")
        if self.mode not in FAULT_MODES:
            out.append(f"unknown fault mode {self.mode!r}")
        if self.mode == "delay_ms" and self.delay_ms < 0:
            out.append("delay_ms must be non-negative")
        return out


class FaultPlan:
    """Looks up and applies configured faults. Inert when empty."""

    def __init__(self, specs=()):
        self.specs = tuple(specs)

    def __bool__(self) -> bool:
        return bool(self.specs)

    def lookup(self, component: str, stage: str, job_id: int | None = None) -> FaultSpec | None:
        for spec in self.specs:
            if spec.matches(component, stage, job_id):
                return spec
        return None

    def apply(self, component: str, stage: str, job_id: int | None, sleep) -> bool:
        """Raise for ``fail``, sleep for ``delay_ms``; return True when the caller must corrupt."""
        spec = self.lookup(component, stage, job_id)
        if spec is None:
            return False
        if spec.mode == "delay_ms":
            sleep(spec.delay_ms)
            return False
        if spec.mode == "corrupt" and stage in ("download", "upload"):
            return True
        raise InjectedFault(f"injected fault at stage {stage}", stage=stage, component=component)


@dataclass
class RunConfig:
    mode: str = "realtime"
    run_dir: str = "grid-run"
    bind_host: str = "127.0.0.1"
    seed: int = 0
    processes: bool = False
    call_timeout_ms: int = 5000
    central: CentralConfig = field(default_factory=CentralConfig)
    se: SEConfig = field(default_factory=SEConfig)
    ce: CEConfig = field(default_factory=CEConfig)
    schedd: ScheddConfig = field(default_factory=ScheddConfig)
    worker: WorkerConfig = field(default_factory=WorkerConfig)
    host: HostConfig = field(default_factory=HostConfig)
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    faults: list = field(default_factory=list)

    @property
    def fault_plan(self) -> FaultPlan:
        return FaultPlan(self.faults)

    @property
    def announced_slots(self) -> int:
        slots = self.ce.resource_announcement.get("slots")
        return self.worker.slots if slots is None else int(slots)

    def port_of(self, component: str) -> int:
        return getattr(self, component).port

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["faults"] = [f.to_dict() for f in self.faults]
        return d

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("run_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> "RunConfig":
        problems = []
        if self.mode not in ("realtime", "stepped"):
            problems.append(f"mode must be realtime or stepped, not {self.mode!r}")
        fixed = [(c, self.port_of(c)) for c in COMPONENTS if self.port_of(c)]
        ports = [p for _, p in fixed]
        if len(ports) != len(set(ports)):
            problems.append(f"ports must be distinct: {dict(fixed)}")
        for c, p in fixed:
            if not 0 < p < 65536:
                problems.append(f"{c}.port {p} out of range")
        if self.worker.slots < 0:
            problems.append("worker.slots must be >= 0")
        if self.ce.poll_interval_ms < 1:
            problems.append("ce.poll_interval_ms must be >= 1")
        if self.ce.max_pending_agents < 1:
            problems.append("ce.max_pending_agents must be >= 1")
        if self.schedd.tick_ms < 1:
            problems.append("schedd.tick_ms must be >= 1")
        for scope in self.suite.scopes:
            if scope not in SCOPES:
                problems.append(f"unknown suite scope {scope!r}")
        for fault in self.faults:
            problems.extend(fault.problems())
        if self.mode == "stepped" and self.processes:
            problems.append("stepped mode runs in one process; processes must be false")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        return merge(cls(), doc)


_SECTIONS = {"central": CentralConfig, "se": SEConfig, "ce": CEConfig, "schedd": ScheddConfig,
             "worker": WorkerConfig, "host": HostConfig, "suite": SuiteConfig}


def merge(config: RunConfig, doc: dict[str, Any]) -> RunConfig:
    """Return a copy of ``config`` with the keys of ``doc`` overlaid."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    updates: dict[str, Any] = {}
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key, value in doc.items():
        if key not in top:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            section = getattr(config, key)
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            known = {f.name for f in dataclasses.fields(section)}
            unknown = set(value) - known
            if unknown:
                raise ConfigError(f"unknown keys under {key!r}: {sorted(unknown)}")
            updates[key] = dataclasses.replace(section, **value)
        elif key == "faults":
            try:
                updates[key] = [v if isinstance(v, FaultSpec) else FaultSpec.from_dict(v) for v in value]
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"bad fault spec: {exc}") from exc
        else:
            updates[key] = value
    return dataclasses.replace(config, **updates)


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    config = RunConfig()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        config = merge(config, doc)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        config = merge(config, overrides)
    return config.validate()
