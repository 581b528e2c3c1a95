"""Check results, test reports and their text/JSON renderings."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field


class Severity(str, enum.Enum):
    CRITICAL = "Critical"
    WARNING = "Warning"
    MINOR = "Minor"

    def __str__(self) -> str:
        return self.value


class CheckStatus(str, enum.Enum):
    PASSED = "PASSED"
    FAILED = "FAILED"
    SKIPPED = "SKIPPED"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class CheckResult:
    id: int
    name: str
    severity: Severity
    status: CheckStatus
    message: str = ""

    def __post_init__(self):
        if self.status is CheckStatus.FAILED and not self.message:
            raise ValueError(f"check {self.id} FAILED without a message")

    def to_dict(self) -> dict:
        return {"id": self.id, "name": self.name, "severity": self.severity.value,
                "status": self.status.value, "message": self.message}

    @classmethod
    def from_dict(cls, d: dict) -> "CheckResult":
        return cls(int(d["id"]), d["name"], Severity(d["severity"]), CheckStatus(d["status"]),
                   d.get("message", ""))


@dataclass(frozen=True)
class Tally:
    total: int = 0
    failed: int = 0
    passed: int = 0


@dataclass(frozen=True)
class TestReport:
    results: tuple[CheckResult, ...] = ()
    aborted: bool = False
    run_metadata: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class

    @property
    def summary(self) -> dict[Severity, Tally]:
        return tally(self.results)

    @property
    def skipped(self) -> int:
        return sum(1 for r in self.results if r.status is CheckStatus.SKIPPED)

    @property
    def critical_failed(self) -> bool:
        return any(r.status is CheckStatus.FAILED and r.severity is Severity.CRITICAL for r in self.results)


def tally(results) -> dict[Severity, Tally]:
    out = {}
    for sev in Severity:
        failed = sum(1 for r in results if r.severity is sev and r.status is CheckStatus.FAILED)
        passed = sum(1 for r in results if r.severity is sev and r.status is CheckStatus.PASSED)
        out[sev] = Tally(failed + passed, failed, passed)
    return out


_BORDER = "+-----+-----+-----+-----+-----+"
_HEADER = "| id | Name | Status | Level | Message |"


def render_row(result: CheckResult) -> str:
    row = f"{result.id} | {result.name} | {result.status.value} | {result.severity.value} |"
    if result.message:
        row += " " + " ".join(result.message.split())
    return row


def render_table(report: TestReport) -> str:
    lines = [_BORDER, _HEADER, _BORDER]
    lines.extend(render_row(r) for r in sorted(report.results, key=lambda r: r.id))
    lines.append(_BORDER)
    return "\n".join(lines)


def render_summary(report: TestReport) -> str:
    return "\n".join(f"{sev.value}: {t.total} ({t.failed} Failed, {t.passed} Passed)"
                     for sev, t in report.summary.items())


def render_text(report: TestReport) -> str:
    """Table, then the framed summary block, as printed by the CLI."""
    return f"{render_table(report)}\nTest Summary:\n-----\n{render_summary(report)}\n-----"


REPORT_SCHEMA = "gridemu.report/1"


def render_json(report: TestReport) -> str:
    doc = {
        "schema": REPORT_SCHEMA,
        "aborted": report.aborted,
        "results": [r.to_dict() for r in report.results],
        "summary": {sev.value: {"total": t.total, "failed": t.failed, "passed": t.passed}
                    for sev, t in report.summary.items()},
        "skipped": report.skipped,
        "run_metadata": report.run_metadata,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def parse_json(text: str) -> TestReport:
    doc = json.loads(text)
    if doc.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unknown report schema {doc.get('schema')!r}")
    report = TestReport(tuple(CheckResult.from_dict(r) for r in doc["results"]),
                        bool(doc["aborted"]), dict(doc.get("run_metadata") or {}))
    recount = {sev.value: {"total": t.total, "failed": t.failed, "passed": t.passed}
               for sev, t in report.summary.items()}
    if doc.get("summary") != recount:
        raise ValueError("report summary disagrees with its results")
    return report
