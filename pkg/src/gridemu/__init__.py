"""A desk-scale emulator of a pull-model computing grid with a built-in integration test suite."""

from .config import FaultSpec, RunConfig, load_config
from .core import JobRecord, JobSpec, JobStatus
from .grid import GridClient, RunHandle, down, up
from .report import CheckResult, CheckStatus, Severity, TestReport
from .testsuite import run_suite

__version__ = "0.1.0"

__all__ = [
    "CheckResult", "CheckStatus", "FaultSpec", "GridClient", "JobRecord", "JobSpec", "JobStatus",
    "RunConfig", "RunHandle", "Severity", "TestReport", "down", "load_config", "run_suite", "up",
]
