"""Command line: ``gridemu up|down|submit|status|fetch|test|ci``.

Exit codes: 0 success, 1 job/check failure (including any Critical check),
2 usage error, 3 environment problem (no grid, bad config, startup failure).
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path, PurePosixPath

from . import grid as gridmod
from .config import SCOPES, load_config
from .core import JobSpec, JobStatus
from .errors import (ConfigError, GridError, GridNotRunning, NotDone, StartupFailure, TransportError)
from .report import render_json, render_text
from .testsuite import GRID_SCOPES, run_suite

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_ENV = 0, 1, 2, 3

log = logging.getLogger("gridemu")


class UsageError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    parser.add_argument("--mode", choices=("realtime", "stepped"), default=argparse.SUPPRESS)
    parser.add_argument("--run-dir", default=argparse.SUPPRESS)
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridemu", description="Emulated grid with an integration test suite.")
    _common(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("up", help="start the grid")
    _common(p)
    p.add_argument("--detach", action="store_true", help="run the grid in a background process")

    p = sub.add_parser("down", help="stop a running grid")
    _common(p)

    p = sub.add_parser("submit", help="submit a job script ('-' reads stdin)")
    _common(p)
    p.add_argument("script")
    p.add_argument("--arg", action="append", default=[], dest="args", help="script argument (repeatable)")
    p.add_argument("--input", action="append", default=[], dest="inputs", metavar="LFN")
    p.add_argument("--stage", action="append", default=[], metavar="LOCAL=LFN",
                   help="upload a local file under LFN and use it as an input")
    p.add_argument("--output", action="append", default=None, dest="outputs", metavar="PATTERN")
    p.add_argument("--ttl", type=int, default=600, help="seconds")

    p = sub.add_parser("status", help="print a job's status and history")
    _common(p)
    p.add_argument("job_id", type=int)

    p = sub.add_parser("fetch", help="download a finished job's outputs")
    _common(p)
    p.add_argument("job_id", type=int)
    p.add_argument("dest")

    for name, help_text in (("test", "run the test suite against a running grid"),
                            ("ci", "up, test every scope, down")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--format", choices=("table", "json"), default="table")
        if name == "test":
            p.add_argument("--scope", action="append", choices=SCOPES, default=None)
    return parser


def _config(args):
    return load_config(getattr(args, "config", None), mode=getattr(args, "mode", None),
                       run_dir=getattr(args, "run_dir", None))


def _client(config):
    return gridmod.GridClient.from_run_dir(config.run_dir)


def _out(text: str = "") -> None:
    print(text, flush=True)


def _err(text: str) -> None:
    print(f"gridemu: {text}", file=sys.stderr, flush=True)


# subcommands


def cmd_up(args) -> int:
    config = _config(args)
    if config.mode == "stepped":
        raise UsageError("stepped mode lives inside a single process; use it through 'ci' or the harness")
    if args.detach:
        return _up_detached(args, config)
    stop = threading.Event()
    handle = gridmod.up(config)
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    try:
        _out(f"UP {handle.run_dir}")
        for entry in handle.start_log:
            _out(f"{entry['component']} {entry['address']}")
        while not stop.is_set():
            stop.wait(0.2)
    finally:
        gridmod.down(handle)
        _out("DOWN")
    return EXIT_OK


def _up_detached(args, config) -> int:
    run_dir = Path(config.run_dir).resolve()
    run_dir.mkdir(parents=True, exist_ok=True)
    cmd = [sys.executable, "-m", "gridemu", "up", "--run-dir", str(run_dir), "--mode", config.mode]
    if getattr(args, "config", None):
        cmd += ["--config", str(Path(args.config).resolve())]
    log_path = run_dir / "orchestrator.log"
    with open(log_path, "wb") as log_fh:
        proc = subprocess.Popen(cmd, stdout=log_fh, stderr=subprocess.STDOUT, stdin=subprocess.DEVNULL,
                                start_new_session=True, env=_child_env())
    deadline = time.monotonic() + 60
    while time.monotonic() < deadline:
        doc = gridmod.read_run_json(run_dir)
        if doc and doc.get("state") == "running" and doc.get("orchestrator_pid") == proc.pid:
            _out(f"UP {run_dir} pid {proc.pid}")
            for entry in doc.get("start_order", []):
                _out(f"{entry['component']} {entry['address']}")
            return EXIT_OK
        if proc.poll() is not None:
            _err(f"background grid exited with {proc.returncode}:\n{log_path.read_text()[-2000:]}")
            return EXIT_ENV
        time.sleep(0.05)
    proc.kill()
    proc.wait()
    _err("background grid did not come up within 60 s")
    return EXIT_ENV


def _child_env() -> dict:
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = src + (os.pathsep + env["PYTHONPATH"] if env.get("PYTHONPATH") else "")
    return env


def cmd_down(args) -> int:
    config = _config(args)
    run_dir = Path(config.run_dir)
    doc = gridmod.read_run_json(run_dir)
    if not doc or doc.get("state") != "running":
        _out("already down")
        return EXIT_OK
    pid = doc.get("orchestrator_pid")
    if pid == os.getpid():
        raise UsageError("this process owns the grid; call grid.down(handle) instead")
    if gridmod.pid_alive(pid):
        os.kill(pid, signal.SIGTERM)
        deadline = time.monotonic() + 30
        while time.monotonic() < deadline and gridmod.pid_alive(pid):
            time.sleep(0.05)
        if gridmod.pid_alive(pid):
            os.kill(pid, signal.SIGKILL)
    for child in (doc.get("pids") or {}).values():
        if gridmod.pid_alive(child):
            os.kill(child, signal.SIGKILL)
    doc = gridmod.read_run_json(run_dir) or doc
    if doc.get("state") != "down":  # orchestrator died without cleaning up
        doc["state"] = "down"
        gridmod.write_run_json(run_dir, doc)
    _out("down")
    return EXIT_OK


def cmd_submit(args) -> int:
    config = _config(args)
    script = sys.stdin.read() if args.script == "-" else Path(args.script).read_text()
    client = _client(config)
    inputs = list(args.inputs)
    for item in args.stage:
        local, sep, lfn = item.partition("=")
        if not sep:
            raise UsageError(f"--stage expects LOCAL=LFN, got {item!r}")
        client.put_file(Path(local).read_bytes(), lfn)
        inputs.append(lfn)
    spec = JobSpec(script=script, arguments=tuple(args.args), input_lfns=tuple(inputs),
                   output_patterns=tuple(args.outputs if args.outputs is not None else ["stdout.log"]),
                   ttl_seconds=args.ttl, submitter=os.environ.get("USER", "cli"))
    _out(f"JOB {client.submit(spec)}")
    return EXIT_OK


def cmd_status(args) -> int:
    record = _client(_config(args)).record(args.job_id)
    _out(f"JOB {record.id} {record.status.value}")
    for status, ts in record.status_history:
        _out(f"  {ts:>8} ms  {status.value}")
    if record.exit_code is not None:
        _out(f"  exit_code {record.exit_code}")
    for key, value in sorted(record.status_detail.items()):
        if key == "exit_code":
            continue
        _out(f"  {key}: {value}")
    for lfn in record.output_lfns:
        _out(f"  output {lfn}")
    return EXIT_OK


def cmd_fetch(args) -> int:
    client = _client(_config(args))
    record = client.record(args.job_id)
    if record.status is not JobStatus.DONE:
        raise NotDone(f"job {record.id} is {record.status.value}, not DONE", job_id=record.id)
    dest = Path(args.dest)
    prefix = PurePosixPath(f"/outputs/{record.id}")
    for entry in client.outputs(record.id):
        rel = PurePosixPath(entry.lfn).relative_to(prefix)
        target = dest / Path(*rel.parts)
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_bytes(client.read_bytes(entry))
        _out(f"{entry.lfn} -> {target}")
    return EXIT_OK


def _print_report(report, fmt: str) -> None:
    _out(render_json(report) if fmt == "json" else render_text(report))


def cmd_test(args) -> int:
    config = _config(args)
    scopes = args.scope or config.suite.scopes
    client = _client(config) if GRID_SCOPES.intersection(scopes) else None
    report = run_suite(config, scopes, client)
    _print_report(report, args.format)
    return EXIT_FAIL if report.critical_failed else EXIT_OK


def cmd_ci(args) -> int:
    config = _config(args)
    try:
        handle = gridmod.up(config)
    except StartupFailure as exc:
        _err(f"up failed: {exc}")
        return EXIT_ENV
    try:
        report = run_suite(handle.config, list(SCOPES), handle.client())
    finally:
        gridmod.down(handle)
    (handle.run_dir / "report.json").write_text(render_json(report) + "\n")
    _print_report(report, args.format)
    return EXIT_FAIL if report.critical_failed else EXIT_OK


COMMANDS = {"up": cmd_up, "down": cmd_down, "submit": cmd_submit, "status": cmd_status,
            "fetch": cmd_fetch, "test": cmd_test, "ci": cmd_ci}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except (GridNotRunning, ConfigError, StartupFailure, TransportError) as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_ENV
    except GridError as exc:
        _err(f"{type(exc).__name__}: {exc}")
        return EXIT_FAIL
    except OSError as exc:
        _err(f"{exc}")
        return EXIT_ENV


if __name__ == "__main__":
    sys.exit(main())
