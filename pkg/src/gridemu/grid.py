"""Bring a grid up and down, and talk to a running one.

``up`` starts components in the order central, se, schedd, worker, ce and
gates each step on a PING. Components run inside this process by default;
with ``config.processes`` each one is a separate OS process (see
:mod:`gridemu.node`).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import selectors
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from .batch_queue import BatchQueue
from .central import Central, CatalogEntry
from .compute_element import ComputeElement
from .config import COMPONENTS, RunConfig
from .core import JobRecord, JobSpec, compute_checksum, read_journals
from .errors import (ChecksumMismatch, GridError, GridNotRunning, StartupFailure, TransportError)
from .runtime import RealtimeRuntime, SteppedRuntime
from .storage_element import StorageElement, decode_download, encode_upload
from .transport import Endpoint, Kind, serve
from .worker import Worker

log = logging.getLogger(__name__)

START_ORDER = COMPONENTS
COMPONENT_CLASSES = {"central": Central, "se": StorageElement, "schedd": BatchQueue,
                     "worker": Worker, "ce": ComputeElement}
RESET_PATHS = ("journal", "sandbox", "se", "central_state.json", "report.json", "config.json")


def component_class(name: str):
    return COMPONENT_CLASSES[name]


def read_run_json(run_dir: str | Path) -> dict | None:
    path = Path(run_dir) / "run.json"
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError):
        return None


def write_run_json(run_dir: str | Path, doc: dict) -> None:
    path = Path(run_dir) / "run.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
    tmp.replace(path)


def pid_alive(pid: int | None) -> bool:
    if not pid:
        return False
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    try:  # a zombie child counts as dead
        with open(f"/proc/{pid}/stat") as fh:
            return fh.read().split(")")[-1].split()[0] != "Z"
    except OSError:
        return True


def prepare_run_dir(run_dir: Path) -> None:
    existing = read_run_json(run_dir)
    if existing and existing.get("state") == "running" and existing.get("orchestrator_pid") != os.getpid() \
            and pid_alive(existing.get("orchestrator_pid")):
        raise StartupFailure(f"{run_dir} already hosts a running grid (pid {existing['orchestrator_pid']})",
                             component="orchestrator", reason="RunDirBusy")
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        for name in RESET_PATHS:
            path = run_dir / name
            if path.is_dir():
                shutil.rmtree(path)
            elif path.exists():
                path.unlink()
        (run_dir / "journal").mkdir()
        probe = run_dir / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise StartupFailure(f"run_dir {run_dir} not usable: {exc}", component="orchestrator",
                             reason="RunDirUnwritable") from exc


@dataclass
class RunHandle:
    config: RunConfig
    run_dir: Path
    runtime: object
    components: dict = field(default_factory=dict)
    listeners: dict = field(default_factory=dict)
    processes: dict = field(default_factory=dict)
    started: list = field(default_factory=list)
    start_log: list = field(default_factory=list)
    start_epoch: float = 0.0
    is_down: bool = False

    @property
    def mode(self) -> str:
        return self.config.mode

    def client(self, sender: str = "client") -> "GridClient":
        return GridClient(self.runtime, self.run_dir, self.config, sender=sender, handle=self)

    def run_doc(self, state: str) -> dict:
        return {
            "state": state,
            "mode": self.config.mode,
            "processes": self.config.processes,
            "orchestrator_pid": os.getpid(),
            "pids": {n: p.pid for n, p in self.processes.items()},
            "endpoints": self._addresses(),
            "start_order": self.start_log,
            "start_epoch": self.start_epoch,
            "config_hash": self.config.hash(),
            "config": self.config.to_dict(),
        }

    def _addresses(self) -> dict:
        out = {}
        for name in self.started:
            try:
                out[name] = self.runtime.address_of(name)
            except GridError:
                pass
        return out


def up(config: RunConfig, run_dir: str | Path | None = None) -> RunHandle:
    """Start every component in order; on failure tear down what started and raise StartupFailure."""
    config.validate()
    run_dir = Path(run_dir or config.run_dir).resolve()
    prepare_run_dir(run_dir)
    config = dataclasses.replace(config, run_dir=str(run_dir))
    start_epoch = time.time()
    if config.mode == "stepped":
        runtime = SteppedRuntime(seed=config.seed, call_timeout_ms=config.call_timeout_ms)
    else:
        runtime = RealtimeRuntime(start_epoch=start_epoch, call_timeout_ms=config.call_timeout_ms)
    handle = RunHandle(config, run_dir, runtime, start_epoch=start_epoch)
    if config.processes:
        (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2))
    for name in START_ORDER:
        try:
            _start_component(handle, name)
            t0 = time.monotonic()
            reply = runtime.call("orchestrator", name, Kind.PING, {})
            if reply.get("component") != name:
                raise StartupFailure(f"{name} answered PING as {reply.get('component')!r}")
        except Exception as exc:
            reason = exc.code if isinstance(exc, GridError) else type(exc).__name__
            if isinstance(exc, StartupFailure) and "reason" in exc.info:
                reason = exc.info["reason"]
            _teardown(handle)
            handle.is_down = True
            raise StartupFailure(f"{name} failed to start: {reason}: {exc}",
                                 component=name, reason=reason) from exc
        handle.start_log.append({"component": name, "ping_ms": round((time.monotonic() - t0) * 1000, 3),
                                 "ts_ms": runtime.now_ms(), "address": runtime.address_of(name)})
        log.info("%s up at %s", name, runtime.address_of(name))
    write_run_json(run_dir, handle.run_doc("running"))
    return handle


def _start_component(handle: RunHandle, name: str) -> None:
    config, runtime = handle.config, handle.runtime
    if config.processes:
        _spawn_component(handle, name)
        handle.started.append(name)
        return
    component = component_class(name)(runtime, config)
    handle.components[name] = component
    if isinstance(runtime, SteppedRuntime):
        runtime.register(name, component.handle)
    else:
        listener = serve(Endpoint(name, f"{config.bind_host}:{config.port_of(name)}"), component.handle)
        handle.listeners[name] = listener
        component.address = listener.address
        runtime.set_endpoint(name, listener.address)
    handle.started.append(name)
    component.start()


def _spawn_component(handle: RunHandle, name: str, timeout_s: float = 30.0) -> None:
    runtime = handle.runtime
    cmd = [sys.executable, "-m", "gridemu.node", "--component", name,
           "--config", str(handle.run_dir / "config.json"),
           "--peers", json.dumps(dict(runtime.endpoints)),
           "--start-epoch", repr(handle.start_epoch)]
    log_path = handle.run_dir / f"{name}.log"
    env = dict(os.environ)
    src = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (src, env.get("PYTHONPATH")) if p)
    with open(log_path, "ab") as err:
        proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=err, stdin=subprocess.DEVNULL, env=env)
    handle.processes[name] = proc
    sel = selectors.DefaultSelector()
    sel.register(proc.stdout, selectors.EVENT_READ)
    line = b""
    if sel.select(timeout=timeout_s):
        line = proc.stdout.readline()
    sel.close()
    words = line.decode(errors="replace").split(maxsplit=2)
    if len(words) >= 2 and words[0] == "READY":
        runtime.set_endpoint(name, words[1])
        return
    try:
        proc.wait(timeout=5)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()
    proc.stdout.close()
    if len(words) >= 2 and words[0] == "FAILED":
        raise StartupFailure(words[2] if len(words) > 2 else words[1], component=name, reason=words[1])
    raise StartupFailure(f"{name} process did not report READY (see {log_path.name})",
                         component=name, reason="NoReady")


def _teardown(handle: RunHandle) -> None:
    runtime = handle.runtime
    for name in reversed(handle.started):
        try:
            runtime.call("orchestrator", name, Kind.SHUTDOWN, {}, timeout_ms=3000)
        except Exception:
            pass
        component = handle.components.get(name)
        if component is not None:
            component.stop()
        listener = handle.listeners.get(name)
        if listener is not None:
            listener.stop()
        proc = handle.processes.get(name)
        if proc is not None:
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
            if proc.stdout:
                proc.stdout.close()
        if hasattr(runtime, "cancel"):
            runtime.cancel(name)
    handle.started.clear()


def down(handle: RunHandle) -> dict:
    """Stop components in reverse start order. Idempotent."""
    if handle.is_down:
        return {"noop": True}
    non_terminal: list[int] = []
    if "central" in handle.started:
        try:
            state = handle.runtime.call("orchestrator", "central", Kind.SNAPSHOT, {}, timeout_ms=3000)["state"]
            non_terminal = sorted(int(j) for j, r in state["jobs"].items()
                                  if r["status"] not in ("DONE", "ERROR_EXEC", "ERROR_SAVE", "ERROR_AGENT", "EXPIRED"))
        except Exception:
            pass
    doc = handle.run_doc("stopping")
    _teardown(handle)
    handle.is_down = True
    doc.update(state="down", stopped_at=time.time(), non_terminal_jobs=non_terminal)
    write_run_json(handle.run_dir, doc)
    return {"noop": False, "non_terminal_jobs": non_terminal}


class GridClient:
    """Uniform access to a grid for the CLI, the test suite and the harness."""

    def __init__(self, runtime, run_dir: str | Path, config: RunConfig, sender: str = "client",
                 handle: RunHandle | None = None):
        self.runtime = runtime
        self.run_dir = Path(run_dir)
        self.config = config
        self.sender = sender
        self.handle = handle

    @classmethod
    def from_run_dir(cls, run_dir: str | Path, sender: str = "client") -> "GridClient":
        doc = read_run_json(run_dir)
        if not doc or doc.get("state") != "running":
            raise GridNotRunning(f"no running grid recorded in {Path(run_dir) / 'run.json'}")
        if doc.get("mode") == "stepped":
            raise GridNotRunning("a stepped-mode grid lives inside its own process only")
        config = RunConfig.from_dict({k: v for k, v in doc["config"].items()})
        runtime = RealtimeRuntime(doc["endpoints"], start_epoch=doc.get("start_epoch"),
                                  call_timeout_ms=config.call_timeout_ms)
        client = cls(runtime, run_dir, config, sender)
        if not client.alive():
            raise GridNotRunning(f"central at {doc['endpoints'].get('central')} does not answer PING")
        return client

    @property
    def mode(self) -> str:
        return self.runtime.mode

    def call(self, target: str, kind: Kind, payload: dict | None = None, timeout_ms: int | None = None) -> dict:
        return self.runtime.call(self.sender, target, kind, payload or {}, timeout_ms)

    def now_ms(self) -> int:
        return self.runtime.now_ms()

    def wait(self, ms: int) -> None:
        if isinstance(self.runtime, SteppedRuntime):
            self.runtime.advance(ms)
        else:
            time.sleep(ms / 1000.0)

    def alive(self, component: str = "central") -> bool:
        try:
            self.call(component, Kind.PING, timeout_ms=2000)
            return True
        except (TransportError, GridError):
            return False

    def ping(self, component: str) -> dict:
        return self.call(component, Kind.PING, timeout_ms=3000)

    def submit(self, spec: JobSpec) -> int:
        return int(self.call("central", Kind.SUBMIT_JOB, {"spec": spec.to_dict()})["job_id"])

    def record(self, job_id: int) -> JobRecord:
        return JobRecord.from_dict(self.call("central", Kind.QUERY_STATUS, {"job_id": job_id})["record"])

    def outputs(self, job_id: int) -> list[CatalogEntry]:
        doc = self.call("central", Kind.FETCH_OUTPUT_LIST, {"job_id": job_id})
        return [CatalogEntry.from_dict(e) for e in doc["outputs"]]

    def lookup(self, lfn: str) -> CatalogEntry:
        return CatalogEntry.from_dict(self.call("central", Kind.LOOKUP, {"lfn": lfn})["entry"])

    def snapshot(self) -> dict:
        return self.call("central", Kind.SNAPSHOT)

    def read_bytes(self, entry: CatalogEntry) -> bytes:
        se = entry.replicas[0][0]
        data, _ = decode_download(self.call(se, Kind.DOWNLOAD, {"guid": entry.guid}))
        if not entry.checksum.matches(data):
            raise ChecksumMismatch(f"{entry.lfn}: fetched bytes do not match catalog checksum {entry.checksum.digest}",
                                   lfn=entry.lfn)
        return data

    def put_file(self, data: bytes, lfn: str) -> CatalogEntry:
        """Upload bytes to the SE and catalog them under ``lfn`` (a user-home path)."""
        checksum = compute_checksum(data)
        guid = self.runtime.new_guid()
        se = "se"
        self.call(se, Kind.UPLOAD, encode_upload(guid, data, checksum))
        doc = self.call("central", Kind.REGISTER_FILE, {
            "lfn": lfn, "guid": guid, "size": len(data), "checksum": checksum.to_dict(),
            "replica": {"se": se, "path": f"{guid[:2]}/{guid[2:4]}/{guid}"}})
        return CatalogEntry.from_dict(doc["entry"])

    def journals(self) -> dict:
        return read_journals(self.run_dir)
