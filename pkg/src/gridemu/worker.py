"""Worker node: job agents pull work from central and run it in a JobWrapper."""

from __future__ import annotations

import enum
import os
import shutil
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from pathlib import Path, PurePosixPath

from .batch_queue import AgentStartupScript
from .component import Component
from .core import Checksum, EventKind, JobSpec, JobStatus, compute_checksum
from .errors import (CentralUnreachable, DownloadFailure, ExecutionSpawnFailure, GridError, IllegalTransition,
                     InjectedFault, NoFreeSlot, TransportError, UploadFailure)
from .storage_element import _flip_one_byte, decode_download, encode_upload
from .transport import Kind

LOG_FILES = ("stderr.log", "stdout.log")


class AgentOutcome(str, enum.Enum):
    RAN_JOB = "RAN_JOB"
    NO_JOB = "NO_JOB"
    FAILED = "FAILED"


@dataclass(frozen=True)
class Sandbox:
    root: Path
    inputs: tuple[str, ...] = ()


@dataclass(frozen=True)
class WrapperResult:
    job_id: int
    exit_code: int | None
    produced: tuple[tuple[str, int, Checksum], ...]
    duration_ms: int
    status: JobStatus = JobStatus.DONE


def output_lfn(job_id: int, relative_path: str) -> str:
    return f"/outputs/{job_id}/{relative_path}"


def resolve_outputs(sandbox: Sandbox, patterns) -> list[str]:
    """Files under the sandbox matching any pattern, plus both logs, sorted."""
    root = Path(sandbox.root)
    found = {name for name in LOG_FILES}
    for pattern in patterns:
        for path in root.glob(pattern):
            if path.is_file():
                rel = path.relative_to(root).as_posix()
                if rel not in sandbox.inputs:
                    found.add(rel)
    return sorted(found)


class _StageFailure(Exception):
    def __init__(self, status: JobStatus, stage: str, reason: str, **detail):
        super().__init__(reason)
        self.status, self.stage, self.reason, self.detail = status, stage, reason, detail


class Worker(Component):
    name = "worker"

    def __init__(self, runtime, config, name: str | None = None):
        super().__init__(runtime, config, name)
        self.sandbox_root = self.run_dir / "sandbox"
        self.sandbox_root.mkdir(parents=True, exist_ok=True)
        self.slots = config.worker.slots
        self._lock = threading.Lock()
        self.running: dict[str, AgentStartupScript] = {}
        self._procs: dict[int, subprocess.Popen] = {}
        self.halting = threading.Event()

    def config_section(self) -> dict:
        w = self.config.worker
        return {"port": w.port, "slots": w.slots, "keep_sandboxes": w.keep_sandboxes}

    def describe(self) -> dict:
        d = super().describe()
        d["sandbox_root"] = str(self.sandbox_root.relative_to(self.run_dir))
        return d

    def start(self) -> None:
        super().start()
        self.call("schedd", Kind.ANNOUNCE, {"role": "worker", "name": self.name,
                                            "slots": self.slots, "address": self.address})

    def stop(self) -> None:
        # agents die with the node: no further reports once halting
        self.halting.set()
        self.rt.cancel(self.name)
        with self._lock:
            procs = list(self._procs.values())
        for proc in procs:
            _kill(proc)
        deadline = time.monotonic() + 5
        while self.running and time.monotonic() < deadline and self.rt.mode == "realtime":
            time.sleep(0.01)
        super().stop()

    # agent

    def on_start_agent(self, p: dict) -> dict:
        script = AgentStartupScript.from_dict(p["script"])
        with self._lock:
            if len(self.running) >= self.slots:
                raise NoFreeSlot(f"{self.name} has no free slot for {script.agent_id}")
            self.running[script.agent_id] = script
        self.rt.defer(self.name, lambda: self._agent_main(script))
        return {"accepted": script.agent_id}

    def _agent_main(self, script: AgentStartupScript) -> None:
        try:
            self.start_agent(script)
        except Exception:
            if not self.halting.is_set():
                raise
        finally:
            with self._lock:
                self.running.pop(script.agent_id, None)

    def start_agent(self, script: AgentStartupScript) -> tuple[AgentOutcome, int | None]:
        agent = script.agent_id
        self.journal.append(EventKind.AGENT_STARTED, detail={"agent": agent})
        try:
            grant = self.call("central", Kind.REQUEST_JOB, {"agent_id": agent, "worker": self.name})["job"]
        except (TransportError, GridError) as exc:
            reason = f"request_job failed: {exc}"
            if isinstance(exc, TransportError):
                reason = str(CentralUnreachable(reason))
            self.error(stage="request_job", agent=agent, reason=reason)
            self._complete(agent, "FAILED")
            return AgentOutcome.FAILED, None
        if grant is None:
            self.journal.append(EventKind.NO_JOB, detail={"agent": agent})
            self._complete(agent, "COMPLETED")
            return AgentOutcome.NO_JOB, None
        job_id = int(grant["job_id"])
        self.journal.append(EventKind.JOB_GRANTED, job_id=job_id, detail={"agent": agent})
        try:
            self.faults.apply(self.name, "request_job", job_id, self.rt.sleep)
        except InjectedFault as exc:
            self.error(job_id, stage="request_job", agent=agent, reason=str(exc))
            self._report(job_id, JobStatus.ERROR_AGENT, {"stage": "request_job", "reason": str(exc)})
            self._complete(agent, "COMPLETED")
            return AgentOutcome.RAN_JOB, job_id
        self.run_wrapper(job_id, JobSpec.from_dict(grant["spec"]), agent)
        self._complete(agent, "COMPLETED")
        return AgentOutcome.RAN_JOB, job_id

    def _complete(self, agent: str, outcome: str) -> None:
        if self.halting.is_set():
            return
        try:
            self.call("schedd", Kind.COMPLETE_AGENT, {"agent_id": agent, "outcome": outcome})
        except (TransportError, GridError) as exc:
            self.error(stage="complete_agent", agent=agent, reason=str(exc))

    def _report(self, job_id: int, status: JobStatus, detail: dict | None = None) -> bool:
        """Push a status update to central; False if central refused or was unreachable."""
        if self.halting.is_set():
            return False
        try:
            self.call("central", Kind.UPDATE_STATUS,
                      {"job_id": job_id, "status": status.value, "detail": detail or {}})
            return True
        except IllegalTransition as exc:
            self.error(job_id, stage="update_status", reason=f"{exc} (job expired or cancelled?)")
        except (TransportError, GridError) as exc:
            self.error(job_id, stage="update_status", reason=str(exc))
        return False

    # wrapper

    def run_wrapper(self, job_id: int, spec: JobSpec, agent: str = "") -> WrapperResult:
        started = self.rt.now_ms()
        sandbox_dir = self.sandbox_root / str(job_id)
        shutil.rmtree(sandbox_dir, ignore_errors=True)
        sandbox_dir.mkdir(parents=True)
        if not self._report(job_id, JobStatus.RUNNING, {"agent": agent, "worker": self.name}):
            return WrapperResult(job_id, None, (), 0, JobStatus.ERROR_AGENT)
        self.journal.append(EventKind.WRAPPER_STARTED, job_id=job_id, detail={"agent": agent})
        exit_code, produced = None, ()
        try:
            sandbox = self._stage_inputs(job_id, spec, sandbox_dir)
            exit_code = self._execute(job_id, spec, sandbox)
            if self.halting.is_set():
                return WrapperResult(job_id, exit_code, (), self.rt.now_ms() - started, JobStatus.RUNNING)
            if exit_code != 0:
                self._upload_logs_on_failure(job_id, sandbox, exit_code)
                status = JobStatus.ERROR_EXEC
            else:
                if not self._report(job_id, JobStatus.SAVING):
                    raise _StageFailure(JobStatus.ERROR_SAVE, "update_status", "central refused SAVING")
                produced = self._save_outputs(job_id, spec, sandbox)
                status = JobStatus.DONE if self._report(job_id, JobStatus.DONE, {"exit_code": 0}) \
                    else JobStatus.ERROR_SAVE
        except _StageFailure as failure:
            detail = {"stage": failure.stage, "reason": failure.reason, **failure.detail}
            self.error(job_id, **detail)
            self._report(job_id, failure.status, detail)
            status = failure.status
        finally:
            if not self.config.worker.keep_sandboxes:
                shutil.rmtree(sandbox_dir, ignore_errors=True)
        return WrapperResult(job_id, exit_code, tuple(produced), self.rt.now_ms() - started, status)

    def _stage_inputs(self, job_id: int, spec: JobSpec, root: Path) -> Sandbox:
        names = []
        for lfn in spec.input_lfns:
            try:
                corrupt = self.faults.apply(self.name, "download", job_id, self.rt.sleep)
                entry = self.call("central", Kind.LOOKUP, {"lfn": lfn})["entry"]
                se = entry["replicas"][0][0]
                data, _ = decode_download(self.call(se, Kind.DOWNLOAD, {"guid": entry["guid"], "job_id": job_id}))
                if corrupt:
                    data = _flip_one_byte(data)
                expected = Checksum.from_dict(entry["checksum"])
                if not expected.matches(data):
                    raise DownloadFailure(
                        f"checksum mismatch for {lfn}: catalog {expected.digest}, "
                        f"received {compute_checksum(data, expected.algorithm).digest}")
            except (GridError, KeyError, IndexError) as exc:
                raise _StageFailure(JobStatus.ERROR_AGENT, "download", f"{lfn}: {exc}", lfn=lfn) from exc
            name = PurePosixPath(lfn).name
            (root / name).write_bytes(data)
            names.append(name)
            self.journal.append(EventKind.INPUT_DOWNLOADED, job_id=job_id,
                                detail={"lfn": lfn, "size": len(data), "digest": expected.digest})
        return Sandbox(root, tuple(names))

    def _execute(self, job_id: int, spec: JobSpec, sandbox: Sandbox) -> int:
        env = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": str(sandbox.root),
            "LANG": "C.UTF-8",
            "JOB_ID": str(job_id),
            "SANDBOX": str(sandbox.root),
            "CENTRAL_ENDPOINT": self._central_address(),
        }
        started = time.monotonic()
        try:
            self.faults.apply(self.name, "execute", job_id, self.rt.sleep)
            with open(sandbox.root / "stdout.log", "wb") as out, open(sandbox.root / "stderr.log", "wb") as err:
                proc = subprocess.Popen(["/bin/sh", "-c", spec.script, "job", *spec.arguments],
                                        cwd=sandbox.root, env=env, stdout=out, stderr=err,
                                        stdin=subprocess.DEVNULL, start_new_session=True)
                with self._lock:
                    self._procs[job_id] = proc
                try:
                    exit_code = proc.wait(timeout=spec.ttl_seconds)
                except subprocess.TimeoutExpired:
                    _kill(proc)
                    raise _StageFailure(JobStatus.EXPIRED, "execute",
                                        f"wall-clock cap of {spec.ttl_seconds}s exceeded") from None
                finally:
                    with self._lock:
                        self._procs.pop(job_id, None)
        except (OSError, InjectedFault) as exc:
            reason = str(ExecutionSpawnFailure(f"cannot run job script: {exc}"))
            raise _StageFailure(JobStatus.ERROR_AGENT, "execute", reason) from exc
        self.journal.append(EventKind.JOB_EXECUTED, job_id=job_id,
                            detail={"exit_code": exit_code,
                                    "wall_ms": int((time.monotonic() - started) * 1000)
                                    if self.rt.mode == "realtime" else 0})
        return exit_code

    def _central_address(self) -> str:
        try:
            return self.rt.address_of("central")
        except GridError:
            return ""

    def _upload(self, job_id: int, root: Path, rel: str) -> tuple[str, bytes, Checksum]:
        data = (root / rel).read_bytes()
        checksum = compute_checksum(data)
        guid = self.rt.new_guid()
        corrupt = self.faults.apply(self.name, "upload", job_id, self.rt.sleep)
        payload = encode_upload(guid, _flip_one_byte(data) if corrupt else data, checksum, job_id)
        self.call(self._se(), Kind.UPLOAD, payload)
        self.journal.append(EventKind.OUTPUT_UPLOADED, job_id=job_id,
                            detail={"path": rel, "guid": guid, "size": len(data), "digest": checksum.digest})
        return guid, data, checksum

    def _se(self) -> str:
        return "se"

    def _save_outputs(self, job_id: int, spec: JobSpec, sandbox: Sandbox) -> list:
        produced = []
        for rel in resolve_outputs(sandbox, spec.output_patterns):
            lfn = output_lfn(job_id, rel)
            try:
                guid, data, checksum = self._upload(job_id, sandbox.root, rel)
            except (GridError, OSError) as exc:
                reason = str(UploadFailure(f"{rel}: {exc}"))
                raise _StageFailure(JobStatus.ERROR_SAVE, "upload", reason, lfn=lfn) from exc
            try:
                self.faults.apply(self.name, "register", job_id, self.rt.sleep)
                self.call("central", Kind.REGISTER_OUTPUT, {
                    "job_id": job_id, "lfn": lfn, "guid": guid, "size": len(data),
                    "checksum": checksum.to_dict(),
                    "replica": {"se": self._se(), "path": f"{guid[:2]}/{guid[2:4]}/{guid}"}})
            except GridError as exc:
                raise _StageFailure(JobStatus.ERROR_SAVE, "register", f"{lfn}: {exc}", lfn=lfn) from exc
            produced.append((rel, len(data), checksum))
        return produced

    def _upload_logs_on_failure(self, job_id: int, sandbox: Sandbox, exit_code: int) -> None:
        detail = {"exit_code": exit_code, "stage": "execute"}
        stderr = (sandbox.root / "stderr.log").read_bytes()
        detail["stderr_tail"] = stderr[-200:].decode("utf-8", "replace")
        for rel in LOG_FILES:
            try:
                guid, _, _ = self._upload(job_id, sandbox.root, rel)
                detail[rel.replace(".", "_") + "_guid"] = guid
            except (GridError, OSError) as exc:
                self.error(job_id, stage="upload", reason=f"log {rel}: {exc}")
        self._report(job_id, JobStatus.ERROR_EXEC, detail)


def _kill(proc: subprocess.Popen) -> None:
    if proc.poll() is not None:
        return
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()
    try:
        proc.wait(timeout=2)
    except subprocess.TimeoutExpired:
        pass
