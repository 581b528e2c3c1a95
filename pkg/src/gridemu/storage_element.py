"""Storage element: a guid-addressed object store with checksum sidecars."""

from __future__ import annotations

import base64
import json
import os
import re
import tempfile
import threading
from collections import defaultdict
from pathlib import Path

from .component import Component
from .core import Checksum, EventKind, compute_checksum
from .errors import (CentralUnreachable, ChecksumMismatch, GuidConflict, InvalidRequest, NotFound,
                     StorageIOFailure, TransportError)
from .transport import Kind

_GUID = re.compile(r"[0-9a-f]{32}")


def object_path(root: Path, guid: str) -> Path:
    """Two-level fan-out: ``<root>/ab/cd/abcd...``."""
    if not _GUID.fullmatch(guid or ""):
        raise InvalidRequest(f"malformed guid {guid!r}")
    return Path(root) / guid[:2] / guid[2:4] / guid


def _flip_one_byte(data: bytes) -> bytes:
    if not data:
        return b"\x00"
    return bytes([data[0] ^ 0xFF]) + data[1:]


class StorageElement(Component):
    name = "se"

    def __init__(self, runtime, config, name: str | None = None):
        super().__init__(runtime, config, name)
        self.root = self.run_dir / "se"
        self.root.mkdir(parents=True, exist_ok=True)
        self._guid_locks: dict[str, threading.Lock] = defaultdict(threading.Lock)
        self._locks_lock = threading.Lock()

    def config_section(self) -> dict:
        return {"port": self.config.se.port,
                "capacity_bytes": self.config.se.capacity_bytes}

    def describe(self) -> dict:
        d = super().describe()
        d["root"] = str(self.root.relative_to(self.run_dir))
        return d

    def start(self) -> None:
        super().start()
        self.announce()

    def announce(self) -> dict:
        try:
            return self.call("central", Kind.ANNOUNCE, {
                "role": "se", "name": self.name, "address": self.address,
                "capacity_bytes": self.config.se.capacity_bytes})
        except TransportError as exc:
            raise CentralUnreachable(f"se could not register with central: {exc}") from exc

    def _lock(self, guid: str) -> threading.Lock:
        with self._locks_lock:
            return self._guid_locks[guid]

    # operations

    def upload(self, guid: str, data: bytes, checksum: Checksum, job_id: int | None = None) -> dict:
        path = object_path(self.root, guid)
        if not checksum.matches(data):
            actual = compute_checksum(data, checksum.algorithm)
            raise ChecksumMismatch(f"upload of {guid}: expected {checksum.digest}, got {actual.digest}",
                                   guid=guid)
        corrupt = self.faults.apply(self.name, "upload", job_id, self.rt.sleep)
        with self._lock(guid):
            if path.exists():
                stored = self._read(path)
                if stored != data:
                    raise GuidConflict(f"guid {guid} already stores different bytes", guid=guid)
                return {"size": len(data), "checksum": checksum.to_dict(), "created": False}
            on_disk = _flip_one_byte(data) if corrupt else data
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                self._atomic_write(path, on_disk)
                meta = {"size": len(data), **checksum.to_dict()}
                self._atomic_write(path.with_name(guid + ".meta"), json.dumps(meta).encode())
            except OSError as exc:
                raise StorageIOFailure(f"cannot store {guid}: {exc}", guid=guid) from exc
        self.journal.append(EventKind.OBJECT_STORED, job_id=job_id,
                            detail={"guid": guid, "size": len(data), "digest": checksum.digest})
        return {"size": len(data), "checksum": checksum.to_dict(), "created": True}

    def download(self, guid: str, job_id: int | None = None) -> tuple[bytes, Checksum]:
        path = object_path(self.root, guid)
        if not path.exists():
            raise NotFound(f"no object with guid {guid}", guid=guid)
        corrupt = self.faults.apply(self.name, "download", job_id, self.rt.sleep)
        data = self._read(path)
        checksum = self._meta(path)
        if not checksum.matches(data):
            raise StorageIOFailure(f"stored object {guid} fails its checksum", guid=guid)
        if corrupt:
            data = _flip_one_byte(data)
        self.journal.append(EventKind.OBJECT_SERVED, job_id=job_id,
                            detail={"guid": guid, "size": len(data)})
        return data, checksum

    def stat(self, guid: str) -> tuple[bool, int, Checksum | None]:
        path = object_path(self.root, guid)
        if not path.exists():
            return False, 0, None
        checksum = self._meta(path)
        return True, path.stat().st_size, checksum

    # helpers

    @staticmethod
    def _read(path: Path) -> bytes:
        try:
            return path.read_bytes()
        except OSError as exc:
            raise StorageIOFailure(f"cannot read {path.name}: {exc}") from exc

    @staticmethod
    def _meta(path: Path) -> Checksum:
        try:
            meta = json.loads(path.with_name(path.name + ".meta").read_bytes())
            return Checksum(meta["digest"], meta.get("algorithm", "md5"))
        except (OSError, ValueError, KeyError) as exc:
            raise StorageIOFailure(f"missing or bad metadata for {path.name}") from exc

    @staticmethod
    def _atomic_write(path: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, path)
        except BaseException:
            try:
                os.unlink(tmp)
            except OSError:
                pass
            raise

    # wire handlers

    def on_upload(self, p: dict) -> dict:
        try:
            data = base64.b64decode(p["data"], validate=True)
            checksum = Checksum.from_dict(p["checksum"])
        except (KeyError, ValueError) as exc:
            raise InvalidRequest(f"bad UPLOAD payload: {exc}") from exc
        return self.upload(p.get("guid", ""), data, checksum, p.get("job_id"))

    def on_download(self, p: dict) -> dict:
        data, checksum = self.download(p.get("guid", ""), p.get("job_id"))
        return {"data": base64.b64encode(data).decode(), "checksum": checksum.to_dict(), "size": len(data)}

    def on_stat(self, p: dict) -> dict:
        exists, size, checksum = self.stat(p.get("guid", ""))
        return {"exists": exists, "size": size, "checksum": checksum.to_dict() if checksum else None}


def encode_upload(guid: str, data: bytes, checksum: Checksum, job_id: int | None = None) -> dict:
    return {"guid": guid, "data": base64.b64encode(data).decode(), "checksum": checksum.to_dict(),
            "job_id": job_id}


def decode_download(payload: dict) -> tuple[bytes, Checksum]:
    return base64.b64decode(payload["data"]), Checksum.from_dict(payload["checksum"])
