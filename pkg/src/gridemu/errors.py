"""Exception hierarchy shared by every grid component.

Errors cross the wire by name, so each subclass is registered and can be
rebuilt on the calling side from ``(name, message, info)``.
"""

from __future__ import annotations

_REGISTRY: dict[str, type["GridError"]] = {}


class GridError(Exception):
    """Base class. ``info`` carries string-valued context for remote callers."""

    def __init__(self, message: str = "", **info):
        super().__init__(message)
        self.message = message
        self.info = {k: str(v) for k, v in info.items()}

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        _REGISTRY[cls.__name__] = cls

    @property
    def code(self) -> str:
        return type(self).__name__

    def __str__(self) -> str:
        return self.message or self.code


def error_from_name(name: str, message: str, info: dict | None = None) -> GridError:
    cls = _REGISTRY.get(name, RemoteError)
    err = cls(message, **(info or {}))
    if cls is RemoteError:
        err.info.setdefault("remote_code", name)
    return err


class RemoteError(GridError):
    """A peer answered with an error this process does not know."""


# core
class InvalidSpec(GridError):
    def __init__(self, message: str = "", violations=(), **info):
        super().__init__(message or "; ".join(violations), **info)
        self.violations = list(violations) or [v for v in self.message.split("; ") if v]


class IllegalTransition(GridError):
    pass


class UnsupportedAlgorithm(GridError):
    pass


class JournalIOFailure(GridError):
    pass


class InvalidRequest(GridError):
    pass


# central
class MissingInput(GridError):
    pass


class UnknownJob(GridError):
    pass


class UnknownAgent(GridError):
    pass


class WrongState(GridError):
    pass


class DuplicateLFN(GridError):
    pass


class UnknownSE(GridError):
    pass


# storage
class ChecksumMismatch(GridError):
    pass


class GuidConflict(GridError):
    pass


class NotFound(GridError):
    pass


class StorageIOFailure(GridError):
    pass


# batch queue
class DuplicateAgent(GridError):
    pass


class NoFreeSlot(GridError):
    pass


# reachability, raised by clients when a peer call fails at transport level
class CentralUnreachable(GridError):
    pass


class QueueUnreachable(GridError):
    pass


class WorkerUnreachable(GridError):
    pass


# worker
class DownloadFailure(GridError):
    pass


class ExecutionSpawnFailure(GridError):
    pass


class UploadFailure(GridError):
    pass


class InjectedFault(GridError):
    pass


# transport
class TransportError(GridError):
    pass


class Timeout(TransportError):
    pass


class ConnectionRefused(TransportError):
    pass


class MalformedResponse(TransportError):
    pass


class AddressInUse(TransportError):
    pass


class BindFailure(TransportError):
    pass


# orchestration and suite
class ConfigError(GridError):
    pass


class StartupFailure(GridError):
    pass


class GridNotRunning(GridError):
    pass


class NotDone(GridError):
    pass


class ProbeTimeout(GridError):
    pass


class ScenarioTimeout(GridError):
    def __init__(self, message: str = "", statuses=None, **info):
        super().__init__(message, **info)
        self.statuses = dict(statuses or {})
