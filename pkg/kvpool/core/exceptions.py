"""
Errors raised by the memory pool, the transfer engine and the simulator.

Every error derives from KVPoolError. Configuration and argument problems are also
ValueErrors, lookups are KeyErrors and capacity or liveness problems are
RuntimeErrors, so existing ``except ValueError`` handlers keep working.
"""


class KVPoolError(Exception):
    """Base class for all kvpool errors."""


class ConfigError(KVPoolError, ValueError):
    """Invalid settings. Carries the offending key path, file and line if known."""

    def __init__(self, message, path=None, file_name=None, line=None):
        self.message = message
        self.path = path
        self.file_name = file_name
        self.line = line
        location = []
        if file_name is not None:
            location.append(str(file_name))
        if line is not None:
            location.append(f"line {line}")
        if path is not None:
            location.append(path)
        if location:
            message = f"{', '.join(location)}: {message}"
        super().__init__(message)


class OutOfMemory(KVPoolError, RuntimeError):
    pass


class NoDramCapacity(OutOfMemory):
    pass


class DstOutOfMemory(OutOfMemory):
    """The receiver could not allocate blocks during the allocation step."""


class DoubleFree(KVPoolError, ValueError):
    pass


class InvalidAddr(KVPoolError, ValueError):
    pass


class AddrCountMismatch(KVPoolError, ValueError):
    pass


class ConflictingMapping(KVPoolError, ValueError):
    pass


class ModeLayoutMismatch(KVPoolError, ValueError):
    pass


class DstUnreachable(KVPoolError, RuntimeError):
    pass


class NoLiveInstance(KVPoolError, RuntimeError):
    pass


class DuplicateId(KVPoolError, ValueError):
    pass


class UnknownId(KVPoolError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class CapacityAbort(KVPoolError, RuntimeError):
    """A request can not obtain memory and is aborted."""


class DeadlockDetected(KVPoolError, RuntimeError):
    """The event queue emptied while requests were still pending."""
