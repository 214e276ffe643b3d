"""File-access audit for the centre privacy boundary.

Corpus readers call :func:`record_read`. While a centre is "acting"
(``with acting_as("A"):``), any read of a file registered to another centre
is recorded as a violation and, in strict mode, raises.
"""

from __future__ import annotations

import contextlib
import contextvars
import os
import threading
from dataclasses import dataclass, field

_acting: contextvars.ContextVar = contextvars.ContextVar("acting_centre", default=None)


class PrivacyViolation(PermissionError):
    pass


@dataclass
class AccessLog:
    owners: dict = field(default_factory=dict)  # resolved directory -> centre id
    reads: list = field(default_factory=list)  # (acting centre, owner, path)
    strict: bool = True
    lock: threading.Lock = field(default_factory=threading.Lock)

    def violations(self) -> list:
        return [r for r in self.reads if r[0] is not None and r[1] is not None and r[0] != r[1]]


_log = AccessLog()


def register_owner(directory, centre_id: str) -> None:
    with _log.lock:
        _log.owners[os.path.realpath(directory)] = centre_id


def owner_of(path) -> str | None:
    real = os.path.realpath(path)
    best, owner = "", None
    for d, c in _log.owners.items():
        if (real == d or real.startswith(d + os.sep)) and len(d) > len(best):
            best, owner = d, c
    return owner


def record_read(path) -> None:
    acting = _acting.get()
    owner = owner_of(path)
    with _log.lock:
        _log.reads.append((acting, owner, str(path)))
    if acting is not None and owner is not None and acting != owner and _log.strict:
        raise PrivacyViolation(f"centre {acting} attempted to read {path} owned by centre {owner}")


@contextlib.contextmanager
def acting_as(centre_id: str | None):
    token = _acting.set(centre_id)
    try:
        yield
    finally:
        _acting.reset(token)


def current_centre() -> str | None:
    return _acting.get()


def log() -> AccessLog:
    return _log


def reset(strict: bool = True) -> None:
    global _log
    _log = AccessLog(strict=strict)
