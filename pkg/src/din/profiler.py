"""Call and mult-add instrumentation for forward passes."""

from __future__ import annotations

import contextlib
import threading
from collections import Counter

_local = threading.local()


class Profile:
    def __init__(self):
        self.calls: Counter[str] = Counter()
        self.mult_adds: int = 0

    def __repr__(self) -> str:
        return f"Profile(mult_adds={self.mult_adds}, calls={dict(self.calls)})"


def _active() -> list[Profile]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def record(name: str, mult_adds: int = 0) -> None:
    for prof in _active():
        prof.calls[name] += 1
        prof.mult_adds += int(mult_adds)


@contextlib.contextmanager
def profile():
    """Count named calls and conv mult-adds executed inside the block."""
    prof = Profile()
    stack = _active()
    stack.append(prof)
    try:
        yield prof
    finally:
        stack.remove(prof)
