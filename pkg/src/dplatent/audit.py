"""Access auditing for private data.

Stages and training phases announce themselves with :func:`phase`; wrapped
datasets record every read together with the active phase label. Tests and
the pipeline use the log to check that private examples are only touched
where the privacy analysis expects them.
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from dataclasses import dataclass, field

_PHASE: contextvars.ContextVar[tuple[str, ...]] = contextvars.ContextVar("dplatent_phase", default=())


@contextlib.contextmanager
def phase(name: str):
    token = _PHASE.set(_PHASE.get() + (name,))
    try:
        yield
    finally:
        _PHASE.reset(token)


def current_phase() -> str:
    return "/".join(_PHASE.get()) or "<none>"


@dataclass
class AccessLog:
    reads: Counter = field(default_factory=Counter)

    def record(self, n: int = 1) -> None:
        self.reads[current_phase()] += n

    def phases(self) -> set[str]:
        return {k for k, v in self.reads.items() if v > 0}

    def reads_outside(self, allowed: tuple[str, ...]) -> dict[str, int]:
        """Reads whose phase path does not contain any of ``allowed``."""
        out = {}
        for path, n in self.reads.items():
            parts = path.split("/")
            if n and not any(a in parts for a in allowed):
                out[path] = n
        return out
