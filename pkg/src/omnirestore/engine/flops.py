"""Multiply-accumulate counting and wall-clock timing for op-level budgets.

A :class:`FlopCounter` is activated as a context manager; while active, the
heavy primitives (conv, depthwise conv, matmul, linear) report their MAC
counts to it. Counts are attributed to the innermost open scope label so a
report can break a forward pass down by stage. Elementwise ops are excluded
on purpose: the budget comparisons this feeds care about the dominant terms
and would only be diluted by activation bookkeeping.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from typing import Optional


class FlopCounter:
    """Accumulates MACs per scope label plus a grand total."""

    def __init__(self):
        self.total = 0
        self.by_scope: dict[str, int] = {}
        self._scope_stack: list[str] = []

    def add(self, macs: int) -> None:
        self.total += int(macs)
        label = "/".join(self._scope_stack) if self._scope_stack else "(unscoped)"
        self.by_scope[label] = self.by_scope.get(label, 0) + int(macs)

    def scoped_total(self, suffix: str) -> int:
        """Sum of counts whose scope path ends with ``suffix``."""
        return sum(v for k, v in self.by_scope.items()
                   if k == suffix or k.endswith("/" + suffix))

    @contextmanager
    def scope(self, label: str):
        self._scope_stack.append(label)
        try:
            yield self
        finally:
            self._scope_stack.pop()

    def __enter__(self):
        _push_counter(self)
        return self

    def __exit__(self, *exc):
        _pop_counter(self)
        return False


_ACTIVE: list[FlopCounter] = []


def _push_counter(c: FlopCounter) -> None:
    _ACTIVE.append(c)


def _pop_counter(c: FlopCounter) -> None:
    if _ACTIVE and _ACTIVE[-1] is c:
        _ACTIVE.pop()


def active_counter() -> Optional[FlopCounter]:
    return _ACTIVE[-1] if _ACTIVE else None


def count_macs(macs: int) -> None:
    """Report MACs from a primitive to the active counter, if any."""
    c = active_counter()
    if c is not None:
        c.add(macs)


class WallTimer:
    """Named wall-clock accumulator for coarse phase timing.

    Like :class:`FlopCounter`, a timer can be activated as a context manager
    so instrumented code paths (the routed refinement loop, for one) can
    report into it without threading a handle through every call.
    """

    def __init__(self):
        self.seconds: dict[str, float] = {}

    @contextmanager
    def section(self, label: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.seconds[label] = self.seconds.get(label, 0.0) + (time.perf_counter() - start)

    def __enter__(self):
        _ACTIVE_TIMERS.append(self)
        return self

    def __exit__(self, *exc):
        if _ACTIVE_TIMERS and _ACTIVE_TIMERS[-1] is self:
            _ACTIVE_TIMERS.pop()
        return False


_ACTIVE_TIMERS: list[WallTimer] = []


def active_timer() -> Optional[WallTimer]:
    return _ACTIVE_TIMERS[-1] if _ACTIVE_TIMERS else None
