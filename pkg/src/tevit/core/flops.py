"""Multiply-add instrumentation.

Counting is opt-in: wrap a forward pass in ``with count_flops() as fc`` and
every ``matmul`` inside adds ``2*m*n*k`` under its label.  Elementwise work is
not counted, matching the usual convention for transformer FLOP budgets.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

_local = threading.local()


@dataclass
class FlopCounter:
    breakdown: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.breakdown.values())

    def add(self, label: str, n: int) -> None:
        self.breakdown[label] = self.breakdown.get(label, 0) + int(n)


def record(label: str, n: int) -> None:
    for counter in getattr(_local, "stack", ()):
        counter.add(label, n)


@contextmanager
def count_flops():
    counter = FlopCounter()
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)
