"""Instrumentation counters that attention kernels report into.

Kernels call :func:`record_scores` / :func:`record_projection`; the calls are
no-ops unless a :class:`CostCounter` is active in the current context.
FLOP convention per head: ``2*pairs*d`` (QK^T) + ``2*pairs*d`` (AV) +
``5*pairs`` (softmax); projections cost ``2*rows*d_in*d_out``.
"""

from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass, field

SOFTMAX_FLOPS = 5


def attention_flops(pairs: int, d: int, heads: int) -> int:
    return heads * (4 * pairs * d + SOFTMAX_FLOPS * pairs)


@dataclass
class BlockTally:
    pairs: int = 0  # per head
    flops: int = 0
    score_bytes: int = 0


@dataclass
class CostCounter:
    blocks: dict[str, BlockTally] = field(default_factory=dict)
    # largest single score buffer allocated by one kernel call, per head
    peak_alloc_entries: int = 0
    alloc_log: list[tuple[str, int]] = field(default_factory=list)

    def tally(self, name: str) -> BlockTally:
        return self.blocks.setdefault(name, BlockTally())

    @property
    def total_pairs(self) -> int:
        return sum(b.pairs for k, b in self.blocks.items() if not k.startswith("proj:"))

    @property
    def total_flops(self) -> int:
        return sum(b.flops for b in self.blocks.values())


_active: contextvars.ContextVar[CostCounter | None] = contextvars.ContextVar("pka_counter", default=None)


@contextmanager
def counting(counter: CostCounter | None = None):
    counter = counter if counter is not None else CostCounter()
    token = _active.set(counter)
    try:
        yield counter
    finally:
        _active.reset(token)


def current() -> CostCounter | None:
    return _active.get()


def record_scores(block: str | None, pairs: int, d: int, heads: int, itemsize: int,
                  alloc_entries: int | None = None) -> None:
    counter = _active.get()
    if counter is None or block is None:
        return
    t = counter.tally(block)
    t.pairs += pairs
    t.flops += attention_flops(pairs, d, heads)
    t.score_bytes += heads * pairs * itemsize
    alloc = pairs if alloc_entries is None else alloc_entries
    counter.peak_alloc_entries = max(counter.peak_alloc_entries, alloc)
    counter.alloc_log.append((block, alloc))


def record_projection(name: str, rows: int, d_in: int, d_out: int) -> None:
    counter = _active.get()
    if counter is None:
        return
    counter.tally(f"proj:{name}").flops += 2 * rows * d_in * d_out
