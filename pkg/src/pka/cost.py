"""Closed-form and instrumented cost accounting for one attention layer.

A layer here is the QKV projection of every token that is (re)computed plus
the attention itself. On a cached step (after the first denoising step) the
condition segments are neither projected nor attended: their K/V come from
the condition cache.

Memory is accounted as attention-score buffer bytes; ``score_bytes`` sums the
scores of every block, ``peak_score_entries`` is the largest single buffer
per head.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import counters
from .counters import CostCounter, attention_flops
from .dense import AttentionInputs, mma_full
from .layout import AttentionMaskSpec, ModalityLayout, block_pairs
from .sparse import merge_partials, segment_partials
from .tensor import ContractError, Rng

STEP_KINDS = ("first", "cached")


class AccountingError(RuntimeError):
    """Instrumented counters disagree with the closed form."""


@dataclass
class BlockCost:
    score_entries: int  # per head
    flops: int
    score_bytes: int


@dataclass
class CostReport:
    mode: str
    step_kind: str
    d: int
    h: int
    blocks: dict[str, BlockCost] = field(default_factory=dict)
    projection_flops: dict[str, int] = field(default_factory=dict)
    peak_score_entries: int = 0
    wall_time_ns: int | None = None

    @property
    def score_entries(self) -> int:
        return sum(b.score_entries for b in self.blocks.values())

    @property
    def flops(self) -> int:
        """Attention FLOPs: the sum over score blocks."""
        return sum(b.flops for b in self.blocks.values())

    @property
    def total_flops(self) -> int:
        return self.flops + sum(self.projection_flops.values())

    @property
    def score_bytes(self) -> int:
        return sum(b.score_bytes for b in self.blocks.values())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "step_kind": self.step_kind,
            "d": self.d,
            "h": self.h,
            "blocks": {k: asdict(v) for k, v in self.blocks.items()},
            "projection_flops": dict(self.projection_flops),
            "totals": {
                "score_entries": self.score_entries,
                "flops": self.flops,
                "total_flops": self.total_flops,
                "score_bytes": self.score_bytes,
                "peak_score_entries": self.peak_score_entries,
            },
            "wall_time_ns": self.wall_time_ns,
        }


def _condition_names(layout: ModalityLayout) -> set[str]:
    return {s.name for s in layout.conditions()}


def _recomputed_queries(spec: AttentionMaskSpec, step_kind: str) -> list[str]:
    if step_kind not in STEP_KINDS:
        raise ContractError(f"step_kind must be one of {STEP_KINDS}")
    names = [s.name for s in spec.layout.segments]
    if step_kind == "first":
        return names
    if spec.mode == "dense":
        raise ContractError("condition tokens attend to the image under dense masks; nothing is cacheable")
    conds = _condition_names(spec.layout)
    return [n for n in names if n not in conds]


def predict_cost(layout: ModalityLayout, spec: AttentionMaskSpec, d: int, h: int,
                 step_kind: str = "first", itemsize: int = 4) -> CostReport:
    queries = _recomputed_queries(spec, step_kind)
    rep = CostReport(spec.mode, step_kind, d, h)
    model_dim = h * d
    for name in queries:
        seg = layout.by_name[name]
        rep.projection_flops[name] = 2 * seg.length * model_dim * 3 * model_dim
    for (q, k) in spec.rules:
        if q not in queries:
            continue
        pairs = block_pairs(spec, q, k)
        rep.blocks[f"{q}->{k}"] = BlockCost(pairs, attention_flops(pairs, d, h), h * pairs * itemsize)
    if spec.mode == "dense":
        rep.peak_score_entries = layout.L ** 2
    else:
        peaks = []
        for (q, k), rule in spec.rules.items():
            if q not in queries:
                continue
            if rule.kind == "band":
                peaks.append(layout.N * rule.k ** 2)
            else:
                peaks.append(block_pairs(spec, q, k))
        rep.peak_score_entries = max(peaks)
    return rep


def condition_branch_cost(layout: ModalityLayout, spec: AttentionMaskSpec, d: int, h: int) -> int:
    """FLOPs of condition projections and condition self-attention (the cacheable part)."""
    model_dim = h * d
    total = 0
    for seg in layout.conditions():
        total += 2 * seg.length * model_dim * 3 * model_dim
        for (q, k) in spec.rules:
            if q == seg.name:
                total += attention_flops(block_pairs(spec, q, k), d, h)
    return total


def _run_layer(hidden: dict, weights: np.ndarray, cached_kv: dict, spec: AttentionMaskSpec,
               queries: list[str], h: int):
    lay = spec.layout
    model_dim = weights.shape[0]
    d = model_dim // h
    q_parts, k_parts, v_parts = {}, {}, {}
    for seg in lay.segments:
        if seg.name in queries:
            counters.record_projection(seg.name, seg.length, model_dim, 3 * model_dim)
            qkv = hidden[seg.name] @ weights
            q_parts[seg.name], k_parts[seg.name], v_parts[seg.name] = (
                qkv[:, i * model_dim:(i + 1) * model_dim].reshape(seg.length, h, d).transpose(1, 0, 2)
                for i in range(3))
        else:
            k_parts[seg.name], v_parts[seg.name] = cached_kv[seg.name]
            q_parts[seg.name] = np.zeros_like(k_parts[seg.name])

    def cat(parts):
        return np.concatenate([parts[s.name] for s in lay.segments], axis=1)

    inp = AttentionInputs(cat(q_parts), cat(k_parts), cat(v_parts), lay)
    if spec.mode == "dense":
        return mma_full(inp)
    return [merge_partials(segment_partials(inp, spec, name)) for name in queries]


def measure_cost(layout: ModalityLayout, spec: AttentionMaskSpec, d: int, h: int,
                 step_kind: str = "first", dtype=np.float32, seed: int = 0,
                 repeats: int = 3) -> CostReport:
    """Run one instrumented layer, check counters against :func:`predict_cost`, attach timing."""
    itemsize = np.dtype(dtype).itemsize
    predicted = predict_cost(layout, spec, d, h, step_kind, itemsize)
    queries = _recomputed_queries(spec, step_kind)
    rng = Rng(seed)
    model_dim = h * d
    weights = rng.normal((model_dim, 3 * model_dim), scale=model_dim ** -0.5, dtype=dtype)
    hidden = {s.name: rng.normal((s.length, model_dim), dtype=dtype) for s in layout.segments}
    cached_kv = {}
    for seg in layout.conditions():
        qkv = hidden[seg.name] @ weights
        cached_kv[seg.name] = tuple(
            qkv[:, i * model_dim:(i + 1) * model_dim].reshape(seg.length, h, d).transpose(1, 0, 2)
            for i in (1, 2))

    with counters.counting(CostCounter()) as counter:
        _run_layer(hidden, weights, cached_kv, spec, queries, h)
    _check(predicted, counter)

    best = None
    for _ in range(max(1, repeats)):
        t0 = time.perf_counter_ns()
        _run_layer(hidden, weights, cached_kv, spec, queries, h)
        dt = time.perf_counter_ns() - t0
        best = dt if best is None else min(best, dt)
    predicted.wall_time_ns = int(best)
    predicted.peak_score_entries = counter.peak_alloc_entries
    return predicted


def _check(pred: CostReport, counter: CostCounter) -> None:
    measured = {k: v for k, v in counter.blocks.items() if not k.startswith("proj:")}
    problems = []
    for name, block in pred.blocks.items():
        got = measured.pop(name, None)
        if got is None:
            if block.score_entries:
                problems.append(f"{name}: predicted {block.score_entries} entries, kernel never ran")
            continue
        if (got.pairs, got.flops, got.score_bytes) != (block.score_entries, block.flops, block.score_bytes):
            problems.append(f"{name}: predicted {block}, counted {got}")
    problems += [f"{name}: counted {got} but not predicted" for name, got in measured.items() if got.pairs]
    for name, flops in pred.projection_flops.items():
        got = counter.blocks.get(f"proj:{name}")
        if got is None or got.flops != flops:
            problems.append(f"proj:{name}: predicted {flops}, counted {None if got is None else got.flops}")
    if pred.peak_score_entries < counter.peak_alloc_entries:
        problems.append(f"peak allocation {counter.peak_alloc_entries} exceeds predicted {pred.peak_score_entries}")
    if problems:
        raise AccountingError("; ".join(problems))


def scaling_layout(c: int, tokens_per_cond: int, text_len: int = 8, subjects: tuple[int, ...] = ()) -> ModalityLayout:
    """Square image grid of ``tokens_per_cond`` tokens with ``c`` aligned spatial conditions."""
    side = int(round(tokens_per_cond ** 0.5))
    if side * side != tokens_per_cond:
        raise ContractError(f"tokens per condition must be a perfect square, got {tokens_per_cond}")
    return ModalityLayout(text_len, (side, side), c, subjects, (0,))


def loglog_slope(xs, ys) -> float:
    return float(np.polyfit(np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float)), 1)[0])
