"""Block-sparse attention: position-aligned gather, keyword-scoped rows and a
streaming-softmax merge of per-block partial results.

Every block produces a :class:`PartialAttention` (running max, denominator,
numerator) over its own keys only; merging partials with the usual
log-sum-exp rescaling gives exactly one softmax over the union of a query's
permitted keys, without materializing the dense score matrix.

Arrays follow ``(*batch, h, rows, d)``. All kernels accept autodiff ``Var``
inputs; running maxima and keyword masks are treated as constants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import counters
from .dense import AttentionInputs, merge_heads
from .layout import AttentionMaskSpec, Rule, band_neighbours
from .tensor import ContractError

SCORE_MODES = ("softmax", "relative")


class DegenerateMaskError(ContractError):
    """A keyword mask left no image token active."""


@dataclass
class KeywordMask:
    active: np.ndarray  # (N,) or (B, N) bool
    step_index: int
    epsilon: float
    mode: str = "softmax"
    scores: np.ndarray | None = None  # pre-threshold scores
    fallback: bool = False

    @property
    def n_active(self) -> int:
        return int(self.active.sum())

    def all_active(self) -> "KeywordMask":
        return KeywordMask(np.ones_like(self.active), self.step_index, self.epsilon, self.mode,
                           self.scores, fallback=True)


@dataclass
class PartialAttention:
    m: np.ndarray  # (..., rows); -inf where the block gave the row no keys
    z: object      # (..., rows)
    num: object    # (..., rows, d)

    @property
    def rows(self) -> int:
        return self.m.shape[-1]

    @classmethod
    def empty(cls, lead: tuple, rows: int, d: int, dtype) -> "PartialAttention":
        return cls(np.full(lead + (rows,), -np.inf, dtype=dtype),
                   np.zeros(lead + (rows,), dtype=dtype),
                   np.zeros(lead + (rows, d), dtype=dtype))

    def finalize(self):
        return merge_partials([self])


def _dims(x) -> tuple[int, int]:
    """(heads, batch) of a ``(*batch, h, rows, d)`` operand."""
    shape = np.shape(ad.value(x))
    heads = shape[-3] if len(shape) >= 3 else 1
    batch = int(np.prod(shape[:-3])) if len(shape) > 3 else 1
    return heads, batch


def _itemsize(x) -> int:
    return np.dtype(ad.value(x).dtype).itemsize


def _scale(x, scale):
    return 1.0 / math.sqrt(np.shape(ad.value(x))[-1]) if scale is None else scale


def block_partial(q, k, v, scale: float | None = None, block: str | None = None) -> PartialAttention:
    """Dense partial of ``q`` rows against every key of one block."""
    scale = _scale(q, scale)
    s = ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale
    rq, rk = s.shape[-2], s.shape[-1]
    heads, batch = _dims(q)
    counters.record_scores(block, rq * rk * batch, q.shape[-1], heads, _itemsize(q), rq * rk * batch)
    m = np.max(ad.value(s), axis=-1)
    p = ad.exp(s - m[..., None])
    return PartialAttention(m, ad.sum(p, axis=-1), ad.matmul(p, v))


def paa(qx, k_sp, v_sp, scale: float | None = None, block: str | None = None) -> PartialAttention:
    """Position-aligned attention: image row i sees only condition token i."""
    if np.shape(ad.value(qx)) != np.shape(ad.value(k_sp)) or np.shape(ad.value(k_sp)) != np.shape(ad.value(v_sp)):
        from .layout import AlignmentError
        raise AlignmentError(f"PAA needs congruent operands, got {np.shape(ad.value(qx))}, "
                             f"{np.shape(ad.value(k_sp))}, {np.shape(ad.value(v_sp))}")
    scale = _scale(qx, scale)
    logits = ad.sum(qx * k_sp, axis=-1) * scale  # (..., N): O(N) score storage
    n = logits.shape[-1]
    heads, batch = _dims(qx)
    counters.record_scores(block, n * batch, qx.shape[-1], heads, _itemsize(qx), n * batch)
    m = np.array(ad.value(logits))
    p = ad.exp(logits - m)
    return PartialAttention(m, p, ad.mul(ad.reshape(p, p.shape + (1,)), v_sp))


def band(qx, k_sp, v_sp, grid: tuple[int, int], k: int, scale: float | None = None,
         block: str | None = None) -> PartialAttention:
    """Sliding-window attention over a k x k grid neighbourhood of each image token."""
    scale = _scale(qx, scale)
    idx, valid = band_neighbours(grid, k)
    n, kk = idx.shape
    d = qx.shape[-1]
    lead = tuple(qx.shape[:-2])
    kg = ad.reshape(ad.take(k_sp, idx.reshape(-1), axis=-2), lead + (n, kk, d))
    vg = ad.reshape(ad.take(v_sp, idx.reshape(-1), axis=-2), lead + (n, kk, d))
    logits = ad.sum(ad.reshape(qx, lead + (n, 1, d)) * kg, axis=-1) * scale
    heads, batch = _dims(qx)
    counters.record_scores(block, int(valid.sum()) * batch, d, heads, _itemsize(qx), n * kk * batch)
    lm = ad.where(valid, logits, -np.inf)
    m = np.max(ad.value(lm), axis=-1)
    p = ad.exp(lm - m[..., None])
    return PartialAttention(m, ad.sum(p, axis=-1), ad.sum(ad.reshape(p, p.shape + (1,)) * vg, axis=-2))


def ksa(qx, k_sj, v_sj, mask, scale: float | None = None, block: str | None = None) -> PartialAttention:
    """Keyword-scoped attention: only active image rows attend to subject keys.

    ``mask`` is a :class:`KeywordMask` or boolean array of shape ``(N,)``
    (shared across the batch) or ``(B, N)`` with ``qx`` of shape ``(B, h, N, d)``.
    Inactive rows get an empty partial.
    """
    active = np.asarray(ad.value(getattr(mask, "active", mask)), dtype=bool)
    n = qx.shape[-2]
    if active.shape[-1] != n:
        raise ContractError(f"keyword mask length {active.shape[-1]} != image tokens {n}")
    if active.ndim == 2:
        parts = [ksa(qx[b], k_sj[b], v_sj[b], active[b], scale, block) for b in range(active.shape[0])]
        return PartialAttention(np.stack([p.m for p in parts]), ad.stack([p.z for p in parts]),
                                ad.stack([p.num for p in parts]))
    if active.all():
        return block_partial(qx, k_sj, v_sj, scale, block)
    idx = np.flatnonzero(active)
    lead = tuple(qx.shape[:-2])
    if idx.size == 0:
        return PartialAttention.empty(lead, n, v_sj.shape[-1], ad.value(qx).dtype)
    part = block_partial(ad.take(qx, idx, axis=-2), k_sj, v_sj, scale, block)
    m = np.full(lead + (n,), -np.inf, dtype=part.m.dtype)
    m[..., idx] = part.m
    return PartialAttention(m, ad.scatter(part.z, idx, -1, n), ad.scatter(part.num, idx, -2, n))


def combine(parts: list[PartialAttention]) -> PartialAttention:
    """Log-sum-exp merge of partials over the same query rows."""
    if not parts:
        raise ContractError("nothing to merge")
    rows = parts[0].rows
    if any(p.rows != rows for p in parts):
        raise ContractError("partials cover different query rows")
    if len(parts) == 1:
        return parts[0]
    m = parts[0].m
    for p in parts[1:]:
        m = np.maximum(m, p.m)
    safe_m = np.where(np.isfinite(m), m, 0)
    z = num = None
    for p in parts:
        a = np.exp(np.where(np.isfinite(p.m), p.m - safe_m, -np.inf))
        zs = p.z * a
        ns = p.num * a[..., None]
        z = zs if z is None else z + zs
        num = ns if num is None else num + ns
    return PartialAttention(m, z, num)


def merge_partials(parts: list[PartialAttention]):
    """Final attention output ``(..., rows, d)`` of the merged partials."""
    merged = combine(parts)
    if not np.all(np.isfinite(merged.m)):
        raise ContractError("a query row has no permitted key in any block")
    z = merged.z
    return ad.div(merged.num, ad.reshape(z, np.shape(ad.value(z)) + (1,)))


def _softmax_scores(logits: np.ndarray, mode: str) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    if mode == "softmax":
        return e / e.sum(axis=-1, keepdims=True)
    if mode == "relative":
        return e
    raise ContractError(f"unknown keyword score mode {mode!r}")


def keyword_scores(qx, k_text, keywords, scale: float | None = None, mode: str = "softmax") -> np.ndarray:
    """Pre-threshold keyword affinity over image tokens, shape ``(*batch, N)``.

    Logits sum over keyword keys, are averaged over heads, then normalized
    across the image axis (``softmax``) or relative to the top token
    (``relative``: ``p_i / max_j p_j``).
    """
    qx = np.asarray(ad.value(qx))
    k_text = np.asarray(ad.value(k_text))
    scale = _scale(qx, scale)
    kw = np.asarray(keywords, dtype=np.int64)
    if kw.size == 0:
        raise ContractError("keyword set is empty")
    k_kw = np.take(k_text, kw, axis=-2).sum(axis=-2)  # (..., h, d)
    logits = np.einsum("...nd,...d->...n", qx, k_kw) * scale  # (..., h, N)
    return _softmax_scores(logits.mean(axis=-2), mode)


def ksa_mask(qx, k_text, keywords, epsilon: float = 0.2, mode: str = "softmax",
             step_index: int = 0, scale: float | None = None) -> KeywordMask:
    """Threshold keyword affinity at ``epsilon``; raises if no token survives."""
    if not 0 <= epsilon < 1:
        raise ContractError(f"epsilon must lie in [0, 1), got {epsilon}")
    scores = keyword_scores(qx, k_text, keywords, scale, mode)
    active = scores >= epsilon
    if not active.any(axis=-1).all():
        raise DegenerateMaskError(f"no image token reaches epsilon={epsilon}")
    return KeywordMask(active, step_index, epsilon, mode, scores)


def ksa_mask_or_fallback(qx, k_text, keywords, epsilon: float = 0.2, mode: str = "softmax",
                         step_index: int = 0, scale: float | None = None) -> KeywordMask:
    """Like :func:`ksa_mask`, but samples with no active token fall back to all-active."""
    scores = keyword_scores(qx, k_text, keywords, scale, mode)
    active = scores >= epsilon
    dead = ~active.any(axis=-1)
    if dead.any():
        active = active.copy()
        active[dead] = True
    return KeywordMask(active, step_index, epsilon, mode, scores, fallback=bool(dead.any()))


def block_attention(q, rule: Rule, k, v, grid, scale=None, block=None) -> PartialAttention:
    if rule.kind == "all":
        return block_partial(q, k, v, scale, block)
    if rule.kind == "diagonal":
        return paa(q, k, v, scale, block)
    if rule.kind == "band":
        return band(q, k, v, grid, rule.k, scale, block)
    if rule.kind == "gated":
        return ksa(q, k, v, rule.active, scale, block)
    raise ContractError(f"unknown rule kind {rule.kind!r}")


def segment_partials(inp: AttentionInputs, spec: AttentionMaskSpec, query: str) -> list[PartialAttention]:
    """Per-key-block partials for one query segment, in canonical key order."""
    lay = spec.layout
    qs = lay.by_name[query]
    q = inp.q[:, qs.slice, :]
    parts = []
    for ks in lay.segments:
        rule = spec.rule(query, ks.name)
        if rule is None:
            continue
        parts.append(block_attention(q, rule, inp.k[:, ks.slice, :], inp.v[:, ks.slice, :],
                                     lay.grid, inp.scale, f"{query}->{ks.name}"))
    return parts


def sparse_attention(inp: AttentionInputs, spec: AttentionMaskSpec):
    """Block-sparse evaluation of ``spec``; returns ``(L, h*d)`` like the oracle."""
    outs = [merge_partials(segment_partials(inp, spec, seg.name)) for seg in spec.layout.segments]
    return merge_heads(ad.concat(outs, axis=-2))
