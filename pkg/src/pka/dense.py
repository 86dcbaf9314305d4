"""Reference attention: full concatenate-and-attend and the dense masked oracle.

The masked oracle defines the ground-truth semantics of every sparse kernel:
each query row takes one softmax over the union of its permitted keys.
Excluded keys get exactly zero probability, either through exact exclusion
(float64 and autodiff inputs) or through the additive ``-1e30`` sentinel in
float32 dense-mask mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import counters
from .layout import AttentionMaskSpec, ModalityLayout, to_dense
from .tensor import MASK_SENTINEL, ContractError


@dataclass
class AttentionInputs:
    """Per-head ``q, k, v`` of shape ``(h, L, d)``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    layout: ModalityLayout | None = None

    def __post_init__(self):
        qs, ks, vs = (np.shape(ad.value(x)) for x in (self.q, self.k, self.v))
        if not (qs == ks == vs) or len(qs) != 3 or qs[-1] < 1:
            raise ContractError(f"q, k, v must share shape (h, L, d); got {qs}, {ks}, {vs}")
        if self.layout is not None and qs[1] != self.layout.L:
            raise ContractError(f"sequence length {qs[1]} does not match layout L={self.layout.L}")

    @property
    def heads(self) -> int:
        return np.shape(ad.value(self.q))[0]

    @property
    def d(self) -> int:
        return np.shape(ad.value(self.q))[-1]

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d)


def merge_heads(x):
    """``(..., h, L, d)`` -> ``(..., L, h*d)``."""
    shape = np.shape(ad.value(x))
    nd = len(shape)
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ad.reshape(ad.transpose(x, axes), shape[:-3] + (shape[-2], shape[-3] * shape[-1]))


def split_heads(x, heads: int):
    """``(..., L, h*d)`` -> ``(..., h, L, d)``."""
    shape = np.shape(ad.value(x))
    d = shape[-1] // heads
    x = ad.reshape(x, shape[:-1] + (heads, d))
    nd = len(shape) + 1
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    return ad.transpose(x, axes)


def _record_dense(layout: ModalityLayout | None, L: int, d: int, h: int, itemsize: int) -> None:
    if counters.current() is None:
        return
    if layout is None:
        counters.record_scores("all->all", L * L, d, h, itemsize)
        return
    first = True
    for qs in layout.segments:
        for ks in layout.segments:
            counters.record_scores(f"{qs.name}->{ks.name}", qs.length * ks.length, d, h, itemsize,
                                   alloc_entries=L * L if first else 0)
            first = False


def mma_full(inp: AttentionInputs):
    """Softmax(QK^T / sqrt(d)) V over the whole sequence; returns ``(L, h*d)``."""
    q, k, v = inp.q, inp.k, inp.v
    _, L, d = np.shape(ad.value(q))
    _record_dense(inp.layout, L, d, inp.heads, np.dtype(ad.value(q).dtype).itemsize)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * inp.scale
    return merge_heads(ad.matmul(ad.softmax(scores, axis=-1), v))


def masked_attention_oracle(inp: AttentionInputs, spec: AttentionMaskSpec, sentinel: bool | None = None):
    """Row-wise softmax restricted to the permitted keys of ``spec``; returns ``(L, h*d)``.

    ``sentinel`` defaults to True for float32 inputs and False otherwise.
    """
    mask = to_dense(spec)
    if not mask.any(axis=1).all():
        raise ContractError("mask leaves a query row without keys")
    q, k, v = inp.q, inp.k, inp.v
    dtype = ad.value(q).dtype
    if sentinel is None:
        sentinel = dtype == np.float32 and not isinstance(q, ad.Var)
    scores = ad.matmul(q, ad.swapaxes(k, -1, -2)) * inp.scale
    if sentinel:
        bias = np.where(mask, 0.0, MASK_SENTINEL).astype(dtype)
        probs = ad.softmax(scores + bias, axis=-1)
    else:
        probs = ad.softmax(scores, axis=-1, mask=mask)
    return merge_heads(ad.matmul(probs, v))
