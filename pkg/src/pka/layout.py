"""Token layout of the concatenated sequence ``[T; X; SP_1..SP_c; SJ_1..SJ_s]`` and
block-structured attention masks over it.

Masks are declarative: one rule per (query segment, key segment) pair, absent
pairs are disallowed. Band neighbourhoods live in 2-D grid space (Chebyshev
radius ``(k - 1) // 2``), so ``band(1)`` is exactly the position-aligned
diagonal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .tensor import ContractError

MODES = ("dense", "pka", "band")


class AlignmentError(ContractError):
    """A spatial condition's grid is not congruent with the image grid."""


@dataclass(frozen=True)
class Segment:
    name: str
    kind: str  # "text" | "image" | "spatial" | "subject"
    start: int
    length: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    @property
    def slice(self) -> slice:
        return slice(self.start, self.stop)


@dataclass(frozen=True)
class ModalityLayout:
    text_len: int
    grid: tuple[int, int]
    n_spatial: int = 0
    subject_lens: tuple[int, ...] = ()
    keyword_indices: tuple[int, ...] = (0,)
    # per spatial condition; defaults to the image grid
    spatial_grids: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "subject_lens", tuple(int(n) for n in self.subject_lens))
        object.__setattr__(self, "keyword_indices", tuple(int(k) for k in self.keyword_indices))
        if self.spatial_grids is None:
            object.__setattr__(self, "spatial_grids", (self.grid,) * self.n_spatial)
        else:
            object.__setattr__(self, "spatial_grids", tuple(tuple(int(x) for x in g) for g in self.spatial_grids))
        if self.text_len < 1:
            raise ContractError("text segment must hold at least one token")
        if min(self.grid) < 1:
            raise ContractError(f"bad image grid {self.grid}")
        if len(self.spatial_grids) != self.n_spatial:
            raise ContractError("spatial_grids must list one grid per spatial condition")
        if any(n < 1 for n in self.subject_lens):
            raise ContractError("subject conditions need at least one token")
        if not self.keyword_indices:
            raise ContractError("keyword set must be nonempty")
        if any(not 0 <= k < self.text_len for k in self.keyword_indices):
            raise ContractError(f"keyword indices {self.keyword_indices} fall outside the text segment")

    @property
    def N(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def n_subject(self) -> int:
        return len(self.subject_lens)

    @cached_property
    def segments(self) -> tuple[Segment, ...]:
        segs = []
        pos = 0

        def push(name, kind, n):
            nonlocal pos
            segs.append(Segment(name, kind, pos, n))
            pos += n

        push("T", "text", self.text_len)
        push("X", "image", self.N)
        for j, (h, w) in enumerate(self.spatial_grids, 1):
            push(f"SP{j}", "spatial", h * w)
        for j, n in enumerate(self.subject_lens, 1):
            push(f"SJ{j}", "subject", n)
        return tuple(segs)

    @cached_property
    def by_name(self) -> dict[str, Segment]:
        return {s.name: s for s in self.segments}

    @property
    def L(self) -> int:
        return self.segments[-1].stop

    def spatial(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == "spatial"]

    def subjects(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == "subject"]

    def conditions(self) -> list[Segment]:
        return [s for s in self.segments if s.kind in ("spatial", "subject")]

    def check_alignment(self) -> None:
        for seg, g in zip(self.spatial(), self.spatial_grids):
            if tuple(g) != self.grid:
                raise AlignmentError(f"{seg.name} grid {g} differs from image grid {self.grid}")

    def to_dict(self) -> dict:
        return {
            "text_len": self.text_len,
            "grid": list(self.grid),
            "n_spatial": self.n_spatial,
            "subject_lens": list(self.subject_lens),
            "keyword_indices": list(self.keyword_indices),
            "spatial_grids": [list(g) for g in self.spatial_grids],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModalityLayout":
        grids = d.get("spatial_grids")
        return cls(
            text_len=d["text_len"],
            grid=tuple(d["grid"]),
            n_spatial=d.get("n_spatial", 0),
            subject_lens=tuple(d.get("subject_lens", ())),
            keyword_indices=tuple(d.get("keyword_indices", (0,))),
            spatial_grids=None if grids is None else tuple(tuple(g) for g in grids),
        )


@dataclass(frozen=True)
class Rule:
    kind: str  # "all" | "diagonal" | "band" | "gated"
    k: int = 1
    active: np.ndarray | None = field(default=None, compare=False)

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "band":
            d["k"] = self.k
        if self.kind == "gated":
            d["active"] = [int(a) for a in self.active]
        return d


@dataclass
class AttentionMaskSpec:
    layout: ModalityLayout
    mode: str
    rules: dict[tuple[str, str], Rule]
    band_k: int | None = None

    def rule(self, q: str, k: str) -> Rule | None:
        return self.rules.get((q, k))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "band_k": self.band_k,
            "layout": self.layout.to_dict(),
            "rules": [{"query": q, "key": k, **r.to_dict()} for (q, k), r in self.rules.items()],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "AttentionMaskSpec":
        layout = ModalityLayout.from_dict(d["layout"])
        rules = {}
        for r in d["rules"]:
            active = np.asarray(r["active"], dtype=bool) if "active" in r else None
            rules[(r["query"], r["key"])] = Rule(r["kind"], r.get("k", 1), active)
        spec = cls(layout, d["mode"], rules, d.get("band_k"))
        _check_rows(spec)
        return spec


def _active_of(kw_mask) -> np.ndarray:
    return np.asarray(getattr(kw_mask, "active", kw_mask), dtype=bool)


def build_mask(layout: ModalityLayout, mode: str = "pka", k: int | None = None,
               kw_mask=None) -> AttentionMaskSpec:
    """Build the mask for ``mode`` in ``{"dense", "pka", "band"}``.

    ``pka``: T->{T,X}, X->{T,X}, X->SP_j diagonal, X->SJ_j row-gated by
    ``kw_mask`` (all rows when no mask is given), each condition attends only
    to itself. ``band`` is ``pka`` with X->SP_j widened to a k x k grid window.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mask mode {mode!r}")
    segs = layout.segments
    rules: dict[tuple[str, str], Rule] = {}
    if mode == "dense":
        for q in segs:
            for kk in segs:
                rules[(q.name, kk.name)] = Rule("all")
        return AttentionMaskSpec(layout, mode, rules)

    if mode == "band":
        if k is None or k < 1 or k % 2 == 0:
            raise ContractError(f"band mode needs an odd window k >= 1, got {k}")
    layout.check_alignment()
    sj_rule = Rule("all")
    if kw_mask is not None:
        active = _active_of(kw_mask)
        if active.shape != (layout.N,):
            raise ContractError(f"keyword mask must have length N={layout.N}, got {active.shape}")
        sj_rule = Rule("gated", active=active)

    for q in ("T", "X"):
        for kk in ("T", "X"):
            rules[(q, kk)] = Rule("all")
    for sp in layout.spatial():
        rules[("X", sp.name)] = Rule("diagonal") if mode == "pka" else Rule("band", k=k)
        rules[(sp.name, sp.name)] = Rule("all")
    for sj in layout.subjects():
        rules[("X", sj.name)] = sj_rule
        rules[(sj.name, sj.name)] = Rule("all")
    spec = AttentionMaskSpec(layout, mode, rules, band_k=k if mode == "band" else None)
    _check_rows(spec)
    return spec


def band_offsets_1d(n: int, radius: int) -> np.ndarray:
    """Number of in-range positions within ``radius`` for each of ``n`` positions."""
    i = np.arange(n)
    return np.minimum(i + radius, n - 1) - np.maximum(i - radius, 0) + 1


def band_neighbours(grid: tuple[int, int], k: int) -> tuple[np.ndarray, np.ndarray]:
    """Neighbour table for a k x k Chebyshev window.

    Returns ``(idx, valid)`` of shape ``(N, k*k)``; out-of-grid slots point at
    0 and are marked invalid.
    """
    H, W = grid
    r = (k - 1) // 2
    ys, xs = np.divmod(np.arange(H * W), W)
    dy, dx = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    ny = ys[:, None] + dy.reshape(-1)[None, :]
    nx = xs[:, None] + dx.reshape(-1)[None, :]
    valid = (ny >= 0) & (ny < H) & (nx >= 0) & (nx < W)
    idx = np.where(valid, ny * W + nx, 0)
    return idx, valid


def chebyshev_distance(grid: tuple[int, int]) -> np.ndarray:
    H, W = grid
    ys, xs = np.divmod(np.arange(H * W), W)
    return np.maximum(np.abs(ys[:, None] - ys[None, :]), np.abs(xs[:, None] - xs[None, :]))


def block_pairs(spec: AttentionMaskSpec, q: str, k: str) -> int:
    """Closed-form count of permitted pairs in one block."""
    rule = spec.rule(q, k)
    if rule is None:
        return 0
    lay = spec.layout
    nq, nk = lay.by_name[q].length, lay.by_name[k].length
    if rule.kind == "all":
        return nq * nk
    if rule.kind == "diagonal":
        return nq
    if rule.kind == "band":
        r = (rule.k - 1) // 2
        H, W = lay.grid
        return int(band_offsets_1d(H, r).sum() * band_offsets_1d(W, r).sum())
    if rule.kind == "gated":
        return int(rule.active.sum()) * nk
    raise ContractError(f"unknown rule kind {rule.kind!r}")


def permitted_pairs(spec: AttentionMaskSpec) -> int:
    return sum(block_pairs(spec, q, k) for (q, k) in spec.rules)


def block_mask(spec: AttentionMaskSpec, q: str, k: str) -> np.ndarray:
    """Boolean ``(len q, len k)`` mask of one block."""
    lay = spec.layout
    nq, nk = lay.by_name[q].length, lay.by_name[k].length
    rule = spec.rule(q, k)
    if rule is None:
        return np.zeros((nq, nk), dtype=bool)
    if rule.kind == "all":
        return np.ones((nq, nk), dtype=bool)
    if rule.kind == "diagonal":
        return np.eye(nq, nk, dtype=bool)
    if rule.kind == "band":
        return chebyshev_distance(lay.grid) <= (rule.k - 1) // 2
    if rule.kind == "gated":
        return np.repeat(rule.active[:, None], nk, axis=1)
    raise ContractError(f"unknown rule kind {rule.kind!r}")


def to_dense(spec: AttentionMaskSpec) -> np.ndarray:
    """Materialize the ``(L, L)`` boolean mask (oracle use only)."""
    lay = spec.layout
    out = np.zeros((lay.L, lay.L), dtype=bool)
    for (q, k) in spec.rules:
        out[lay.by_name[q].slice, lay.by_name[k].slice] = block_mask(spec, q, k)
    return out


def row_key_counts(spec: AttentionMaskSpec) -> np.ndarray:
    """Permitted keys per query row, without materializing the L x L mask."""
    lay = spec.layout
    counts = np.zeros(lay.L, dtype=np.int64)
    for (q, k), rule in spec.rules.items():
        qs, ks = lay.by_name[q], lay.by_name[k]
        if rule.kind == "all":
            counts[qs.slice] += ks.length
        elif rule.kind == "diagonal":
            counts[qs.slice] += 1
        elif rule.kind == "band":
            r = (rule.k - 1) // 2
            H, W = lay.grid
            counts[qs.slice] += np.outer(band_offsets_1d(H, r), band_offsets_1d(W, r)).reshape(-1)
        elif rule.kind == "gated":
            counts[qs.slice] += rule.active.astype(np.int64) * ks.length
    return counts


def _check_rows(spec: AttentionMaskSpec) -> None:
    empty = np.flatnonzero(row_key_counts(spec) == 0)
    if empty.size:
        raise ContractError(f"query rows without any permitted key: {empty[:8].tolist()}")
