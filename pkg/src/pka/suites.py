"""Seeded verification suites shared by the CLI and the test-suite.

``equivalence_suite`` compares the block-sparse engine with the dense masked
oracle; ``gradcheck_suite`` runs central-difference checks on every attention
kernel and on the flow-matching loss.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .dense import AttentionInputs, masked_attention_oracle, mma_full
from .layout import ModalityLayout, build_mask
from .sparse import band, block_partial, ksa, merge_partials, paa, sparse_attention
from .tensor import Rng

TOLERANCE = {"fp32": 1e-5, "fp64": 1e-10}
GRID_SIDE = {4: 2, 16: 4, 64: 8}
PARAMETER_GRID = {
    "M": (2, 8),
    "N": (4, 16, 64),
    "c": (0, 1, 2, 3),
    "s": (0, 1, 2),
    "h": (1, 4),
    "d": (4, 16),
}


@dataclass
class Instance:
    layout: ModalityLayout
    h: int
    d: int
    mode: str
    band_k: int | None
    active: np.ndarray | None

    def describe(self) -> dict:
        lay = self.layout
        return {"M": lay.text_len, "N": lay.N, "c": lay.n_spatial, "s": lay.n_subject, "h": self.h,
                "d": self.d, "mode": self.mode, "band_k": self.band_k,
                "active": None if self.active is None else int(self.active.sum())}


def make_instances(seed: int, count: int) -> list[Instance]:
    """``count`` instances cycling through a seed-shuffled parameter grid.

    Every fourth instance uses a 3 x 3 band on X->SP instead of the diagonal;
    keyword masks are absent, empty, full or Bernoulli(0.4).
    """
    rng = Rng(seed)
    combos = list(itertools.product(*PARAMETER_GRID.values()))
    order = rng.permutation(len(combos))
    out = []
    for i in range(count):
        M, N, c, s, h, d = combos[order[i % len(combos)]]
        side = GRID_SIDE[N]
        subj = tuple(int(x) for x in rng.integers(1, 5, s))
        n_kw = int(rng.integers(1, M + 1))
        kw = tuple(sorted(int(x) for x in rng.permutation(M)[:n_kw]))
        layout = ModalityLayout(M, (side, side), c, subj, kw)
        kind = i % 4
        active = None
        if s:
            if kind == 1:
                active = np.zeros(N, bool)
            elif kind == 2:
                active = np.ones(N, bool)
            elif kind == 3:
                active = rng.uniform(N) < 0.4
        mode, k = ("band", 3) if i % 4 == 3 and c else ("pka", None)
        out.append(Instance(layout, h, d, mode, k, active))
    return out


def _inputs(inst: Instance, rng: Rng, dtype) -> AttentionInputs:
    L = inst.layout.L
    shape = (inst.h, L, inst.d)
    return AttentionInputs(rng.normal(shape, dtype=dtype), rng.normal(shape, dtype=dtype),
                           rng.normal(shape, dtype=dtype), inst.layout)


@dataclass
class SuiteResult:
    instances: int
    max_abs_err: float
    tolerance: float
    precision: str
    worst: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_abs_err <= self.tolerance

    def to_dict(self) -> dict:
        return {"instances": self.instances, "max_abs_err": self.max_abs_err, "pass": self.passed,
                "precision": self.precision, "tolerance": self.tolerance, "worst": self.worst}


def equivalence_suite(seed: int = 0, count: int = 200, precision: str = "fp32") -> SuiteResult:
    dtype = np.float32 if precision == "fp32" else np.float64
    rng = Rng(seed).spawn(1)
    worst, worst_info = 0.0, {}
    instances = make_instances(seed, count)
    for i, inst in enumerate(instances):
        spec = build_mask(inst.layout, inst.mode, k=inst.band_k, kw_mask=inst.active)
        inp = _inputs(inst, rng, dtype)
        err = float(np.max(np.abs(sparse_attention(inp, spec).astype(np.float64)
                                  - masked_attention_oracle(inp, spec).astype(np.float64))))
        if err >= worst:
            worst, worst_info = err, {"index": i, **inst.describe(), "mask": spec.to_dict()}
    return SuiteResult(len(instances), worst, TOLERANCE[precision], precision, worst_info)


# --------------------------------------------------------------------------- gradients

GRAD_TOL = 1e-4


def _kernel_cases():
    """name -> builder(rng) returning (f, params) with f scalar in fp64."""

    def weighted(out, w):
        return ad.sum(out * w)

    def qkv(rng, h, rows, cols, d):
        return [rng.normal((h, rows, d), dtype=np.float64), rng.normal((h, cols, d), dtype=np.float64),
                rng.normal((h, cols, d), dtype=np.float64)]

    def c_block(rng):
        ps = qkv(rng, 2, 5, 3, 4)
        w = rng.normal((2, 5, 4), dtype=np.float64)
        return (lambda q, k, v: weighted(merge_partials([block_partial(q, k, v)]), w)), ps

    def c_paa(rng):
        ps = qkv(rng, 2, 6, 6, 4) + [rng.normal((2, 6, 4), dtype=np.float64),
                                     rng.normal((2, 6, 4), dtype=np.float64)]
        w = rng.normal((2, 6, 4), dtype=np.float64)
        # merged with an X->X block so the single-key softmax is not trivially constant
        return (lambda q, k, v, kx, vx: weighted(merge_partials([paa(q, k, v), block_partial(q, kx, vx)]), w)), ps

    def c_band(rng):
        ps = qkv(rng, 2, 9, 9, 4)
        w = rng.normal((2, 9, 4), dtype=np.float64)
        return (lambda q, k, v: weighted(merge_partials([band(q, k, v, (3, 3), 3)]), w)), ps

    def c_ksa(rng):
        ps = qkv(rng, 2, 6, 3, 4) + [rng.normal((2, 6, 4), dtype=np.float64),
                                     rng.normal((2, 6, 4), dtype=np.float64)]
        active = rng.uniform(6) < 0.5
        active[0] = True
        w = rng.normal((2, 6, 4), dtype=np.float64)
        return (lambda q, k, v, kx, vx: weighted(
            merge_partials([ksa(q, k, v, active), block_partial(q, kx, vx)]), w)), ps

    def c_engine(rng):
        lay = ModalityLayout(2, (2, 2), 1, (2,), (1,))
        active = np.array([True, False, True, False])
        spec = build_mask(lay, "pka", kw_mask=active)
        ps = [rng.normal((2, lay.L, 3), dtype=np.float64) for _ in range(3)]
        w = rng.normal((lay.L, 6), dtype=np.float64)
        return (lambda q, k, v: weighted(sparse_attention(AttentionInputs(q, k, v, lay), spec), w)), ps

    def c_oracle(rng):
        lay = ModalityLayout(2, (2, 2), 1, (2,), (1,))
        spec = build_mask(lay, "pka")
        ps = [rng.normal((2, lay.L, 3), dtype=np.float64) for _ in range(3)]
        w = rng.normal((lay.L, 6), dtype=np.float64)
        return (lambda q, k, v: weighted(masked_attention_oracle(AttentionInputs(q, k, v, lay), spec), w)), ps

    def c_dense(rng):
        ps = [rng.normal((2, 6, 3), dtype=np.float64) for _ in range(3)]
        w = rng.normal((6, 6), dtype=np.float64)
        return (lambda q, k, v: weighted(mma_full(AttentionInputs(q, k, v)), w)), ps

    return {"block": c_block, "paa": c_paa, "band": c_band, "ksa": c_ksa,
            "sparse_engine": c_engine, "masked_oracle": c_oracle, "dense": c_dense}


def _loss_case(rng: Rng):
    from . import toy

    cfg = toy.ToyModelConfig(layers=1, heads=2, head_dim=4, grid=(4, 4), text_len=4, t_features=4,
                             precision="fp64", seed=int(rng.integers(0, 2 ** 31)))
    model = toy.ToyDiT(cfg)
    batch = toy.make_samples(cfg, 2, rng)
    t = 0.05 + 0.9 * rng.uniform(2)
    noise = rng.normal((2, cfg.N, cfg.channels), dtype=np.float64)
    names = model.param_names()

    def f(*ps):
        return toy.flow_matching_loss(model, batch, t, noise, params=dict(zip(names, ps)))

    return f, [model.params[n] for n in names]


@dataclass
class GradResult:
    per_kernel: dict[str, float]
    tolerance: float = GRAD_TOL

    @property
    def passed(self) -> bool:
        return all(v <= self.tolerance for v in self.per_kernel.values())

    def to_dict(self) -> dict:
        return {"max_rel_err": self.per_kernel, "tolerance": self.tolerance, "pass": self.passed}


def gradcheck_suite(seed: int = 0, instances: int = 20, loss_probes: int = 6,
                    kernels: list[str] | None = None) -> GradResult:
    cases = _kernel_cases()
    cases["flow_matching_loss"] = _loss_case
    if kernels is not None:
        cases = {k: cases[k] for k in kernels}
    out = {}
    for name, build in cases.items():
        worst = 0.0
        for i in range(instances):
            rng = Rng(seed).spawn(1000 * (list(cases).index(name) + 1) + i)
            f, ps = build(rng)
            probes = loss_probes if name == "flow_matching_loss" else None
            rep = ad.fd_check(f, ps, h=1e-3, probes=probes, rng=rng)
            worst = max(worst, rep.max_rel_err)
        out[name] = worst
    return GradResult(out)
