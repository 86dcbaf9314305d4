"""A small multi-condition DiT on synthetic grids, trained with flow matching.

Data: each sample is an ``H x W`` grid with a filled rectangle or ellipse on a
``-1`` background. The fill tiles a 2 x 2 subject patch, the spatial
condition is the 0/1 shape map of the target, and the text names the subject
at ``keyword_index``. Interpolant: ``x_t = (1 - t) x_data + t x_noise`` with
target velocity ``x_noise - x_data``; ``t = 1`` is pure noise.

Condition tokens carry no timestep input and, under PKA masks, attend only to
themselves, so their per-layer K/V can be cached across denoising steps.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .cache import ConditionCache
from .dense import merge_heads, split_heads
from .layout import ModalityLayout, build_mask, to_dense
from .sampler import preset, sample_t
from .sparse import block_partial, band, keyword_scores, ksa, ksa_mask_or_fallback, merge_partials, paa
from .tensor import ContractError, Rng, dtype_for, read_tensor, write_tensor

EVAL_SEED = 0x5EED
PATCH_TABLE_SEED = 0xC0FFEE
BOS, EOS = 0, 3
SHAPE_WORDS = {"rect": 1, "ellipse": 2}
SUBJECT_WORD0 = 4
MAP_KINDS = ("shape", "edge")


class TrainingError(RuntimeError):
    def __init__(self, message: str, trace: list[dict]):
        super().__init__(message)
        self.trace = trace


@dataclass
class ToyModelConfig:
    layers: int = 2
    heads: int = 2
    head_dim: int = 16
    grid: tuple[int, int] = (8, 8)
    channels: int = 1
    text_len: int = 4
    vocab: int = 16
    n_spatial: int = 1
    n_subject: int = 1
    keyword_index: int = 1
    t_features: int = 16
    mlp_ratio: int = 2
    band_k: int = 1  # X->SP window; 1 is position-aligned attention
    backend: str = "sparse"  # "oracle" evaluates PKA layers with the dense masked softmax
    spatial_kind: str = "shape"  # map carried by SP1; further conditions alternate shape/edge
    # training
    lr: float = 3e-3
    iterations: int = 1000
    batch_size: int = 8
    dataset_size: int = 512
    sampler: str = "csas"
    attn: str = "pka"
    seed: int = 0
    precision: str = "fp32"
    eval_every: int = 0
    eval_samples: int = 64
    eval_steps: int = 28

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        if self.N > 256:
            raise ContractError(f"toy grid {self.grid} exceeds 256 image tokens")
        if self.attn not in ("pka", "dense"):
            raise ContractError(f"attn must be 'pka' or 'dense', got {self.attn!r}")
        if self.spatial_kind not in MAP_KINDS:
            raise ContractError(f"spatial_kind must be one of {MAP_KINDS}")
        if self.backend not in ("sparse", "oracle"):
            raise ContractError(f"backend must be 'sparse' or 'oracle', got {self.backend!r}")
        if not 0 <= self.keyword_index < self.text_len:
            raise ContractError("keyword index must fall inside the text")

    @property
    def N(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def d_model(self) -> int:
        return self.heads * self.head_dim

    @property
    def subject_len(self) -> int:
        return 4

    @property
    def dtype(self):
        return dtype_for(self.precision)

    def layout(self) -> ModalityLayout:
        return ModalityLayout(self.text_len, self.grid, self.n_spatial,
                              (self.subject_len,) * self.n_subject, (self.keyword_index,))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ToyModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# --------------------------------------------------------------------------- data

@dataclass
class SyntheticBatch:
    target: np.ndarray   # (B, N, ch)
    spatial: np.ndarray  # (B, c, N, ch)
    subject: np.ndarray  # (B, s, 4, ch)
    text: np.ndarray     # (B, M) int
    keyword: int

    def __len__(self):
        return self.target.shape[0]

    def take(self, idx) -> "SyntheticBatch":
        return SyntheticBatch(self.target[idx], self.spatial[idx], self.subject[idx], self.text[idx], self.keyword)

    def conditions(self) -> dict:
        return {"text": self.text, "spatial": self.spatial, "subject": self.subject}


def shape_map(img: np.ndarray) -> np.ndarray:
    """Soft 0/1 shape map; exact indicator on clean targets (fill >= 0.5, background -1)."""
    return np.clip(np.asarray(img) + 0.5, 0.0, 1.0)


def edge_map(shape: np.ndarray) -> np.ndarray:
    """Boundary of a (H, W) 0/1 map: the shape minus its 4-neighbour erosion."""
    s = shape > 0.5
    pad = np.pad(s, 1)
    core = s & pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return (s & ~core).astype(shape.dtype)


def condition_map(img: np.ndarray, kind: str) -> np.ndarray:
    """Spatial condition of ``kind`` derived from ``(..., H, W)`` images."""
    shape = shape_map(img)
    if kind == "shape":
        return shape
    if kind == "edge":
        flat = shape.reshape((-1,) + shape.shape[-2:])
        return np.stack([edge_map(s) for s in flat]).reshape(shape.shape)
    raise ContractError(f"unknown condition map kind {kind!r}")


def map_kinds(cfg) -> list[str]:
    first = MAP_KINDS.index(cfg.spatial_kind)
    return [MAP_KINDS[(first + j) % 2] for j in range(cfg.n_spatial)]


def subject_patches(ch: int) -> np.ndarray:
    """Fixed table of 8 subject patches, shape ``(8, 2, 2, ch)``, values in [0.5, 1]."""
    return 0.5 + 0.5 * Rng(PATCH_TABLE_SEED).uniform((8, 2, 2, ch))


def make_samples(cfg: ToyModelConfig, n: int, rng: Rng) -> SyntheticBatch:
    H, W = cfg.grid
    ch = cfg.channels
    patches = subject_patches(ch)
    target = np.full((n, H, W, ch), -1.0)
    spatial = np.zeros((n, cfg.n_spatial, H, W, ch))
    subject = np.zeros((n, cfg.n_subject, 4, ch))
    text = np.full((n, cfg.text_len), EOS, dtype=np.int64)
    ys, xs = np.mgrid[0:H, 0:W]
    for i in range(n):
        h = int(rng.integers(2, max(3, H - 1)))
        w = int(rng.integers(2, max(3, W - 1)))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        kind = "rect" if rng.uniform(1)[0] < 0.5 else "ellipse"
        if kind == "rect":
            inside = (ys >= top) & (ys < top + h) & (xs >= left) & (xs < left + w)
        else:
            cy, cx = top + (h - 1) / 2, left + (w - 1) / 2
            inside = ((ys - cy) / (h / 2)) ** 2 + ((xs - cx) / (w / 2)) ** 2 <= 1.0
        sid = int(rng.integers(0, len(patches)))
        tile = patches[sid][ys % 2, xs % 2]  # (H, W, ch)
        target[i][inside] = tile[inside]
        shape = inside.astype(float)
        maps = {"shape": shape, "edge": edge_map(shape)}
        for j, mk in enumerate(map_kinds(cfg)):
            spatial[i, j] = maps[mk][..., None]
        for j in range(cfg.n_subject):
            subject[i, j] = patches[(sid + j) % len(patches)].reshape(4, ch)
        words = [BOS, SUBJECT_WORD0 + sid, SHAPE_WORDS[kind], EOS]
        text[i, :min(cfg.text_len, 4)] = words[:cfg.text_len]
        if cfg.text_len > 1 and cfg.keyword_index != 1:
            text[i, cfg.keyword_index] = SUBJECT_WORD0 + sid
    dt = cfg.dtype
    return SyntheticBatch(target.reshape(n, H * W, ch).astype(dt),
                          spatial.reshape(n, cfg.n_spatial, H * W, ch).astype(dt),
                          subject.astype(dt), text, cfg.keyword_index)


# --------------------------------------------------------------------------- model

def init_params(cfg: ToyModelConfig, rng: Rng) -> tuple[dict, dict]:
    D, ch, dt = cfg.d_model, cfg.channels, cfg.dtype
    p = {}

    def lin(name, fan_in, fan_out, scale=1.0):
        p[name] = rng.normal((fan_in, fan_out), scale=scale / math.sqrt(fan_in), dtype=dt)

    lin("x_in", ch, D)
    p["x_b"] = np.zeros(D, dt)
    p["pos"] = rng.normal((cfg.N, D), scale=0.3, dtype=dt)
    lin("t_w1", cfg.t_features, D)
    p["t_b1"] = np.zeros(D, dt)
    lin("t_w2", D, D)
    lin("txt_w", D, D)
    lin("sp_in", ch, D)
    p["sp_b"] = np.zeros(D, dt)
    p["sp_type"] = rng.normal((max(cfg.n_spatial, 1), D), scale=0.3, dtype=dt)
    lin("sj_in", ch, D)
    p["sj_pos"] = rng.normal((4, D), scale=0.3, dtype=dt)
    for l in range(cfg.layers):
        for w in ("wq", "wk", "wv", "wo"):
            lin(f"l{l}.{w}", D, D)
        lin(f"l{l}.w1", D, cfg.mlp_ratio * D)
        p[f"l{l}.b1"] = np.zeros(cfg.mlp_ratio * D, dt)
        lin(f"l{l}.w2", cfg.mlp_ratio * D, D, scale=0.5)
        p[f"l{l}.b2"] = np.zeros(D, dt)
    lin("out_w", D, ch, scale=0.1)
    p["out_b"] = np.zeros(ch, dt)
    frozen = {"txt_emb": rng.normal((cfg.vocab, D), dtype=dt)}
    return p, frozen


def _ln(x):
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc / ad.sqrt(var + 1e-5)


def _silu(x):
    return x * ad.sigmoid(x)


def time_features(t: np.ndarray, n: int) -> np.ndarray:
    freqs = 2.0 ** np.arange(n // 2)
    ang = np.pi * np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


class ToyDiT:
    def __init__(self, cfg: ToyModelConfig, params: dict | None = None, frozen: dict | None = None):
        self.cfg = cfg
        self.layout = cfg.layout()
        if params is None or frozen is None:
            params, frozen = init_params(cfg, Rng(cfg.seed).spawn(1))
        self.params = params
        self.frozen = frozen

    # -- pieces shared by every attention mode
    def _qkv(self, p, l, x):
        h = self.cfg.heads
        return (split_heads(ad.matmul(x, p[f"l{l}.{w}"]), h) for w in ("wq", "wk", "wv"))

    def _post(self, p, l, hid, attn_out):
        hid = hid + ad.matmul(merge_heads(attn_out), p[f"l{l}.wo"])
        mid = _silu(ad.matmul(_ln(hid), p[f"l{l}.w1"]) + p[f"l{l}.b1"])
        return hid + ad.matmul(mid, p[f"l{l}.w2"]) + p[f"l{l}.b2"]

    def _embed_conditions(self, p, conditions) -> dict:
        hid = {}
        sp = conditions["spatial"]
        sj = conditions["subject"]
        for j in range(self.cfg.n_spatial):
            hid[f"SP{j + 1}"] = ad.matmul(sp[:, j], p["sp_in"]) + p["sp_b"] + p["pos"] + p["sp_type"][j]
        for j in range(self.cfg.n_subject):
            hid[f"SJ{j + 1}"] = ad.matmul(sj[:, j], p["sj_in"]) + p["sj_pos"]
        return hid

    def _embed_main(self, p, conditions, x_t, t):
        dt = self.cfg.dtype
        temb = ad.matmul(ad.tanh(ad.matmul(time_features(t, self.cfg.t_features).astype(dt), p["t_w1"])
                                 + p["t_b1"]), p["t_w2"])
        hx = ad.matmul(x_t, p["x_in"]) + p["x_b"] + p["pos"] + ad.reshape(temb, (len(t), 1, self.cfg.d_model))
        ht = ad.matmul(self.frozen["txt_emb"][conditions["text"]], p["txt_w"])
        return ht, hx

    def condition_branch(self, conditions, params=None) -> dict:
        """Condition-only stream: ``{cond_id: [(k, v, layer_output) per layer]}``."""
        p = self.params if params is None else params
        hid = self._embed_conditions(p, conditions)
        out = {cid: [] for cid in hid}
        for l in range(self.cfg.layers):
            for cid in list(hid):
                q, k, v = self._qkv(p, l, _ln(hid[cid]))
                o = merge_partials([block_partial(q, k, v, block=f"{cid}->{cid}")])
                hid[cid] = self._post(p, l, hid[cid], o)
                out[cid].append((k, v, hid[cid]))
        return out

    def forward(self, conditions, x_t, t, *, params=None, attn: str | None = None, cache=None,
                kw_active=None, kw_eps: float | None = None, kw_mode: str = "softmax",
                backend: str | None = None, record: dict | None = None):
        """Predicted velocity ``(B, N, ch)`` and the keyword masks computed this call.

        ``kw_active`` holds one ``(B, N)`` mask per layer gating X->SJ (None:
        all rows). With ``kw_eps`` set, fresh masks are derived from this
        call's image queries and text keys and returned for the next step.
        """
        p = self.params if params is None else params
        attn = attn or self.cfg.attn
        backend = backend or self.cfg.backend
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if attn == "dense":
            return self._forward_dense(p, conditions, x_t, t, record), None
        if attn != "pka":
            raise ContractError(f"unknown attention mode {attn!r}")

        if cache is not None:
            cond_kv = {s.name: [cache.lookup(l, s.name) for l in range(self.cfg.layers)]
                       for s in self.layout.conditions()}
        else:
            cond_kv = {cid: [(k, v) for k, v, _ in per_layer]
                       for cid, per_layer in self.condition_branch(conditions, p).items()}

        ht, hx = self._embed_main(p, conditions, x_t, t)
        keywords = self.layout.keyword_indices
        computed = []
        for l in range(self.cfg.layers):
            qt, kt, vt = self._qkv(p, l, _ln(ht))
            qx, kx, vx = self._qkv(p, l, _ln(hx))
            if kw_eps is not None:
                computed.append(ksa_mask_or_fallback(qx, kt, keywords, kw_eps, kw_mode).active)
            if record is not None:
                record.setdefault("kw_scores", []).append(keyword_scores(qx, kt, keywords, mode=kw_mode))
            active = None if kw_active is None else kw_active[l]
            if backend == "oracle":
                ot, ox = self._oracle_attention(l, qt, kt, vt, qx, kx, vx, cond_kv, active)
            else:
                ot = merge_partials([block_partial(qt, kt, vt, block="T->T"),
                                     block_partial(qt, kx, vx, block="T->X")])
                parts = [block_partial(qx, kt, vt, block="X->T"), block_partial(qx, kx, vx, block="X->X")]
                for seg in self.layout.spatial():
                    k_sp, v_sp = cond_kv[seg.name][l]
                    if self.cfg.band_k == 1:
                        parts.append(paa(qx, k_sp, v_sp, block=f"X->{seg.name}"))
                    else:
                        parts.append(band(qx, k_sp, v_sp, self.cfg.grid, self.cfg.band_k, block=f"X->{seg.name}"))
                for seg in self.layout.subjects():
                    k_sj, v_sj = cond_kv[seg.name][l]
                    if active is None:
                        parts.append(block_partial(qx, k_sj, v_sj, block=f"X->{seg.name}"))
                    else:
                        parts.append(ksa(qx, k_sj, v_sj, active, block=f"X->{seg.name}"))
                ox = merge_partials(parts)
            ht = self._post(p, l, ht, ot)
            hx = self._post(p, l, hx, ox)
        v = ad.matmul(_ln(hx), p["out_w"]) + p["out_b"]
        return v, (computed if kw_eps is not None else None)

    def _oracle_attention(self, l, qt, kt, vt, qx, kx, vx, cond_kv, active):
        """Dense masked-softmax evaluation of the same PKA layer (reference backend)."""
        lay = self.layout
        conds = [cond_kv[s.name][l] for s in lay.conditions()]
        k_all = ad.concat([kt, kx] + [k for k, _ in conds], axis=-2)
        v_all = ad.concat([vt, vx] + [v for _, v in conds], axis=-2)
        q = ad.concat([qt, qx], axis=-2)
        rows = lay.text_len + lay.N
        B = q.shape[0]
        if active is None:
            mask = to_dense(build_mask(lay, "pka", k=None))[:rows]
            mask = np.broadcast_to(mask, (B, 1) + mask.shape)
        else:
            mask = np.stack([to_dense(build_mask(lay, "pka", kw_mask=a))[:rows] for a in np.atleast_2d(active)])
            mask = np.broadcast_to(mask[:, None], (B, 1) + mask.shape[1:])
        if self.cfg.band_k != 1:
            raise ContractError("oracle backend supports position-aligned X->SP only")
        s = ad.matmul(q, ad.swapaxes(k_all, -1, -2)) * (1.0 / math.sqrt(self.cfg.head_dim))
        o = ad.matmul(ad.softmax(s, axis=-1, mask=mask), v_all)
        return o[:, :, :lay.text_len], o[:, :, lay.text_len:]

    def _forward_dense(self, p, conditions, x_t, t, record):
        lay = self.layout
        ht, hx = self._embed_main(p, conditions, x_t, t)
        chid = self._embed_conditions(p, conditions)
        hid = ad.concat([ht, hx] + [chid[s.name] for s in lay.conditions()], axis=-2)
        scale = 1.0 / math.sqrt(self.cfg.head_dim)
        for l in range(self.cfg.layers):
            q, k, v = self._qkv(p, l, _ln(hid))
            probs = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * scale, axis=-1)
            if record is not None:
                record.setdefault("probs", []).append(np.array(ad.value(probs)))
            hid = self._post(p, l, hid, ad.matmul(probs, v))
        x = lay.by_name["X"]
        return ad.matmul(_ln(hid[:, x.start:x.stop]), p["out_w"]) + p["out_b"]

    # -- parameter plumbing
    def param_names(self) -> list[str]:
        return list(self.params)

    def with_params(self, params: dict) -> "ToyDiT":
        return ToyDiT(self.cfg, params, self.frozen)

    def astype(self, dtype) -> "ToyDiT":
        cfg = ToyModelConfig.from_dict({**self.cfg.to_dict(), "precision": "fp64" if np.dtype(dtype) == np.float64 else "fp32"})
        return ToyDiT(cfg, {k: v.astype(dtype) for k, v in self.params.items()},
                      {k: v.astype(dtype) for k, v in self.frozen.items()})


def x_to_sp_attention(probs: np.ndarray, layout: ModalityLayout, cond: str = "SP1") -> np.ndarray:
    """Row-renormalized image->spatial-condition block of dense attention probabilities, heads kept."""
    x = layout.by_name["X"]
    sp = layout.by_name[cond]
    block = np.asarray(probs)[..., x.slice, sp.slice]
    return block / block.sum(axis=-1, keepdims=True)


# --------------------------------------------------------------------------- objective

def interpolate(x0, noise, t):
    t = np.asarray(t).reshape(-1, 1, 1).astype(np.asarray(x0).dtype)
    return (1 - t) * x0 + t * noise


def flow_matching_loss(model: ToyDiT, batch: SyntheticBatch, t, noise, params=None, attn=None, predictor=None):
    """Mean squared error between predicted velocity and ``noise - data``."""
    x_t = interpolate(batch.target, noise, t)
    if predictor is None:
        v, _ = model.forward(batch.conditions(), x_t, t, params=params, attn=attn)
    else:
        v = predictor(x_t, t)
    diff = v - (noise - batch.target)
    return ad.mean(diff * diff)


def denoise(model: ToyDiT, conditions, steps: int, use_cache: bool = True, noise=None, rng: Rng | None = None,
            attn: str | None = None, kw_eps: float | None = None, kw_mode: str = "softmax",
            backend: str | None = None, trace: list | None = None) -> np.ndarray:
    """Euler integration of the learned velocity from t=1 (noise) to t=0.

    With ``kw_eps`` set, each step recomputes keyword masks from that step's
    queries and gates X->SJ with the masks of the previous step; the first
    step runs X->SJ densely.
    """
    if steps < 1:
        raise ContractError("steps must be >= 1")
    cfg = model.cfg
    attn = attn or cfg.attn
    B = conditions["text"].shape[0]
    if noise is None:
        noise = (rng or Rng(0)).normal((B, cfg.N, cfg.channels), dtype=cfg.dtype)
    x = np.array(noise, dtype=cfg.dtype)
    cache = None
    if use_cache and attn == "pka":
        cache = ConditionCache.build(model, conditions, model.layout, step_index=0)
    prev = None
    dt = 1.0 / steps
    for step in range(steps):
        t = np.full(B, 1.0 - step * dt)
        v, computed = model.forward(conditions, x, t, attn=attn, cache=cache, kw_active=prev,
                                    kw_eps=kw_eps, kw_mode=kw_mode, backend=backend)
        if trace is not None and computed is not None:
            for l in range(cfg.layers):
                trace.append({"step": step, "layer": l,
                              "applied": None if prev is None else prev[l].copy(),
                              "computed": computed[l].copy()})
        x = x - dt * np.asarray(v)
        prev = computed
    return x


def check_mask_protocol(trace: list[dict]) -> None:
    """Assert the mask applied at step t+1 is the one computed at step t, per layer."""
    by_key = {(e["step"], e["layer"]): e for e in trace}
    for (step, layer), e in by_key.items():
        if step == 0:
            if e["applied"] is not None:
                raise AssertionError("first step must run X->SJ without a keyword mask")
            continue
        before = by_key[(step - 1, layer)]["computed"]
        if e["applied"] is None or not np.array_equal(e["applied"], before):
            raise AssertionError(f"step {step} layer {layer} applied a mask not computed at step {step - 1}")


def reconstruction_mse(cfg: ToyModelConfig, generated: np.ndarray, spatial: np.ndarray) -> float:
    """MSE between the SP1-kind map of generated grids and the SP1 condition they were given."""
    H, W = cfg.grid
    imgs = np.asarray(generated)[..., 0].reshape(-1, H, W)
    derived = condition_map(imgs, map_kinds(cfg)[0])
    return float(np.mean((derived - np.asarray(spatial)[:, 0, :, 0].reshape(-1, H, W)) ** 2))


def condition_mse(model: ToyDiT, batch: SyntheticBatch, noise, steps: int, **kw) -> float:
    gen = denoise(model, batch.conditions(), steps, noise=noise, **kw)
    return reconstruction_mse(model.cfg, gen, batch.spatial)


# --------------------------------------------------------------------------- training

@dataclass
class EvalSet:
    batch: SyntheticBatch
    noise: np.ndarray     # generation noise
    t: np.ndarray         # fixed loss timesteps
    loss_noise: np.ndarray


def make_eval_set(cfg: ToyModelConfig) -> EvalSet:
    rng = Rng(EVAL_SEED)
    batch = make_samples(cfg, cfg.eval_samples, rng.spawn(0))
    n = cfg.eval_samples
    noise = rng.spawn(1).normal((n, cfg.N, cfg.channels), dtype=cfg.dtype)
    t = (np.arange(n) + 0.5) / n
    loss_noise = rng.spawn(2).normal((n, cfg.N, cfg.channels), dtype=cfg.dtype)
    return EvalSet(batch, noise, t, loss_noise)


@dataclass
class TrainResult:
    model: ToyDiT
    trace: list[dict] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return next(r for r in reversed(self.trace) if r.get("cond_mse") is not None)


class Adam:
    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps=1e-8, clip: float = 1.0):
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, betas[0], betas[1], eps, clip
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.step_count += 1
        norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
        factor = min(1.0, self.clip / (norm + 1e-12)) if self.clip else 1.0
        out = {}
        for k, p in params.items():
            g = grads[k] * factor
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.step_count)
            vh = self.v[k] / (1 - self.b2 ** self.step_count)
            out[k] = (p - self.lr * mh / (np.sqrt(vh) + self.eps)).astype(p.dtype)
        return out


def evaluate(model: ToyDiT, ev: EvalSet, steps: int) -> dict:
    x0 = ev.batch.target
    loss = float(ad.value(flow_matching_loss(model, ev.batch, ev.t, ev.loss_noise)))
    mse = condition_mse(model, ev.batch, ev.noise, steps)
    return {"eval_loss": loss, "cond_mse": mse, "target_range": float(x0.max() - x0.min())}


def train(cfg: ToyModelConfig, log=None) -> TrainResult:
    """Seeded flow-matching training; the sampler only changes drawn timesteps."""
    root = Rng(cfg.seed)
    data = make_samples(cfg, cfg.dataset_size, root.spawn(0))
    model = ToyDiT(cfg, *init_params(cfg, root.spawn(1)))
    t_rng, noise_rng, pick_rng = root.spawn(2), root.spawn(3), root.spawn(4)
    sampler = preset(cfg.sampler)
    ev = make_eval_set(cfg)
    names = model.param_names()
    opt = Adam(model.params, cfg.lr)
    trace: list[dict] = []

    for it in range(1, cfg.iterations + 1):
        idx = pick_rng.integers(0, len(data), cfg.batch_size)
        batch = data.take(idx)
        t = sample_t(t_rng, sampler, cfg.batch_size)
        noise = noise_rng.normal((cfg.batch_size, cfg.N, cfg.channels), dtype=cfg.dtype)

        def objective(*ps):
            return flow_matching_loss(model, batch, t, noise, params=dict(zip(names, ps)))

        loss, grads = ad.value_and_grad(objective, [model.params[n] for n in names])
        row = {"iteration": it, "loss": loss, "eval_loss": None, "cond_mse": None}
        if not math.isfinite(loss):
            trace.append(row)
            raise TrainingError(f"loss diverged at iteration {it}", trace)
        model.params = opt.step(model.params, dict(zip(names, grads)))
        if it == cfg.iterations or (cfg.eval_every and it % cfg.eval_every == 0):
            row.update(evaluate(model, ev, cfg.eval_steps))
            row.pop("target_range", None)
            if log:
                log(row)
        trace.append(row)
    return TrainResult(model, trace)


def write_trace(trace: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "eval_loss", "cond_mse"])
        for r in trace:
            w.writerow([r["iteration"], repr(float(r["loss"])),
                        "" if r["eval_loss"] is None else repr(float(r["eval_loss"])),
                        "" if r["cond_mse"] is None else repr(float(r["cond_mse"]))])


def save_model(model: ToyDiT, out_dir: str | Path) -> None:
    out = Path(out_dir)
    (out / "weights").mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(model.cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    for name, arr in {**model.params, **{f"frozen.{k}": v for k, v in model.frozen.items()}}.items():
        write_tensor(out / "weights" / f"{name}.pkat", arr)


def load_model(out_dir: str | Path) -> ToyDiT:
    out = Path(out_dir)
    cfg = ToyModelConfig.from_dict(json.loads((out / "config.json").read_text()))
    cfg.precision = "fp32"
    params, frozen = {}, {}
    for f in sorted((out / "weights").glob("*.pkat")):
        name = f.name[:-len(".pkat")]
        arr = read_tensor(f)
        if name.startswith("frozen."):
            frozen[name[len("frozen."):]] = arr
        else:
            params[name] = arr
    return ToyDiT(cfg, params, frozen)
