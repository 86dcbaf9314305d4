"""Dense tensor primitives, stable softmax, seeded RNG and the flat tensor file format.

Tensors are plain row-major ``numpy.ndarray`` objects. float32 is the working
precision; float64 ("oracle mode") is used wherever equivalence or gradient
tolerances need headroom.

RNG
---
``Rng`` is Philox4x64-10 (Salmon et al. 2011), a counter-based generator with
a fixed round-constant table::

    multipliers  M0 = 0xD2E7470EE14C6C93, M1 = 0xCA5A826395121157
    key bumps    W0 = 0x9E3779B97F4A7C15, W1 = 0xBB67AE8584CAA73B
    rounds       10

The 64-bit seed is used directly as the first key word (second key word 0,
counter starts at 0). Uniform doubles are ``(u64 >> 11) * 2**-53``.
Normal variates use the Box-Muller transform on consecutive uniform pairs
``(u1, u2)``::

    r = sqrt(-2 ln(1 - u1)),  z0 = r cos(2 pi u2),  z1 = r sin(2 pi u2)

``1 - u1`` lies in (0, 1] so the log is always finite. Both variates of a
pair are used, ``z0`` first; an odd request discards the trailing ``z1``.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

DEFAULT_DTYPE = np.float32
ORACLE_DTYPE = np.float64

# Additive logit for excluded keys in float32 dense-mask mode.
MASK_SENTINEL = -1e30

MAGIC = b"PKAT"


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


class ParameterError(ValueError):
    """An out-of-range distribution or algorithm parameter."""


def dtype_for(precision: str) -> np.dtype:
    if precision == "fp32":
        return np.dtype(np.float32)
    if precision == "fp64":
        return np.dtype(np.float64)
    raise ParameterError(f"unknown precision {precision!r} (expected fp32 or fp64)")


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``c[i, j] = sum_k a[i, k] * b[k, j]``; leading dims batch as in ``np.matmul``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ContractError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax_rows(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Softmax along ``axis`` with per-row max subtraction.

    Rows consisting entirely of ``-inf`` have no live entry and are rejected.
    """
    x = np.asarray(x)
    m = np.max(x, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ContractError("softmax row without a finite entry")
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


class Rng:
    """Single-owner Philox4x64-10 stream. Do not share across threads."""

    algorithm = "philox4x64-10"

    def __init__(self, seed: int):
        if not 0 <= int(seed) < 2**64:
            raise ParameterError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self._bitgen = np.random.Philox(key=self.seed)
        self._gen = np.random.Generator(self._bitgen)

    def uniform(self, n: int | tuple[int, ...], dtype=ORACLE_DTYPE) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(n, dtype=np.float64).astype(dtype, copy=False)

    def standard_normal(self, shape: int | tuple[int, ...]) -> np.ndarray:
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self._gen.random(2 * pairs, dtype=np.float64).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.empty((pairs, 2))
        z[:, 0] = r * np.cos(theta)
        z[:, 1] = r * np.sin(theta)
        return z.reshape(-1)[:n].reshape(shape)

    def normal(self, shape, scale: float = 1.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
        return (scale * self.standard_normal(shape)).astype(dtype)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, stream: int) -> "Rng":
        """Independent child stream keyed on ``(seed, stream)``."""
        mixed = (self.seed * 0x9E3779B97F4A7C15 + (stream + 1) * 0xBB67AE8584CAA73B) % 2**64
        return Rng(mixed)


def sample_normal(rng: Rng, mu: float, sigma: float, n: int) -> np.ndarray:
    """``n`` float64 draws from N(mu, sigma**2) via Box-Muller."""
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    return mu + sigma * rng.standard_normal(n)


def write_tensor(path: str | Path, tensor: np.ndarray) -> None:
    """Write ``PKAT | u32 rank | u32 dims... | f32 payload`` (all little-endian)."""
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    header = MAGIC + struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
    Path(path).write_bytes(header + arr.tobytes())


def read_tensor(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: not a PKAT tensor file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - offset != 4 * count:
        raise ContractError(f"{path}: payload holds {len(raw) - offset} bytes, expected {4 * count}")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)
