"""Locality and sparsity statistics of attention maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layout import chebyshev_distance


class ValidationError(ValueError):
    pass


@dataclass
class BandMassProfile:
    radii: list[int]
    mass: list[float]
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"radii": self.radii, "mass": self.mass, "provenance": self.provenance}

    def uniform_baseline(self, grid: tuple[int, int]) -> list[float]:
        """Band mass a uniform attention map would show at each radius."""
        d = chebyshev_distance(grid)
        return [float((d <= r).mean()) for r in self.radii]


def band_mass(attn: np.ndarray, grid: tuple[int, int], radii, provenance: dict | None = None,
              tol: float = 1e-4) -> BandMassProfile:
    """Average fraction of each row's probability within Chebyshev radius ``r`` of the query.

    ``attn`` is ``(N, N)`` or ``(heads, N, N)``; heads are averaged.
    """
    attn = np.asarray(attn, dtype=np.float64)
    if attn.ndim == 2:
        attn = attn[None]
    H, W = grid
    n = H * W
    if attn.shape[-2:] != (n, n):
        raise ValidationError(f"attention map {attn.shape[-2:]} does not match grid {grid}")
    if np.any(attn < -tol) or np.max(np.abs(attn.sum(axis=-1) - 1)) > tol:
        raise ValidationError("attention rows must be non-negative and sum to 1")
    dist = chebyshev_distance(grid)
    radii = [int(r) for r in radii]
    mass = [float(np.where(dist <= r, attn, 0).sum(axis=-1).mean()) for r in radii]
    return BandMassProfile(radii, mass, dict(provenance or {}))


def keyword_sparsity(scores: np.ndarray, epsilon: float) -> float:
    """Fraction of image tokens whose keyword score reaches ``epsilon``."""
    scores = np.asarray(scores)
    return float(np.mean(scores >= epsilon))
