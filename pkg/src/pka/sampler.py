"""Logit-normal timestep samplers for flow-matching training.

Convention: ``t = 1`` is pure noise, ``t = 0`` is data. A positive ``mu``
therefore biases training toward the high-noise end of the trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import expit, logit, ndtr

from .tensor import ParameterError, Rng, sample_normal


@dataclass(frozen=True)
class SamplerConfig:
    mu: float
    sigma: float
    name: str = "custom"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be positive, got {self.sigma}")


PRESETS = {
    "csas": SamplerConfig(0.5, 1.5, "csas"),
    "standard": SamplerConfig(0.0, 1.0, "standard"),
    "reversed": SamplerConfig(-0.5, 1.5, "reversed"),
}


def preset(name: str) -> SamplerConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ParameterError(f"unknown sampler preset {name!r}; choose from {sorted(PRESETS)}") from None


def sample_t(rng: Rng, cfg: SamplerConfig, n: int) -> np.ndarray:
    """``t = sigmoid(z)``, ``z ~ N(mu, sigma^2)``; float64 values in (0, 1)."""
    return expit(sample_normal(rng, cfg.mu, cfg.sigma, n))


def cdf_t(cfg: SamplerConfig, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any((t <= 0) | (t >= 1)):
        raise ParameterError("cdf_t is defined on the open interval (0, 1)")
    out = ndtr((logit(t) - cfg.mu) / cfg.sigma)
    return float(out) if out.ndim == 0 else out


def quantile_t(cfg: SamplerConfig, p):
    return expit(cfg.mu + cfg.sigma * stats.norm.ppf(p))


def ks_statistic(samples: np.ndarray, cfg: SamplerConfig) -> float:
    return float(stats.kstest(samples, lambda x: cdf_t(cfg, np.clip(x, 1e-300, 1 - 1e-16))).statistic)


def summarize(samples: np.ndarray, cfg: SamplerConfig) -> dict:
    return {
        "preset": cfg.name,
        "mu": cfg.mu,
        "sigma": cfg.sigma,
        "n": int(samples.size),
        "median": float(np.median(samples)),
        "p_gt_half": float(np.mean(samples > 0.5)),
        "ks": ks_statistic(samples, cfg),
        "expected_median": float(expit(cfg.mu)),
        "expected_p_gt_half": float(ndtr(cfg.mu / cfg.sigma)),
    }


def dominance_violations(a: SamplerConfig, b: SamplerConfig, step: float = 0.01) -> np.ndarray:
    """Grid points where ``cdf_t(a, t) <= cdf_t(b, t)`` fails."""
    grid = np.round(np.arange(step, 1.0, step), 10)
    grid = grid[(grid > 0) & (grid < 1)]
    return grid[cdf_t(a, grid) > cdf_t(b, grid)]
