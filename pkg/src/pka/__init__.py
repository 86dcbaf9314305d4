"""Block-sparse multi-condition attention: position-aligned and keyword-scoped
attention, a dense oracle, condition K/V caching, logit-normal timestep
samplers, a toy flow-matching DiT and exact cost accounting."""

__version__ = "0.1.0"

from .layout import ModalityLayout, AttentionMaskSpec, build_mask  # noqa: E402,F401
from .dense import AttentionInputs, masked_attention_oracle, mma_full  # noqa: E402,F401
from .sparse import (  # noqa: E402,F401
    KeywordMask, PartialAttention, ksa, ksa_mask, merge_partials, paa, sparse_attention,
)
from .cache import ConditionCache  # noqa: E402,F401
from .cost import CostReport, measure_cost, predict_cost  # noqa: E402,F401
from .sampler import SamplerConfig, preset, sample_t  # noqa: E402,F401
