"""Write-once cache of condition-branch keys, values and layer outputs.

Condition tokens only attend to themselves and carry no timestep input, so
their per-layer K/V are identical at every denoising step. The cache is
filled once (step 0) and is read-only afterwards.
"""

from __future__ import annotations

import numpy as np


class CacheStateError(RuntimeError):
    pass


class CacheMissError(KeyError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


class ConditionCache:
    def __init__(self):
        self._kv: dict[tuple[int, str], tuple[np.ndarray, np.ndarray]] = {}
        self._out: dict[tuple[int, str], np.ndarray] = {}
        self.valid = False
        self.created_step: int | None = None

    @classmethod
    def build(cls, model, conditions, layout, step_index: int = 0) -> "ConditionCache":
        cache = cls()
        cache.populate(model, conditions, layout, step_index)
        return cache

    def populate(self, model, conditions, layout, step_index: int = 0) -> "ConditionCache":
        """Run ``model.condition_branch`` once and store every layer's K/V and output.

        The branch must return ``{cond_id: [(k, v, out) per layer]}``.
        """
        if self.valid:
            raise CacheStateError("condition cache is already populated")
        branch = model.condition_branch(conditions)
        expected = {s.name for s in layout.conditions()}
        if set(branch) != expected:
            raise CacheStateError(f"condition branch produced {sorted(branch)}, layout expects {sorted(expected)}")
        for cond_id, per_layer in branch.items():
            for layer, (k, v, out) in enumerate(per_layer):
                self._kv[(layer, cond_id)] = (_frozen(k), _frozen(v))
                self._out[(layer, cond_id)] = _frozen(out)
        self.valid = True
        self.created_step = step_index
        return self

    def lookup(self, layer: int, cond_id: str) -> tuple[np.ndarray, np.ndarray]:
        if not self.valid:
            raise CacheStateError("condition cache has not been populated")
        try:
            return self._kv[(layer, cond_id)]
        except KeyError:
            raise CacheMissError(f"no cached K/V for layer {layer}, condition {cond_id!r}") from None

    def output(self, layer: int, cond_id: str) -> np.ndarray:
        try:
            return self._out[(layer, cond_id)]
        except KeyError:
            raise CacheMissError(f"no cached output for layer {layer}, condition {cond_id!r}") from None

    def keys(self):
        return sorted(self._kv)

    @property
    def nbytes_kv(self) -> int:
        return sum(k.nbytes + v.nbytes for k, v in self._kv.values())

    @property
    def nbytes(self) -> int:
        return self.nbytes_kv + sum(o.nbytes for o in self._out.values())
