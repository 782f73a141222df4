"""Source-feature caching during inversion and the KV-mix / baseline-injection
controllers used during sampling.

The cache is written by exactly one inversion pass (write-once per site key),
then frozen; sampling-phase controllers only read it. Records are keyed by
the grid index of the evaluation time, so sampling step i injects features the
inversion pass computed at the equal t value t_i. Inversion evaluates at
t_N..t_1 while sampling evaluates at t_0..t_{N-1}; the default schedule
therefore injects at steps 1..N-1 (the first sampling step, at t=0, has no
matching source record). A cache recorded on a different grid is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from .errors import (CacheFrozenError, GridMismatchError, MissingCacheEntryError,
                     ShapeMismatchError)
from .flow import TimeGrid
from .mask import EditMask
from .model import AttentionController, AttentionSite, VisualOverride

SiteKey = tuple[int, int, str]  # (step_index, layer_index, block_kind)

ATTENTION_MODES = ("V", "QV", "QKV", "KV")


@dataclass
class _Record:
    k: Tensor
    v: Tensor
    q: Optional[Tensor] = None


class KVCache:
    """Attention features from the source pass, keyed by (step, layer, kind)."""

    def __init__(self, grid: TimeGrid):
        self.grid = grid
        self._store: dict[SiteKey, _Record] = {}
        self._frozen = False

    def __len__(self) -> int:
        return len(self._store)

    def __contains__(self, key: SiteKey) -> bool:
        return key in self._store

    def keys(self):
        return self._store.keys()

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> None:
        self._frozen = True

    def put(self, key: SiteKey, k: Tensor, v: Tensor, q: Optional[Tensor] = None) -> None:
        if self._frozen:
            raise CacheFrozenError(f"cache is frozen; cannot write key {key}")
        if key in self._store:
            raise CacheFrozenError(f"cache key {key} already written (write-once)")
        self._store[key] = _Record(k=k.detach().clone(), v=v.detach().clone(),
                                   q=None if q is None else q.detach().clone())

    def get(self, key: SiteKey) -> _Record:
        try:
            return self._store[key]
        except KeyError:
            raise MissingCacheEntryError(
                f"no cached source features for step {key[0]}, {key[2]} block {key[1]}") from None

    def layer_kinds(self) -> set[tuple[int, str]]:
        return {(layer, kind) for (_, layer, kind) in self._store}

    def steps(self) -> set[int]:
        return {step for (step, _, _) in self._store}

    def spill(self, path) -> None:
        """Persist every record to an npz container, one named array per
        (site key, tensor role); each entry carries its own shape/dtype header."""
        arrays = {"__times__": np.asarray(self.grid.times, dtype=np.float64)}
        for (step, layer, kind), rec in self._store.items():
            base = f"{step}.{layer}.{kind}"
            arrays[f"{base}.K"] = rec.k.cpu().numpy()
            arrays[f"{base}.V"] = rec.v.cpu().numpy()
            if rec.q is not None:
                arrays[f"{base}.Q"] = rec.q.cpu().numpy()
        np.savez(path, **arrays)

    @classmethod
    def load_spill(cls, path) -> "KVCache":
        """Rehydrate a spilled cache; the result comes back frozen."""
        data = np.load(path)
        grid = TimeGrid(tuple(float(t) for t in data["__times__"]))
        cache = cls(grid)
        grouped: dict[SiteKey, dict[str, Tensor]] = {}
        for name in data.files:
            if name == "__times__":
                continue
            step, layer, kind, role = name.rsplit(".", 3)[-4:]
            grouped.setdefault((int(step), int(layer), kind), {})[role] = torch.from_numpy(data[name])
        for key, parts in grouped.items():
            cache.put(key, parts["K"], parts["V"], parts.get("Q"))
        cache.freeze()
        return cache


@dataclass(frozen=True)
class InjectionSchedule:
    """Which sampling steps, block kinds, and attention features to inject.

    ``steps=None`` means every sampling step that has a matching source record
    (all but the first under the default equal-t pairing); the schedule is a
    tuning knob, see the sweep command.
    """

    steps: Optional[tuple[int, ...]] = None
    kinds: tuple[str, ...] = ("double", "single")
    mode: str = "KV"

    def __post_init__(self):
        if self.mode not in ATTENTION_MODES:
            raise ValueError(f"unknown attention mode {self.mode!r}; choose from {ATTENTION_MODES}")
        for kind in self.kinds:
            if kind not in ("double", "single"):
                raise ValueError(f"unknown block kind {kind!r}")
        if self.steps is not None:
            object.__setattr__(self, "steps", tuple(sorted(set(self.steps))))

    @property
    def needs_q(self) -> bool:
        return "Q" in self.mode

    def validate_steps(self, num_steps: int) -> None:
        if self.steps is not None:
            bad = [s for s in self.steps if not 0 <= s < num_steps]
            if bad:
                raise ValueError(f"schedule steps {bad} outside 0..{num_steps - 1}")


@dataclass(frozen=True)
class MixParams:
    """Mixing strength and edit region for KV-mix."""

    delta: float = 0.9
    mask: EditMask = None

    def __post_init__(self):
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must be in [0, 1], got {self.delta}")
        if self.mask is None:
            raise ValueError("MixParams requires an edit mask")


def masked_blend(target: Tensor, source: Tensor, mask: EditMask, delta: float) -> Tensor:
    """Region-aware convex blend of one attention feature.

    Inside the mask: delta * target + (1 - delta) * source; outside: source.
    The per-token mask broadcasts over head and channel dimensions.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must be in [0, 1], got {delta}")
    if target.shape != source.shape:
        raise ShapeMismatchError(f"target {tuple(target.shape)} != source {tuple(source.shape)}")
    if mask.values.numel() != target.shape[-2]:
        raise ShapeMismatchError(f"mask has {mask.values.numel()} tokens, "
                                 f"features have {target.shape[-2]}")
    m = mask.values.to(target.dtype).reshape(*([1] * (target.dim() - 2)), -1, 1)
    mixed = delta * target + (1.0 - delta) * source
    return m * mixed + (1.0 - m) * source


def mix_kv(k_target: Tensor, v_target: Tensor, k_source: Tensor, v_source: Tensor,
           mask: EditMask, delta: float) -> tuple[Tensor, Tensor]:
    """Masked K/V fusion: blended by delta inside the edit region, pure source
    outside. Operates on visual segments only; text features never pass
    through here."""
    if k_target.shape != v_target.shape or k_target.shape != k_source.shape \
            or k_target.shape != v_source.shape:
        raise ShapeMismatchError("all four K/V tensors must share one shape")
    return (masked_blend(k_target, k_source, mask, delta),
            masked_blend(v_target, v_source, mask, delta))


def baseline_injection(site: AttentionSite, q_target: Tensor, k_target: Tensor,
                       v_target: Tensor, cache: KVCache, mode: str
                       ) -> tuple[Tensor, Tensor, Tensor]:
    """Global (maskless) source-feature substitution.

    Mode V replaces only the value features with the cached source; KV replaces
    keys and values; QV and QKV substitute the recorded source queries
    analogously. Returns the full (Q, K, V) visual triple.
    """
    if mode not in ATTENTION_MODES:
        raise ValueError(f"unknown attention mode {mode!r}; choose from {ATTENTION_MODES}")
    rec = cache.get(site.key)
    if "Q" in mode and rec.q is None:
        raise MissingCacheEntryError(
            f"mode {mode} needs recorded source queries, but none were cached "
            f"for step {site.step_index}, {site.block_kind} block {site.layer_index}")
    q = rec.q if "Q" in mode else q_target
    k = rec.k if "K" in mode else k_target
    v = rec.v  # every supported mode injects V
    return q, k, v


class RecordingController(AttentionController):
    """Caches visual K/V (and optionally Q) at every canonical attention site;
    never substitutes anything, so the pass it observes is unchanged.

    ``capture`` is an optional predicate on the site; where it matches, the
    joint attention probabilities are stored in ``captured_probs`` keyed by
    site key (used for mask extraction at the first inversion step).
    """

    def __init__(self, cache: KVCache, record_q: bool = False,
                 capture: Optional[Callable[[AttentionSite], bool]] = None):
        self.cache = cache
        self.record_q = record_q
        self.capture = capture
        self.captured_probs: dict[SiteKey, Tensor] = {}

    def on_attention(self, site, q_text, k_text, v_text, q_vis, k_vis, v_vis, attn_probs):
        if not site.canonical:
            return None
        self.cache.put(site.key, k_vis, v_vis, q_vis if self.record_q else None)
        if self.capture is not None and self.capture(site):
            self.captured_probs[site.key] = attn_probs().detach().clone()
        return None


class AttentionProbe(AttentionController):
    """Capture-only controller: stores joint attention probabilities at sites
    matching a predicate, substitutes nothing, writes no cache."""

    def __init__(self, capture: Callable[[AttentionSite], bool]):
        self.capture = capture
        self.captured_probs: dict[SiteKey, Tensor] = {}

    def on_attention(self, site, q_text, k_text, v_text, q_vis, k_vis, v_vis, attn_probs):
        if site.canonical and self.capture(site):
            self.captured_probs[site.key] = attn_probs().detach().clone()
        return None


class KVMixController(AttentionController):
    """Applies the masked K/V fusion against the source cache at active sites.

    Acts only at canonical evaluations of sampling steps named by the
    schedule; everywhere else it passes through untouched. Text segments are
    never substituted. Modes other than KV extend the same masked blend to the
    named feature set (V, QV, QKV).
    """

    def __init__(self, cache: KVCache, schedule: InjectionSchedule,
                 params: MixParams, grid: TimeGrid):
        if tuple(cache.grid.times) != tuple(grid.times):
            raise GridMismatchError(
                f"cache recorded on grid of {cache.grid.num_steps} steps "
                f"{cache.grid.times[:3]}..., sampling uses {grid.num_steps} steps "
                f"{grid.times[:3]}...")
        schedule.validate_steps(grid.num_steps)
        self.active_steps = _resolve_steps(cache, schedule, grid.num_steps)
        self.cache = cache
        self.schedule = schedule
        self.params = params
        self.grid = grid

    def on_attention(self, site, q_text, k_text, v_text, q_vis, k_vis, v_vis, attn_probs):
        if not site.canonical or site.phase == "inversion":
            return None
        if site.block_kind not in self.schedule.kinds or site.step_index not in self.active_steps:
            return None
        rec = self.cache.get(site.key)
        mode, mask, delta = self.schedule.mode, self.params.mask, self.params.delta
        override = VisualOverride()
        if "K" in mode:
            override.k = masked_blend(k_vis, rec.k, mask, delta)
        override.v = masked_blend(v_vis, rec.v, mask, delta)
        if "Q" in mode:
            if rec.q is None:
                raise MissingCacheEntryError(
                    f"mode {mode} needs recorded source queries at "
                    f"step {site.step_index}, {site.block_kind} block {site.layer_index}")
            override.q = masked_blend(q_vis, rec.q, mask, delta)
        return override


class BaselineInjectionController(AttentionController):
    """Global source-feature injection (the maskless ablation baseline)."""

    def __init__(self, cache: KVCache, schedule: InjectionSchedule, grid: TimeGrid):
        if tuple(cache.grid.times) != tuple(grid.times):
            raise GridMismatchError("cache grid does not match sampling grid")
        schedule.validate_steps(grid.num_steps)
        self.active_steps = _resolve_steps(cache, schedule, grid.num_steps)
        self.cache = cache
        self.schedule = schedule

    def on_attention(self, site, q_text, k_text, v_text, q_vis, k_vis, v_vis, attn_probs):
        if not site.canonical or site.phase == "inversion":
            return None
        if site.block_kind not in self.schedule.kinds or site.step_index not in self.active_steps:
            return None
        q, k, v = baseline_injection(site, q_vis, k_vis, v_vis, self.cache, self.schedule.mode)
        return VisualOverride(
            q=q if "Q" in self.schedule.mode else None,
            k=k if "K" in self.schedule.mode else None,
            v=v)


def _resolve_steps(cache: KVCache, schedule: InjectionSchedule,
                   num_steps: int) -> frozenset[int]:
    """Sampling steps the schedule will inject at, verified against the cache.

    An explicit step list must be fully covered by records; ``steps=None``
    resolves to every sampling step with a complete record set.
    """
    layer_kinds = [(l, k) for (l, k) in cache.layer_kinds() if k in schedule.kinds]
    if not layer_kinds:
        raise MissingCacheEntryError("cache holds no records for the scheduled block kinds")
    if schedule.steps is None:
        steps = [s for s in sorted(cache.steps())
                 if 0 <= s < num_steps
                 and all((s, l, k) in cache for l, k in layer_kinds)]
        if not steps:
            raise MissingCacheEntryError("no sampling step has a complete set of cached records")
        return frozenset(steps)
    for step in schedule.steps:
        for layer, kind in layer_kinds:
            if (step, layer, kind) not in cache:
                raise MissingCacheEntryError(
                    f"cache incomplete for schedule: missing step {step}, {kind} block {layer}")
    return frozenset(schedule.steps)


def make_kvmix_controller(cache: KVCache, schedule: InjectionSchedule,
                          params: MixParams, grid: TimeGrid) -> KVMixController:
    """Build the region-aware fusion controller for a sampling pass."""
    return KVMixController(cache, schedule, params, grid)
