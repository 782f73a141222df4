"""Two-phase editing pipeline: inversion with source-feature caching and mask
extraction, then shifted sampling with region-aware KV fusion under the target
prompt."""

from __future__ import annotations

import dataclasses
import json
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional

import torch
from torch import Tensor

from .control import (ATTENTION_MODES, AttentionProbe, BaselineInjectionController,
                      InjectionSchedule, KVCache, MixParams, RecordingController,
                      make_kvmix_controller)
from .errors import ConfigError, DegenerateMaskError, RFEditError
from .flow import get_solver, invert, make_schedule, sample
from .mask import EditMask, ThresholdConfig, extract_mask, select_edit_tokens
from .model import ToyMMDiT
from .shift import ShiftParams, latents_shift
from .text import tokenize

CONFIG_SCHEMA_VERSION = 1

_SOLVER_NAMES = ("euler", "midpoint")
_MASK_TIMINGS = ("inversion_first", "sampling_last")


@dataclass(frozen=True)
class EditConfig:
    """All edit hyperparameters, flat so it round-trips through JSON configs.

    Defaults are the reference operating point: 15 sampling steps, mixing
    strength 0.9, fusion ratio 0.25, KV fusion on every Double and Single
    block at every step.
    """

    schema_version: int = CONFIG_SCHEMA_VERSION
    num_steps: int = 15
    delta: float = 0.9
    beta: float = 0.25
    attn_mode: str = "KV"
    inject_steps: Optional[tuple[int, ...]] = None  # None = all sampling steps
    inject_kinds: tuple[str, ...] = ("double", "single")
    solver: str = "euler"
    noise_seed: int = 0
    model_seed: int = 0
    mask_k: float = 1.0
    mask_dilation: int = 1
    mask_head_agg: str = "mean"
    mask_token_agg: str = "mean"
    mask_timing: str = "inversion_first"
    epsilon: float = 1e-6
    moments_scope: str = "global"
    kvmix_on: bool = True
    latents_shift_on: bool = True
    baseline_mode: Optional[str] = None

    def __post_init__(self):
        if self.schema_version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {self.schema_version}")
        if self.num_steps < 1:
            raise ConfigError("num_steps must be >= 1")
        if not 0.0 <= self.delta <= 1.0 or not 0.0 <= self.beta <= 1.0:
            raise ConfigError("delta and beta must lie in [0, 1]")
        if self.attn_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention mode {self.attn_mode!r}")
        if self.solver not in _SOLVER_NAMES:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.mask_timing not in _MASK_TIMINGS:
            raise ConfigError(f"unknown mask timing {self.mask_timing!r}")
        if self.baseline_mode is not None:
            if self.baseline_mode not in ATTENTION_MODES:
                raise ConfigError(f"unknown baseline mode {self.baseline_mode!r}")
            if self.kvmix_on:
                raise ConfigError("baseline_mode and kvmix_on are mutually exclusive")
        if self.inject_steps is not None:
            object.__setattr__(self, "inject_steps", tuple(sorted(set(self.inject_steps))))

    # --- derived sub-configs -------------------------------------------------

    def schedule(self, mode: Optional[str] = None) -> InjectionSchedule:
        return InjectionSchedule(steps=self.inject_steps, kinds=tuple(self.inject_kinds),
                                 mode=mode or self.attn_mode)

    def threshold(self) -> ThresholdConfig:
        return ThresholdConfig(k=self.mask_k, dilation_steps=self.mask_dilation,
                               head_agg=self.mask_head_agg, token_agg=self.mask_token_agg)

    def shift_params(self) -> ShiftParams:
        return ShiftParams(beta=self.beta, epsilon=self.epsilon,
                           noise_seed=self.noise_seed, moments_scope=self.moments_scope)

    @property
    def active_mode(self) -> Optional[str]:
        """Attention mode actually injected this run, or None."""
        if self.baseline_mode is not None:
            return self.baseline_mode
        return self.attn_mode if self.kvmix_on else None

    # --- (de)serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["inject_steps"] = None if self.inject_steps is None else list(self.inject_steps)
        d["inject_kinds"] = list(self.inject_kinds)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "EditConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("inject_steps") is not None:
            d["inject_steps"] = tuple(int(s) for s in d["inject_steps"])
        if "inject_kinds" in d:
            d["inject_kinds"] = tuple(d["inject_kinds"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "EditConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(d)


@dataclass
class EditResult:
    edited: Tensor
    mask: EditMask
    z_inverted: Tensor
    z_shifted: Tensor
    config_json: str
    velocity_norms: dict[str, list[float]] = field(default_factory=dict)
    timing: dict[str, float] = field(default_factory=dict)
    reconstructed: Optional[Tensor] = None


@contextmanager
def _phase(name: str):
    try:
        yield
    except RFEditError as exc:
        raise type(exc)(f"{name} phase: {exc}") from exc


def _norm_hook(norms: Optional[list]):
    if norms is None:
        return None

    def hook(step_index, t_from, t_to, before, after):
        norms.append(float(((after - before) / (t_to - t_from)).norm()))
    return hook


def _record_q_needed(config: EditConfig) -> bool:
    mode = config.active_mode
    return mode is not None and "Q" in mode


def run_inversion_phase(model: ToyMMDiT, image: Tensor, source_prompt: str,
                        target_prompt: str, config: EditConfig,
                        mask_override: Optional[EditMask] = None,
                        velocity_norms: Optional[list] = None
                        ) -> tuple[Tensor, KVCache, EditMask]:
    """Invert the image under the source prompt, caching attention features
    and extracting the edit mask.

    The mask comes from the joint attention of the last Double block, by
    default at the first inversion step (the cleanest image the pass sees);
    ``mask_timing="sampling_last"`` instead probes the last step of an
    uncontrolled sampling pass from the inverted latent. An override mask
    skips extraction entirely.
    """
    mc = model.config
    grid = make_schedule(config.num_steps)
    solver = get_solver(config.solver)
    src = tokenize(source_prompt, model.vocab, mc.max_text_tokens)
    tgt = tokenize(target_prompt, model.vocab, mc.max_text_tokens)

    if mask_override is None:
        edit_tokens = select_edit_tokens(src, tgt, vocab=model.vocab)
    last_double = mc.num_double_blocks - 1
    # the first inversion step evaluates at t=1 (grid index N), the cleanest image
    first_inversion_step = grid.num_steps

    def capture_first_step(site):
        return (site.phase == "inversion" and site.step_index == first_inversion_step
                and site.block_kind == "double" and site.layer_index == last_double)

    recorder = RecordingController(
        cache=KVCache(grid), record_q=_record_q_needed(config),
        capture=capture_first_step if mask_override is None and
        config.mask_timing == "inversion_first" else None)

    z_inv = invert(model, image, grid, src, solver=solver, controller=recorder,
                   step_hook=_norm_hook(velocity_norms))
    recorder.cache.freeze()

    if mask_override is not None:
        mask = mask_override
    else:
        if config.mask_timing == "inversion_first":
            attn = recorder.captured_probs[(first_inversion_step, last_double, "double")]
        else:
            probe = AttentionProbe(lambda site: (
                site.phase == "sampling" and site.step_index == grid.num_steps - 1
                and site.block_kind == "double" and site.layer_index == last_double))
            sample(model, z_inv, grid, src, solver=solver, controller=probe)
            attn = probe.captured_probs[(grid.num_steps - 1, last_double, "double")]
        try:
            mask = extract_mask(attn, edit_tokens, mc.max_text_tokens,
                                (mc.grid_size, mc.grid_size), config.threshold())
        except DegenerateMaskError as exc:
            raise DegenerateMaskError(
                f"{exc}; supply an override mask (mask_override) to proceed") from exc
    return z_inv, recorder.cache, mask


def run_sampling_phase(model: ToyMMDiT, z_inverted: Tensor, cache: KVCache,
                       mask: EditMask, target_prompt: str, config: EditConfig,
                       velocity_norms: Optional[list] = None,
                       return_start: bool = False):
    """Shift the inverted latent, then sample under the target prompt with the
    configured injection controller. Final pixels are clamped to [-1, 1]."""
    mc = model.config
    grid = make_schedule(config.num_steps)
    solver = get_solver(config.solver)
    tgt = tokenize(target_prompt, model.vocab, mc.max_text_tokens)

    if config.latents_shift_on:
        z_start = latents_shift(z_inverted, mask, config.shift_params())
    else:
        z_start = z_inverted.clone()

    if config.baseline_mode is not None:
        controller = BaselineInjectionController(
            cache, config.schedule(mode=config.baseline_mode), grid)
    elif config.kvmix_on:
        controller = make_kvmix_controller(
            cache, config.schedule(), MixParams(delta=config.delta, mask=mask), grid)
    else:
        controller = None

    out = sample(model, z_start, grid, tgt, solver=solver, controller=controller,
                 step_hook=_norm_hook(velocity_norms))
    image = torch.clamp(out, -1.0, 1.0)
    return (image, z_start) if return_start else image


def edit(model: ToyMMDiT, image: Tensor, source_prompt: str, target_prompt: str,
         config: EditConfig = EditConfig(), mask_override: Optional[EditMask] = None,
         with_reconstruction: bool = False) -> EditResult:
    """Full edit: inversion (cache + mask), Latents-Shift, KV-mix sampling.

    Deterministic for fixed seeds; the result echoes the exact configuration
    it ran under.
    """
    config_json = config.to_json()
    inv_norms: list[float] = []
    samp_norms: list[float] = []
    model.eval()
    with torch.no_grad():
        t0 = time.perf_counter()
        with _phase("inversion"):
            z_inv, cache, mask = run_inversion_phase(
                model, image, source_prompt, target_prompt, config,
                mask_override=mask_override, velocity_norms=inv_norms)
        t1 = time.perf_counter()
        with _phase("sampling"):
            edited, z_shifted = run_sampling_phase(
                model, z_inv, cache, mask, target_prompt, config,
                velocity_norms=samp_norms, return_start=True)
        t2 = time.perf_counter()
        recon = None
        if with_reconstruction:
            recon = reconstruct(model, image, source_prompt, config)
    return EditResult(
        edited=edited, mask=mask, z_inverted=z_inv, z_shifted=z_shifted,
        config_json=config_json,
        velocity_norms={"inversion": inv_norms, "sampling": samp_norms},
        timing={"inversion_s": t1 - t0, "sampling_s": t2 - t1},
        reconstructed=recon)


def reconstruct(model: ToyMMDiT, image: Tensor, prompt: str,
                config: EditConfig = EditConfig()) -> Tensor:
    """Invert then re-sample with the same prompt under full source-KV
    injection (mode KV with an all-zero mask), as an inversion fidelity probe."""
    mc = model.config
    derived = dataclasses.replace(config, kvmix_on=True, baseline_mode=None,
                                  attn_mode="KV", latents_shift_on=False)
    zero_mask = EditMask.zeros((mc.grid_size, mc.grid_size))
    model.eval()
    with torch.no_grad():
        with _phase("inversion"):
            z_inv, cache, mask = run_inversion_phase(
                model, image, prompt, prompt, derived, mask_override=zero_mask)
        with _phase("sampling"):
            return run_sampling_phase(model, z_inv, cache, mask, prompt, derived)
