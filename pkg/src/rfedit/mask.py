"""Edit-region mask: derived from the joint-attention map of the last Double
block at the first inversion step, binarized, and dilated one step."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import DegenerateMaskError, NoEditTokensError, ShapeMismatchError
from .text import TokenIds, Vocabulary, DEFAULT_VOCAB


@dataclass(frozen=True)
class EditMask:
    """Binary per-visual-token mask with patch-grid and pixel-grid views."""

    values: Tensor               # (tokens,) bool, row-major over the patch grid
    grid_shape: tuple[int, int]  # (grid_h, grid_w)

    def __post_init__(self):
        gh, gw = self.grid_shape
        if self.values.dtype != torch.bool:
            object.__setattr__(self, "values", self.values.to(torch.bool))
        if self.values.dim() != 1 or self.values.numel() != gh * gw:
            raise ShapeMismatchError(f"mask of {self.values.numel()} tokens does not fill "
                                     f"a {gh}x{gw} patch grid")

    @classmethod
    def from_grid(cls, grid: Tensor) -> "EditMask":
        return cls(values=grid.reshape(-1).to(torch.bool), grid_shape=tuple(grid.shape))

    @classmethod
    def zeros(cls, grid_shape: tuple[int, int]) -> "EditMask":
        gh, gw = grid_shape
        return cls(values=torch.zeros(gh * gw, dtype=torch.bool), grid_shape=grid_shape)

    @classmethod
    def ones(cls, grid_shape: tuple[int, int]) -> "EditMask":
        gh, gw = grid_shape
        return cls(values=torch.ones(gh * gw, dtype=torch.bool), grid_shape=grid_shape)

    def as_grid(self) -> Tensor:
        return self.values.reshape(self.grid_shape)

    def as_pixels(self, patch_size: int) -> Tensor:
        """Nearest-neighbor upsample to pixel resolution."""
        g = self.as_grid()
        return g.repeat_interleave(patch_size, 0).repeat_interleave(patch_size, 1)

    def count(self) -> int:
        return int(self.values.sum())

    def __eq__(self, other) -> bool:
        return (isinstance(other, EditMask) and self.grid_shape == other.grid_shape
                and torch.equal(self.values, other.values))


@dataclass(frozen=True)
class ThresholdConfig:
    """Binarization rule for attention relevance; mean + k * std, then dilation."""

    rule: str = "mean_plus_k_std"
    k: float = 1.0
    dilation_steps: int = 1
    head_agg: str = "mean"
    token_agg: str = "mean"

    def __post_init__(self):
        if self.rule != "mean_plus_k_std":
            raise ValueError(f"unknown threshold rule {self.rule!r}")
        if not np.isfinite(self.k):
            raise ValueError("k must be finite")
        if self.dilation_steps < 0:
            raise ValueError("dilation_steps must be >= 0")
        for agg in (self.head_agg, self.token_agg):
            if agg not in ("mean", "max"):
                raise ValueError(f"unknown aggregation {agg!r}")


def select_edit_tokens(source: TokenIds, target: TokenIds,
                       override: Optional[Iterable[str]] = None,
                       vocab: Vocabulary = DEFAULT_VOCAB) -> list[int]:
    """Text positions the edit targets.

    Positional diff of source vs target ids under pad alignment (changed,
    inserted, or deleted positions). Pad and unk positions of the source are
    excluded: the indices address rows of the source-pass attention map. An
    override word list replaces the diff entirely.
    """
    if override is not None:
        wanted = {vocab.word_id(w) for w in override}
        wanted -= {vocab.pad_id}
        indices = [i for i, tid in enumerate(source.ids.tolist()) if tid in wanted]
        if not indices:
            raise NoEditTokensError(f"override words {sorted(override)!r} not found in source prompt")
        return indices
    if len(source) != len(target):
        raise ShapeMismatchError("source and target prompts must be tokenized to the same length")
    src = source.ids.tolist()
    tgt = target.ids.tolist()
    skip = {vocab.pad_id, vocab.unk_id}
    indices = [i for i, (a, b) in enumerate(zip(src, tgt)) if a != b and a not in skip]
    if not indices:
        raise NoEditTokensError("no edit tokens found: prompts are identical "
                                "(or differ only at pad/unk positions) and no override was given")
    return indices


def extract_mask(attn: Tensor, edit_token_indices: Sequence[int], num_text_tokens: int,
                 grid_shape: tuple[int, int], cfg: ThresholdConfig = ThresholdConfig()
                 ) -> EditMask:
    """Binary edit mask from a joint attention map.

    ``attn`` is (heads, T, T) with text rows/columns first. Rows at the edit
    token indices are restricted to visual columns, aggregated over heads and
    edit tokens into a per-visual-token relevance vector, thresholded at
    mean + k * std, reshaped to the patch grid, and dilated.
    """
    gh, gw = grid_shape
    if attn.dim() != 3 or attn.shape[-1] != attn.shape[-2]:
        raise ShapeMismatchError(f"expected (heads, T, T) attention, got {tuple(attn.shape)}")
    if attn.shape[-1] != num_text_tokens + gh * gw:
        raise ShapeMismatchError(f"attention over {attn.shape[-1]} tokens does not match "
                                 f"{num_text_tokens} text + {gh}x{gw} visual tokens")
    indices = list(edit_token_indices)
    if not indices:
        raise NoEditTokensError("edit token set is empty")
    if any(not 0 <= i < num_text_tokens for i in indices):
        raise ValueError(f"edit token indices {indices} outside the text segment")

    rows = attn[:, indices, num_text_tokens:]  # (heads, n_edit, visual)
    agg = {"mean": lambda x, d: x.mean(dim=d), "max": lambda x, d: x.max(dim=d).values}
    relevance = agg[cfg.token_agg](agg[cfg.head_agg](rows, 0), 0)
    if torch.count_nonzero(relevance) == 0:
        raise DegenerateMaskError("all-zero relevance vector")

    threshold = relevance.mean() + cfg.k * relevance.std(correction=0)
    selected = relevance > threshold
    if not bool(selected.any()):
        raise DegenerateMaskError("degenerate mask: no visual token exceeds mean + k*std "
                                  "(uniform relevance?)")
    mask = EditMask(values=selected, grid_shape=grid_shape)
    return dilate(mask, cfg.dilation_steps)


def dilate(mask: EditMask, steps: int) -> EditMask:
    """8-neighborhood dilation; steps=0 is the identity."""
    if steps < 0:
        raise ValueError("dilation steps must be >= 0")
    grid = mask.as_grid().to(torch.float32).unsqueeze(0).unsqueeze(0)
    for _ in range(steps):
        grid = torch.nn.functional.max_pool2d(grid, kernel_size=3, stride=1, padding=1)
    return EditMask(values=grid.reshape(-1) > 0.5, grid_shape=mask.grid_shape)


def save_mask_png(mask: EditMask, path, patch_size: Optional[int] = None) -> None:
    """Export as a 0/255 grayscale image, at patch resolution or, with a patch
    size, at pixel resolution."""
    grid = mask.as_pixels(patch_size) if patch_size else mask.as_grid()
    arr = (grid.numpy().astype(np.uint8)) * 255
    Image.fromarray(arr, mode="L").save(path)


def load_mask_png(path, grid_shape: tuple[int, int]) -> EditMask:
    """Import an externally provided mask.

    Accepts a grayscale image at patch resolution or at any integer pixel
    multiple of it; pixels brighter than mid-gray count as edited, and pixel
    masks are reduced per patch by majority.
    """
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32) / 255.0
    gh, gw = grid_shape
    h, w = arr.shape
    if (h, w) == (gh, gw):
        grid = arr > 0.5
    elif h % gh == 0 and w % gw == 0 and h // gh == w // gw:
        p = h // gh
        grid = arr.reshape(gh, p, gw, p).mean(axis=(1, 3)) > 0.5
    else:
        raise ShapeMismatchError(f"mask image {h}x{w} does not map onto a {gh}x{gw} patch grid")
    return EditMask(values=torch.from_numpy(grid.reshape(-1)), grid_shape=grid_shape)
