"""Closed-vocabulary prompt handling for the toy model.

The vocabulary is a fixed ~64 word list covering the caption template plus
spare attribute words, so prompt diffs between source and target captions are
well defined without a pretrained encoder.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

# Template words, palette colors, shapes, and positions come first; the rest
# are spare attribute words that keep the vocabulary closed at 64 entries.
DEFAULT_WORDS = (
    PAD_TOKEN, UNK_TOKEN,
    "a", "an", "the", "on", "in", "at", "is", "and", "of", "with",
    "red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta",
    "circle", "square", "triangle",
    "left", "right", "top", "bottom", "center",
    "one", "two", "three", "four", "five",
    "small", "large", "big", "tiny", "huge",
    "shape", "color", "background", "dot", "ring", "box", "bar", "cross",
    "star", "line", "spot", "patch", "side", "corner", "middle", "edge",
    "dark", "light", "bright", "pale", "solid", "empty", "near", "far",
    "up", "down",
)


class Vocabulary:
    """Fixed word list with pad/unk handling and whitespace tokenization."""

    def __init__(self, words=DEFAULT_WORDS):
        self.words = tuple(words)
        if self.words[0] != PAD_TOKEN or self.words[1] != UNK_TOKEN:
            raise ValueError("vocabulary must start with the pad and unk tokens")
        if len(set(self.words)) != len(self.words):
            raise ValueError("vocabulary contains duplicate words")
        self.index = {w: i for i, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def word_id(self, word: str) -> int:
        return self.index.get(word.lower(), self.unk_id)


DEFAULT_VOCAB = Vocabulary()


@dataclass(frozen=True)
class TokenIds:
    """Prompt ids padded/truncated to a fixed length, with a pad mask."""

    ids: Tensor        # (T,) long
    pad_mask: Tensor   # (T,) bool, True at real (non-pad) positions

    def __post_init__(self):
        if self.ids.shape != self.pad_mask.shape:
            raise ValueError("ids and pad_mask must have the same length")

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def __eq__(self, other) -> bool:
        return isinstance(other, TokenIds) and torch.equal(self.ids, other.ids)


def tokenize(prompt: str, vocab: Vocabulary = DEFAULT_VOCAB, max_tokens: int = 8) -> TokenIds:
    """Lowercase whitespace tokenization through the fixed vocabulary.

    Unknown words map to the unk id; the result is padded or truncated to
    ``max_tokens``. Empty prompts are rejected.
    """
    words = prompt.lower().split()
    if not words:
        raise ValueError("prompt is empty")
    ids = [vocab.word_id(w) for w in words][:max_tokens]
    n_real = len(ids)
    ids = ids + [vocab.pad_id] * (max_tokens - n_real)
    mask = [True] * n_real + [False] * (max_tokens - n_real)
    return TokenIds(ids=torch.tensor(ids, dtype=torch.long),
                    pad_mask=torch.tensor(mask, dtype=torch.bool))
