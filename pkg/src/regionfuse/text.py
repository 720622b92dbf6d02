"""Word-level tokenization, toy text embeddings, and region-annotated prompts.

Tokens live at whitespace-word granularity (no subword merging) so that the
word spans used by region prompts map one-to-one onto token positions. The
embedding is a deterministic stand-in for a learned text encoder: each token
id is hashed into a seeded unit-norm vector.
"""

import string
from dataclasses import dataclass, field
from hashlib import blake2b

import numpy as np

from .errors import EmptyPrompt, OverlappingSpans, SubPromptNotFound
from .seeding import derive_rng

TEXT_DIM = 32

# canonical ordering of region labels; derived labels used by the region-count
# ablation sort after the standard three
LABEL_ORDER = {"face": 0, "upper": 1, "lower": 2, "body": 3, "full": 4, None: 9}

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


@dataclass(frozen=True)
class TokenSequence:
    """One token per whitespace word; positions are 1-indexed 1..n."""

    tokens: tuple
    words: tuple

    def __post_init__(self):
        if len(self.tokens) != len(self.words):
            raise ValueError("token and word counts differ")
        if not self.tokens:
            raise EmptyPrompt("token sequence is empty")

    @property
    def n(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class RegionPrompt:
    label: str
    text: str
    span: tuple  # (begin, end), 1-indexed inclusive word positions


@dataclass(frozen=True)
class PromptSpec:
    """A full prompt plus the labeled region sub-prompts found inside it."""

    full_text: str
    regions: tuple = field(default_factory=tuple)
    character_index: int = 1

    def region(self, label: str) -> RegionPrompt:
        for r in self.regions:
            if r.label == label:
                return r
        raise KeyError(label)

    def labels(self) -> tuple:
        return tuple(r.label for r in self.regions)


def token_id(word: str) -> int:
    """Stable non-negative 64-bit id for a normalized word."""
    return int.from_bytes(blake2b(word.encode("utf-8"), digest_size=8).digest(), "little")


def tokenize(text: str) -> TokenSequence:
    """Lowercase, strip punctuation, split on whitespace; one token per word."""
    words = []
    for raw in text.split():
        word = raw.lower().translate(_PUNCT_TABLE)
        if word:
            words.append(word)
    if not words:
        raise EmptyPrompt(f"no words in prompt {text!r}")
    return TokenSequence(tokens=tuple(token_id(w) for w in words), words=tuple(words))


def encode_tokens(seq: TokenSequence, seed: int) -> np.ndarray:
    """Deterministic toy embedding matrix, one unit-norm row per token.

    Identical token ids map to identical rows; the whole matrix is a pure
    function of (token ids, seed).
    """
    rows = np.empty((seq.n, TEXT_DIM), dtype=np.float64)
    cache = {}
    for i, tok in enumerate(seq.tokens):
        if tok not in cache:
            v = derive_rng("textembed", seed, tok).standard_normal(TEXT_DIM)
            cache[tok] = v / np.linalg.norm(v)
        rows[i] = cache[tok]
    return rows


def _find_subsequence(haystack, needle):
    limit = len(haystack) - len(needle)
    for start in range(limit + 1):
        if list(haystack[start:start + len(needle)]) == list(needle):
            return start
    return None


def parse_region_prompts(full_text: str, annotations, character_index: int = 1) -> PromptSpec:
    """Locate each (label, sub_prompt) as a contiguous word span of full_text.

    First contiguous match wins when a sub-prompt occurs more than once.
    Spans of one character must not overlap and labels must be unique.
    """
    full = tokenize(full_text)
    regions = []
    claimed = {}
    seen_labels = set()
    for label, sub_prompt in annotations:
        if label in seen_labels:
            raise ValueError(f"duplicate region label {label!r} for character {character_index}")
        seen_labels.add(label)
        sub = tokenize(sub_prompt)
        start = _find_subsequence(full.words, sub.words)
        if start is None:
            raise SubPromptNotFound(f"{sub_prompt!r} is not a contiguous part of {full_text!r}")
        begin, end = start + 1, start + sub.n  # 1-indexed inclusive
        for i in range(begin, end + 1):
            if i in claimed:
                raise OverlappingSpans(
                    f"word {i} claimed by both {claimed[i]!r} and {label!r}")
            claimed[i] = label
        regions.append(RegionPrompt(label=label, text=sub_prompt, span=(begin, end)))
    return PromptSpec(full_text=full_text, regions=tuple(regions),
                      character_index=character_index)
