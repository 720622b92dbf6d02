import numpy as np
import pytest
from hypothesis import given, strategies as st

from regionfuse.errors import EmptyPrompt, OverlappingSpans, SubPromptNotFound
from regionfuse.text import (TEXT_DIM, encode_tokens, parse_region_prompts,
                             tokenize)

FULL = "a boy standing in a library, wearing green jacket and blue pants"


class TestTokenize:
    def test_simple_split(self):
        seq = tokenize("a boy")
        assert seq.words == ("a", "boy")
        assert seq.n == 2

    def test_example_prompt_has_twelve_words(self):
        assert tokenize(FULL).n == 12

    def test_empty_prompt_rejected(self):
        with pytest.raises(EmptyPrompt):
            tokenize("")
        with pytest.raises(EmptyPrompt):
            tokenize("   ,,, ")

    def test_lowercase_and_punctuation(self):
        seq = tokenize("A Boy, standing!")
        assert seq.words == ("a", "boy", "standing")

    def test_equal_words_equal_tokens(self):
        seq = tokenize("a boy and a girl")
        assert seq.tokens[0] == seq.tokens[3]
        assert seq.tokens[1] != seq.tokens[4]

    def test_idempotent_on_own_output(self):
        seq = tokenize(FULL)
        again = tokenize(" ".join(seq.words))
        assert again.words == seq.words
        assert again.tokens == seq.tokens

    @given(st.lists(st.text(alphabet="abcxyz", min_size=1, max_size=6),
                    min_size=1, max_size=8))
    def test_idempotence_property(self, words):
        seq = tokenize(" ".join(words))
        assert tokenize(" ".join(seq.words)).words == seq.words


class TestEncodeTokens:
    def test_identical_tokens_identical_rows(self):
        emb = encode_tokens(tokenize("boy cat boy"), seed=3)
        assert np.array_equal(emb[0], emb[2])
        assert not np.array_equal(emb[0], emb[1])

    def test_rows_unit_norm(self):
        emb = encode_tokens(tokenize(FULL), seed=3)
        norms = np.linalg.norm(emb, axis=1)
        assert np.all(np.abs(norms - 1.0) < 1e-6)

    def test_pure_function(self):
        a = encode_tokens(tokenize(FULL), seed=9)
        b = encode_tokens(tokenize(FULL), seed=9)
        assert np.array_equal(a, b)

    def test_seeds_differ(self):
        a = encode_tokens(tokenize(FULL), seed=1)
        b = encode_tokens(tokenize(FULL), seed=2)
        assert np.any(a != b)

    def test_shape(self):
        emb = encode_tokens(tokenize("a boy"), seed=0)
        assert emb.shape == (2, TEXT_DIM)


class TestParseRegionPrompts:
    def test_face_span(self):
        spec = parse_region_prompts(FULL, [("face", "a boy")])
        assert spec.region("face").span == (1, 2)

    def test_upper_span(self):
        # independent oracle: exhaustive scan over the tokenized words
        words = tokenize(FULL).words
        target = tokenize("green jacket").words
        starts = [i for i in range(len(words) - len(target) + 1)
                  if words[i:i + len(target)] == target]
        assert starts and (starts[0] + 1, starts[0] + len(target)) == (8, 9)

        spec = parse_region_prompts(FULL, [("upper", "green jacket")])
        assert spec.region("upper").span == (8, 9)

    def test_missing_subprompt(self):
        with pytest.raises(SubPromptNotFound):
            parse_region_prompts(FULL, [("upper", "red hat")])

    def test_overlapping_spans(self):
        with pytest.raises(OverlappingSpans):
            parse_region_prompts(FULL, [("face", "a boy"), ("upper", "boy standing")])

    def test_duplicate_label(self):
        with pytest.raises(ValueError):
            parse_region_prompts(FULL, [("face", "a boy"), ("face", "green jacket")])

    def test_first_match_policy(self):
        # "a" occurs at words 1 and 5; the first match wins
        spec = parse_region_prompts(FULL, [("face", "a")])
        assert spec.region("face").span == (1, 1)

    def test_round_trip_spans(self):
        spec = parse_region_prompts(FULL, [("face", "a boy"),
                                           ("upper", "green jacket"),
                                           ("lower", "blue pants")])
        words = tokenize(FULL).words
        for region in spec.regions:
            begin, end = region.span
            assert words[begin - 1:end] == tokenize(region.text).words

    @given(st.integers(0, 7), st.integers(1, 4))
    def test_round_trip_property(self, start, length):
        words = tokenize(FULL).words
        start = min(start, len(words) - length)
        sub = " ".join(words[start:start + length])
        spec = parse_region_prompts(FULL, [("face", sub)])
        begin, end = spec.region("face").span
        assert words[begin - 1:end] == tuple(sub.split())
