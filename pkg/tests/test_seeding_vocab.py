"""Tests for RNG derivation and the vocabulary layout."""

import numpy as np
import pytest

from uniticl.seeding import derive_rng, key_words
from uniticl.vocab import VocabLayout


class TestSeeding:
    def test_same_keys_same_stream(self):
        a = derive_rng("episode", 3, 7).integers(0, 1 << 30, size=8)
        b = derive_rng("episode", 3, 7).integers(0, 1 << 30, size=8)
        np.testing.assert_array_equal(a, b)

    def test_different_keys_differ(self):
        a = derive_rng("episode", 3, 7).integers(0, 1 << 30, size=8)
        b = derive_rng("episode", 3, 8).integers(0, 1 << 30, size=8)
        c = derive_rng("warmup", 3, 7).integers(0, 1 << 30, size=8)
        assert not np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_negative_ints_allowed(self):
        derive_rng(-5, "x")  # masked, not rejected

    def test_bad_type_rejected(self):
        with pytest.raises(TypeError):
            key_words(3.5)

    def test_no_keys_rejected(self):
        with pytest.raises(ValueError):
            derive_rng()


class TestVocabLayout:
    def test_regions_are_contiguous_partition(self):
        lay = VocabLayout(100)
        assert lay.label_base == 100
        assert list(lay.label_tokens()) == list(range(100, 116))
        assert lay.sep == 116
        assert lay.pad == 117
        assert lay.size == 118

    def test_predicates(self):
        lay = VocabLayout(32)
        assert lay.is_unit(0) and lay.is_unit(31) and not lay.is_unit(32)
        assert lay.is_label(32) and lay.is_label(47)
        assert not lay.is_label(48) and not lay.is_label(31)

    def test_sep_convention_matches_lm_config(self):
        from uniticl.lm import LmConfig

        lay = VocabLayout(32)
        cfg = LmConfig(vocab_size=lay.size)
        assert cfg.sep_token == lay.sep

    def test_invalid_sizes(self):
        with pytest.raises(ValueError):
            VocabLayout(0)
