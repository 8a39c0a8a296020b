"""Deterministic RNG stream derivation.

Every stochastic operation in this package draws from a Generator obtained
through `derive_rng`, keyed by integers and strings that identify the draw
(base seed, purpose tag, episode index, ...). Streams derived from distinct
key tuples are statistically independent, and the same keys always produce
the same stream, so sampling is reproducible and safe to fan out across
workers by index.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def key_words(*parts: int | str) -> list[int]:
    """Map a tuple of ints/strings to a list of non-negative entropy words."""
    words: list[int] = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            words.append(int(part) & _MASK64)
        elif isinstance(part, str):
            digest = hashlib.sha256(part.encode("utf-8")).digest()
            words.extend(int.from_bytes(digest[i : i + 8], "little") for i in (0, 8))
        else:
            raise TypeError(f"rng key parts must be int or str, got {type(part)!r}")
    return words


def derive_rng(*parts: int | str) -> np.random.Generator:
    """Return a fresh Generator keyed by `parts`; stable across runs."""
    if not parts:
        raise ValueError("derive_rng requires at least one key part")
    return np.random.default_rng(np.random.SeedSequence(key_words(*parts)))
