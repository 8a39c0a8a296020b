"""Token-id layout shared by the task generator, episode builder, and LM.

The vocabulary is partitioned into four contiguous regions:

    [0, n_units)              discrete units produced by the quantizer
    [n_units, n_units + 16)   reserved label tokens (verbalizer targets)
    n_units + 16              separation token
    n_units + 17              pad token

Keeping labels in a reserved region (instead of reusing unit ids) makes the
guessing-rate measurement unambiguous: a prediction either is a label token
or it is not.
"""

from __future__ import annotations

from dataclasses import dataclass

NUM_LABEL_TOKENS = 16


@dataclass(frozen=True)
class VocabLayout:
    """Partition of the LM vocabulary for a given unit-codebook size."""

    n_units: int
    n_labels: int = NUM_LABEL_TOKENS

    def __post_init__(self) -> None:
        if self.n_units < 1:
            raise ValueError("n_units must be >= 1")
        if self.n_labels < 1:
            raise ValueError("n_labels must be >= 1")

    @property
    def label_base(self) -> int:
        return self.n_units

    @property
    def sep(self) -> int:
        return self.n_units + self.n_labels

    @property
    def pad(self) -> int:
        return self.sep + 1

    @property
    def size(self) -> int:
        return self.pad + 1

    def label_tokens(self) -> range:
        return range(self.label_base, self.label_base + self.n_labels)

    def is_label(self, token: int) -> bool:
        return self.label_base <= token < self.sep

    def is_unit(self, token: int) -> bool:
        return 0 <= token < self.n_units
