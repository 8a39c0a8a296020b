"""Episode construction: verbalizers, length fitting, layout assembly.

An episode interleaves n demonstrations and one target utterance as

    [x1, <s>, y1, <s>, x2, <s>, y2, <s>, ..., xn, <s>, yn, <s>, xt, <s>]

where each xi is an utterance fitted to a common length L, yi is the
demonstration's label token, and <s> is the separation token. The model
reads its prediction from the logits at the final separator.

Warmup episodes duplicate the target from one of the demonstrations; ICL
episodes draw a fresh target whose utterance matches no demonstration
bitwise while its label token does appear among the demonstration labels.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import derive_rng
from .tasks import Codebook, TaskSpec, sample_utterance
from .vocab import VocabLayout

GROUP_DEMO_UTT = "demo_utt"
GROUP_DEMO_LABEL = "demo_label"
GROUP_SEP = "separator"
GROUP_TARGET = "target"

WARMUP_MODE = "warmup"
ICL_MODE = "icl"

MAX_COLLISION_ATTEMPTS = 100


class InvariantViolation(ValueError):
    """An episode failed one of its mode invariants."""


class CollisionError(RuntimeError):
    """Could not draw an ICL target distinct from every demonstration."""


@dataclass(frozen=True)
class Verbalizer:
    """Injective random map from class index to a reserved label token."""

    task_id: str
    mapping: dict[int, int]
    seed: int

    def label_for(self, class_idx: int) -> int:
        return self.mapping[class_idx]

    def label_tokens(self) -> list[int]:
        return [self.mapping[c] for c in sorted(self.mapping)]


@dataclass
class Demonstration:
    utterance: np.ndarray
    label_token: int


@dataclass
class Episode:
    demos: list[Demonstration]
    target_utterance: np.ndarray
    target_label_token: int
    mode: str
    task_id: str
    position_groups: list[str]
    length: int | None  # common utterance length, None for natural-length episodes

    @property
    def n_demos(self) -> int:
        return len(self.demos)

    def demo_label_tokens(self) -> list[int]:
        return [d.label_token for d in self.demos]


@dataclass
class Dataset:
    episodes: list[Episode]
    per_task_counts: dict[str, int] = field(default_factory=dict)


def build_verbalizer(task: TaskSpec, seed: int, layout: VocabLayout) -> Verbalizer:
    """Draw an injective class -> label-token map; deterministic under
    (task_id, seed) and freshly random across seeds."""
    if task.num_classes > layout.n_labels:
        raise ValueError(
            f"label-token region too small: {task.num_classes} classes, {layout.n_labels} label tokens"
        )
    rng = derive_rng("verbalizer", task.task_id, seed)
    picks = rng.choice(layout.n_labels, size=task.num_classes, replace=False)
    mapping = {c: layout.label_base + int(picks[c]) for c in range(task.num_classes)}
    return Verbalizer(task_id=task.task_id, mapping=mapping, seed=seed)


def fit_length(seq: np.ndarray, L: int, pad_token: int) -> np.ndarray:
    """Truncate (keeping the prefix) or right-pad to exactly L tokens."""
    if L < 1:
        raise ValueError("L must be >= 1")
    seq = np.asarray(seq, dtype=np.int64)
    if seq.ndim != 1:
        raise ValueError("sequence must be 1-D")
    if seq.shape[0] >= L:
        return seq[:L].copy()
    return np.concatenate([seq, np.full(L - seq.shape[0], pad_token, dtype=np.int64)])


def _position_groups(demo_lengths: list[int], target_length: int) -> list[str]:
    groups: list[str] = []
    for n in demo_lengths:
        groups += [GROUP_DEMO_UTT] * n + [GROUP_SEP, GROUP_DEMO_LABEL, GROUP_SEP]
    groups += [GROUP_TARGET] * target_length + [GROUP_SEP]
    return groups


def assemble(episode: Episode, sep_token: int) -> tuple[np.ndarray, list[str]]:
    """Serialize an episode to its token layout; returns (tokens, groups).

    For fixed-length episodes the total length is n*(L+3) + L + 1.
    """
    if episode.n_demos < 1:
        raise ValueError("episode needs at least one demonstration")
    if episode.length is not None:
        lengths = [len(d.utterance) for d in episode.demos] + [len(episode.target_utterance)]
        if any(l != episode.length for l in lengths):
            raise ValueError(f"utterance length mismatch: {lengths} vs L={episode.length}")
    parts: list[np.ndarray] = []
    for d in episode.demos:
        parts += [np.asarray(d.utterance, dtype=np.int64), np.array([sep_token, d.label_token, sep_token], dtype=np.int64)]
    parts += [np.asarray(episode.target_utterance, dtype=np.int64), np.array([sep_token], dtype=np.int64)]
    tokens = np.concatenate(parts)
    groups = _position_groups([len(d.utterance) for d in episode.demos], len(episode.target_utterance))
    return tokens, groups


def _draw_utterance(
    task: TaskSpec,
    class_idx: int,
    L: int | None,
    codebook: Codebook,
    rng: np.random.Generator,
    pad_token: int,
    utt_len_range: tuple[int, int] | None,
) -> np.ndarray:
    lo, hi = utt_len_range if utt_len_range is not None else _default_len_range(task, L)
    raw_len = int(rng.integers(lo, hi + 1))
    utt = sample_utterance(task, class_idx, raw_len, codebook, rng)
    return fit_length(utt, L, pad_token) if L is not None else utt


def _default_len_range(task: TaskSpec, L: int | None) -> tuple[int, int]:
    m = task.difficulty.motif_len
    if L is None:
        raise ValueError("natural-length sampling requires an explicit utt_len_range")
    return max(m, round(0.7 * L)), max(m, round(1.3 * L))


def sample_warmup_episode(
    task: TaskSpec,
    verbalizer: Verbalizer,
    n: int,
    L: int | None,
    codebook: Codebook,
    rng: np.random.Generator,
    *,
    pad_token: int,
    utt_len_range: tuple[int, int] | None = None,
) -> Episode:
    """n demonstrations from uniformly random classes; the target is a
    bitwise duplicate of one demonstration."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    classes = rng.integers(0, task.num_classes, size=n)
    demos = [
        Demonstration(
            utterance=_draw_utterance(task, int(c), L, codebook, rng, pad_token, utt_len_range),
            label_token=verbalizer.label_for(int(c)),
        )
        for c in classes
    ]
    pick = int(rng.integers(0, n))
    episode = Episode(
        demos=demos,
        target_utterance=demos[pick].utterance.copy(),
        target_label_token=demos[pick].label_token,
        mode=WARMUP_MODE,
        task_id=task.task_id,
        position_groups=[],
        length=L,
    )
    episode.position_groups = _position_groups([len(d.utterance) for d in demos], len(episode.target_utterance))
    return episode


def sample_icl_episode(
    task: TaskSpec,
    verbalizer: Verbalizer,
    n: int,
    L: int | None,
    codebook: Codebook,
    rng: np.random.Generator,
    *,
    pad_token: int,
    utt_len_range: tuple[int, int] | None = None,
    max_attempts: int = MAX_COLLISION_ATTEMPTS,
) -> Episode:
    """Fresh target from a class present among the demonstrations; the
    target utterance is resampled on bitwise collision with any demo."""
    if n < 1:
        raise ValueError("need at least one demonstration")
    classes = rng.integers(0, task.num_classes, size=n)
    demos = [
        Demonstration(
            utterance=_draw_utterance(task, int(c), L, codebook, rng, pad_token, utt_len_range),
            label_token=verbalizer.label_for(int(c)),
        )
        for c in classes
    ]
    present = np.unique(classes)
    target_class = int(present[int(rng.integers(0, len(present)))])
    for _ in range(max_attempts):
        target = _draw_utterance(task, target_class, L, codebook, rng, pad_token, utt_len_range)
        if not any(np.array_equal(target, d.utterance) for d in demos):
            break
    else:
        raise CollisionError(f"cannot avoid collision after {max_attempts} target resamples")
    episode = Episode(
        demos=demos,
        target_utterance=target,
        target_label_token=verbalizer.label_for(target_class),
        mode=ICL_MODE,
        task_id=task.task_id,
        position_groups=[],
        length=L,
    )
    episode.position_groups = _position_groups([len(d.utterance) for d in demos], len(target))
    return episode


def verify_episode(episode: Episode) -> None:
    """Brute-force check of the mode invariants; raises InvariantViolation."""
    demo_utts = [d.utterance for d in episode.demos]
    duplicated = any(np.array_equal(episode.target_utterance, u) for u in demo_utts)
    label_present = episode.target_label_token in episode.demo_label_tokens()
    if episode.mode == WARMUP_MODE:
        if not duplicated:
            raise InvariantViolation("warmup episode target is not a duplicate of any demonstration")
        if not label_present:
            raise InvariantViolation("warmup episode target label missing from demonstrations")
    elif episode.mode == ICL_MODE:
        if duplicated:
            raise InvariantViolation("icl episode target duplicates a demonstration")
        if not label_present:
            raise InvariantViolation("icl episode target label missing from demonstrations")
    else:
        raise InvariantViolation(f"unknown episode mode {episode.mode!r}")
    n_demo_positions = sum(len(u) for u in demo_utts)
    expected = n_demo_positions + 3 * len(demo_utts) + len(episode.target_utterance) + 1
    if len(episode.position_groups) != expected:
        raise InvariantViolation("position_groups does not cover the layout exactly")


def build_balanced_dataset(
    tasks: list[TaskSpec],
    total: int,
    n: int,
    L: int | None,
    mode: str,
    seed: int,
    *,
    codebook: Codebook,
    layout: VocabLayout,
    utt_len_range: tuple[int, int] | None = None,
) -> Dataset:
    """Exactly total/len(tasks) episodes per task, round-robin ordered;
    per-episode RNG streams and verbalizers are derived by index."""
    if not tasks:
        raise ValueError("need at least one task")
    if mode not in (WARMUP_MODE, ICL_MODE):
        raise ValueError(f"mode must be '{WARMUP_MODE}' or '{ICL_MODE}'")
    if total % len(tasks) != 0:
        raise ValueError(f"total {total} not divisible by {len(tasks)} tasks")
    sampler = sample_warmup_episode if mode == WARMUP_MODE else sample_icl_episode
    episodes: list[Episode] = []
    counts: Counter[str] = Counter()
    for i in range(total):
        task = tasks[i % len(tasks)]
        verb = build_verbalizer(task, seed=seed * 1_000_003 + i, layout=layout)
        rng = derive_rng("dataset", seed, mode, i)
        ep = sampler(task, verb, n, L, codebook, rng, pad_token=layout.pad, utt_len_range=utt_len_range)
        episodes.append(ep)
        counts[task.task_id] += 1
    return Dataset(episodes=episodes, per_task_counts=dict(counts))


def assemble_batch(episodes: list[Episode], layout: VocabLayout) -> tuple[np.ndarray, np.ndarray]:
    """Stack assembled episodes into one (B, T_max) matrix.

    Shorter rows are right-padded with the pad token; `positions[b]` is the
    index of row b's final separator (its prediction position). Padding
    sits strictly after that position, so it cannot influence the
    prediction under the causal mask.
    """
    rows = [assemble(ep, layout.sep)[0] for ep in episodes]
    t_max = max(len(r) for r in rows)
    tokens = np.full((len(rows), t_max), layout.pad, dtype=np.int64)
    positions = np.empty(len(rows), dtype=np.int64)
    for b, r in enumerate(rows):
        tokens[b, : len(r)] = r
        positions[b] = len(r) - 1
    return tokens, positions


# ---------------------------------------------------------------------------
# Newline-delimited JSON serialization


def episode_to_dict(episode: Episode) -> dict:
    groups = episode.position_groups or _position_groups(
        [len(d.utterance) for d in episode.demos], len(episode.target_utterance)
    )
    return {
        "task_id": episode.task_id,
        "mode": episode.mode,
        "demo_units": [[int(x) for x in d.utterance] for d in episode.demos],
        "demo_labels": [int(d.label_token) for d in episode.demos],
        "target_units": [int(x) for x in episode.target_utterance],
        "target_label": int(episode.target_label_token),
        "layout": groups,
    }


def episode_from_dict(doc: dict) -> Episode:
    demos = [
        Demonstration(utterance=np.asarray(u, dtype=np.int64), label_token=int(l))
        for u, l in zip(doc["demo_units"], doc["demo_labels"])
    ]
    lengths = {len(d.utterance) for d in demos} | {len(doc["target_units"])}
    return Episode(
        demos=demos,
        target_utterance=np.asarray(doc["target_units"], dtype=np.int64),
        target_label_token=int(doc["target_label"]),
        mode=str(doc["mode"]),
        task_id=str(doc["task_id"]),
        position_groups=[str(g) for g in doc["layout"]],
        length=lengths.pop() if len(lengths) == 1 else None,
    )


def write_dataset_jsonl(dataset: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in dataset.episodes:
            fh.write(json.dumps(episode_to_dict(ep)) + "\n")


def read_dataset_jsonl(path: str | Path) -> Dataset:
    episodes = []
    counts: Counter[str] = Counter()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                ep = episode_from_dict(json.loads(line))
                episodes.append(ep)
                counts[ep.task_id] += 1
    return Dataset(episodes=episodes, per_task_counts=dict(counts))
