"""Measurements: ICL accuracy with repeats, guessing rate, attention-mass
profiles, and the random / linear-classifier baselines.

Accuracy is exact match between the model's unconstrained argmax at the
final separator and the episode's target label token, averaged over
episodes; mean and population std are taken across independent repeats.
The guessing rate is the fraction of predictions that land anywhere in the
episode's demonstrated label set. Since an ICL episode's target label is
always demonstrated, accuracy <= guessing rate holds per construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import episodes as ep
from .lm import ModelParams, PromptBank, _forward_core, _validate_tokens, predict_labels_batch
from .seeding import derive_rng
from .tasks import Codebook, TaskSpec
from .vocab import VocabLayout

WITH_WARMUP = "with_warmup"
WITHOUT_WARMUP = "without_warmup"
RANDOM_METHOD = "random"
LINEAR_CLF = "linear_clf"

TRAIN_SPLIT = "train_tasks"
TEST_SPLIT = "test_tasks"

PROFILE_GROUPS = ("prompt", "demo_utterance", "demo_label", "separator", "target")
_EPISODE_GROUP_TO_PROFILE = {
    ep.GROUP_DEMO_UTT: "demo_utterance",
    ep.GROUP_DEMO_LABEL: "demo_label",
    ep.GROUP_SEP: "separator",
    ep.GROUP_TARGET: "target",
}

REPORT_COLUMNS = (
    "group",
    "task_id",
    "split",
    "method",
    "accuracy_mean",
    "accuracy_std",
    "guessing_rate",
    "n_repeats",
    "n_episodes",
)


@dataclass
class EvalReport:
    group: str
    task_id: str
    split: str
    method: str
    accuracy_mean: float
    accuracy_std: float
    guessing_rate: float
    n_repeats: int
    n_episodes: int


@dataclass
class AttentionProfile:
    """Per-layer attention mass over position groups, rows summing to 1."""

    mass: np.ndarray  # (n_layers, len(PROFILE_GROUPS))
    groups: tuple[str, ...] = PROFILE_GROUPS


def split_of(task: TaskSpec) -> str:
    return TRAIN_SPLIT if task.group == "train" else TEST_SPLIT


def sample_eval_episodes(
    task: TaskSpec,
    n_episodes: int,
    repeat: int,
    seed: int,
    *,
    codebook: Codebook,
    layout: VocabLayout,
    n_demos: int,
    utt_len: int | None,
    utt_len_range: tuple[int, int] | None = None,
) -> list[ep.Episode]:
    """ICL episodes for one (task, repeat); every episode gets its own
    derived RNG stream and a fresh random verbalizer."""
    out = []
    for i in range(n_episodes):
        verb = ep.build_verbalizer(task, seed=seed * 1_000_003 + repeat * n_episodes + i, layout=layout)
        rng = derive_rng("eval-episode", seed, task.task_id, repeat, i)
        out.append(
            ep.sample_icl_episode(
                task, verb, n_demos, utt_len, codebook, rng,
                pad_token=layout.pad, utt_len_range=utt_len_range,
            )
        )
    return out


def guessing_rate(predictions: list[int] | np.ndarray, episodes: list[ep.Episode]) -> float:
    """Fraction of predictions inside their episode's demo-label set."""
    preds = np.asarray(predictions, dtype=np.int64).ravel()
    if preds.shape[0] != len(episodes):
        raise ValueError(f"{preds.shape[0]} predictions for {len(episodes)} episodes")
    hits = sum(1 for p, e in zip(preds, episodes) if int(p) in set(e.demo_label_tokens()))
    return hits / len(episodes) if episodes else 0.0


def _predict(
    model: ModelParams,
    prompts: PromptBank | None,
    episodes: list[ep.Episode],
    layout: VocabLayout,
    batch_size: int = 128,
    constrain_to_labels: bool = False,
) -> np.ndarray:
    preds = np.empty(len(episodes), dtype=np.int64)
    for lo in range(0, len(episodes), batch_size):
        chunk = episodes[lo : lo + batch_size]
        tokens, positions = ep.assemble_batch(chunk, layout)
        if constrain_to_labels:
            toks = _validate_tokens(model.config, tokens)
            logits, _, _ = _forward_core(model, toks, prompts, keep_cache=False)
            rows = logits[np.arange(toks.shape[0]), positions]
            region = slice(layout.label_base, layout.sep)
            preds[lo : lo + len(chunk)] = layout.label_base + rows[:, region].argmax(axis=1)
        else:
            preds[lo : lo + len(chunk)] = predict_labels_batch(model, prompts, tokens, positions)
    return preds


def eval_accuracy(
    model: ModelParams,
    prompts: PromptBank | None,
    tasks: list[TaskSpec],
    n_episodes: int,
    n_repeats: int,
    seed: int,
    *,
    codebook: Codebook,
    layout: VocabLayout,
    n_demos: int = 4,
    utt_len: int | None = 50,
    utt_len_range: tuple[int, int] | None = None,
    group: str = "default",
    method: str | None = None,
    constrain_to_labels: bool = False,
) -> list[EvalReport]:
    """One report per task: mean/std accuracy and mean guessing rate over
    n_repeats independently seeded repeats of n_episodes ICL episodes.
    prompts=None gives the without-warmup condition."""
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    if not tasks:
        raise ValueError("empty task list")
    method = method or (WITH_WARMUP if prompts is not None else WITHOUT_WARMUP)
    reports = []
    for task in tasks:
        accs, guesses = [], []
        for r in range(n_repeats):
            eps = sample_eval_episodes(
                task, n_episodes, r, seed,
                codebook=codebook, layout=layout, n_demos=n_demos,
                utt_len=utt_len, utt_len_range=utt_len_range,
            )
            preds = _predict(model, prompts, eps, layout, constrain_to_labels=constrain_to_labels)
            targets = np.array([e.target_label_token for e in eps])
            accs.append(float((preds == targets).mean()))
            guesses.append(guessing_rate(preds, eps))
        reports.append(
            EvalReport(
                group=group,
                task_id=task.task_id,
                split=split_of(task),
                method=method,
                accuracy_mean=float(np.mean(accs)),
                accuracy_std=float(np.std(accs)),
                guessing_rate=float(np.mean(guesses)),
                n_repeats=n_repeats,
                n_episodes=n_episodes,
            )
        )
    return reports


def random_baseline(episodes: list[ep.Episode], rng: np.random.Generator) -> float:
    """Accuracy of predicting a uniform draw from each episode's multiset
    of demonstrated label tokens."""
    if not episodes:
        return 0.0
    hits = 0
    for e in episodes:
        labels = e.demo_label_tokens()
        pick = labels[int(rng.integers(0, len(labels)))]
        hits += int(pick == e.target_label_token)
    return hits / len(episodes)


def random_baseline_reports(
    tasks: list[TaskSpec],
    n_episodes: int,
    n_repeats: int,
    seed: int,
    *,
    codebook: Codebook,
    layout: VocabLayout,
    n_demos: int = 4,
    utt_len: int | None = 50,
    utt_len_range: tuple[int, int] | None = None,
    group: str = "default",
) -> list[EvalReport]:
    """Per-task EvalReports for the random baseline on the same episode
    streams used by eval_accuracy."""
    reports = []
    for task in tasks:
        accs = []
        for r in range(n_repeats):
            eps = sample_eval_episodes(
                task, n_episodes, r, seed,
                codebook=codebook, layout=layout, n_demos=n_demos,
                utt_len=utt_len, utt_len_range=utt_len_range,
            )
            accs.append(random_baseline(eps, derive_rng("random-baseline", seed, task.task_id, r)))
        reports.append(
            EvalReport(
                group=group, task_id=task.task_id, split=split_of(task), method=RANDOM_METHOD,
                accuracy_mean=float(np.mean(accs)), accuracy_std=float(np.std(accs)),
                guessing_rate=1.0, n_repeats=n_repeats, n_episodes=n_episodes,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# Linear classifier baseline (SVC stand-in)


def histogram_features(seq: np.ndarray, k: int) -> np.ndarray:
    """L1-normalized unit-count histogram of a unit sequence."""
    units = np.asarray(seq, dtype=np.int64).ravel()
    if units.size == 0:
        raise ValueError("empty sequence")
    if units.min() < 0 or units.max() >= k:
        raise ValueError(f"unit id out of range [0, {k})")
    counts = np.bincount(units, minlength=k).astype(np.float64)
    return counts / counts.sum()


@dataclass
class LinearClassifier:
    classes: np.ndarray  # sorted label values
    weights: np.ndarray  # (n_classes, k)
    biases: np.ndarray  # (n_classes,)
    reg: float


def hinge_objective(clf: LinearClassifier, feats: np.ndarray, labels: np.ndarray) -> float:
    """L2-regularized one-vs-rest hinge loss (the training objective)."""
    signs = np.where(labels[:, None] == clf.classes[None, :], 1.0, -1.0)
    margins = signs * (feats @ clf.weights.T + clf.biases)
    hinge = np.maximum(0.0, 1.0 - margins).sum(axis=1).mean()
    return float(0.5 * clf.reg * (clf.weights**2).sum() + hinge)


def linear_clf_fit(
    demos: list[tuple[np.ndarray, int]],
    epochs: int = 200,
    lr: float = 0.5,
    seed: int = 0,
    *,
    k: int,
    reg: float = 1e-3,
) -> LinearClassifier:
    """One-vs-rest linear SVM on unit histograms, full-batch subgradient
    descent on the L2-regularized hinge loss. Deterministic (zero init,
    fixed order); `seed` is accepted for interface symmetry."""
    del seed
    if not demos:
        raise ValueError("empty demonstration set")
    feats = np.stack([histogram_features(u, k) for u, _ in demos])
    labels = np.array([int(l) for _, l in demos])
    classes = np.unique(labels)
    w = np.zeros((len(classes), k))
    b = np.zeros(len(classes))
    n = feats.shape[0]
    signs = np.where(labels[:, None] == classes[None, :], 1.0, -1.0)  # (n, C)
    for _ in range(epochs):
        margins = signs * (feats @ w.T + b)
        active = (margins < 1.0).astype(np.float64) * signs  # subgradient mask
        dw = reg * w - (active.T @ feats) / n
        db = -active.sum(axis=0) / n
        w -= lr * dw
        b -= lr * db
    return LinearClassifier(classes=classes, weights=w, biases=b, reg=reg)


def linear_clf_predict(clf: LinearClassifier, seq: np.ndarray) -> int:
    """Argmax margin; ties resolve to the lowest label value."""
    x = histogram_features(seq, clf.weights.shape[1])
    scores = clf.weights @ x + clf.biases
    return int(clf.classes[int(np.argmax(scores))])


def _strip_special(seq: np.ndarray, n_units: int) -> np.ndarray:
    units = np.asarray(seq, dtype=np.int64)
    return units[units < n_units]


def linear_clf_reports(
    tasks: list[TaskSpec],
    n_episodes: int,
    n_repeats: int,
    seed: int,
    *,
    codebook: Codebook,
    layout: VocabLayout,
    n_demos: int = 4,
    utt_len: int | None = 50,
    utt_len_range: tuple[int, int] | None = None,
    group: str = "default",
    epochs: int = 200,
) -> list[EvalReport]:
    """Per-episode classifier: fit on the n demonstrations (pad tokens
    stripped before histogramming), predict the target."""
    reports = []
    for task in tasks:
        accs = []
        for r in range(n_repeats):
            eps = sample_eval_episodes(
                task, n_episodes, r, seed,
                codebook=codebook, layout=layout, n_demos=n_demos,
                utt_len=utt_len, utt_len_range=utt_len_range,
            )
            hits = 0
            for e in eps:
                demos = [(_strip_special(d.utterance, layout.n_units), d.label_token) for d in e.demos]
                clf = linear_clf_fit(demos, epochs=epochs, k=layout.n_units)
                pred = linear_clf_predict(clf, _strip_special(e.target_utterance, layout.n_units))
                hits += int(pred == e.target_label_token)
            accs.append(hits / len(eps))
        reports.append(
            EvalReport(
                group=group, task_id=task.task_id, split=split_of(task), method=LINEAR_CLF,
                accuracy_mean=float(np.mean(accs)), accuracy_std=float(np.std(accs)),
                guessing_rate=1.0, n_repeats=n_repeats, n_episodes=n_episodes,
            )
        )
    return reports


# ---------------------------------------------------------------------------
# Attention profile


def attention_profile(
    model: ModelParams,
    prompts: PromptBank | None,
    episodes: list[ep.Episode],
    *,
    layout: VocabLayout,
) -> AttentionProfile:
    """Final-position attention mass per position group, head-averaged and
    episode-averaged, one row per layer."""
    if not episodes:
        raise ValueError("need at least one episode")
    plen = prompts.prompt_len if prompts is not None else 0
    acc = np.zeros((model.config.n_layers, len(PROFILE_GROUPS)))
    for episode in episodes:
        if not episode.position_groups:
            raise ValueError("episode is missing position_groups")
        tokens, groups = ep.assemble(episode, layout.sep)
        toks = _validate_tokens(model.config, tokens)
        _, attn, _ = _forward_core(model, toks, prompts, keep_cache=False)
        col_idx = np.array([PROFILE_GROUPS.index(_EPISODE_GROUP_TO_PROFILE[g]) for g in groups])
        for layer, probs in enumerate(attn):
            row = probs[0, :, -1, :].mean(axis=0)  # head-averaged final-query mass
            acc[layer, 0] += row[:plen].sum()
            for gi in range(len(PROFILE_GROUPS)):
                acc[layer, gi] += row[plen:][col_idx == gi].sum() if gi > 0 else 0.0
    mass = acc / len(episodes)
    return AttentionProfile(mass=mass)


# ---------------------------------------------------------------------------
# Report output


def write_reports_csv(reports: list[EvalReport], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for r in reports:
            fh.write(
                f"{r.group},{r.task_id},{r.split},{r.method},"
                f"{r.accuracy_mean:.6f},{r.accuracy_std:.6f},{r.guessing_rate:.6f},"
                f"{r.n_repeats},{r.n_episodes}\n"
            )


def read_reports_csv(path: str | Path) -> list[EvalReport]:
    lines = Path(path).read_text().strip().splitlines()
    if not lines or lines[0] != ",".join(REPORT_COLUMNS):
        raise ValueError(f"unexpected header in {path}")
    out = []
    for line in lines[1:]:
        g, tid, split, method, am, astd, gr, nr, ne = line.split(",")
        out.append(
            EvalReport(g, tid, split, method, float(am), float(astd), float(gr), int(nr), int(ne))
        )
    return out


def write_attention_csv(profile: AttentionProfile, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("layer," + ",".join(profile.groups) + "\n")
        for layer in range(profile.mass.shape[0]):
            cells = ",".join(f"{x:.6f}" for x in profile.mass[layer])
            fh.write(f"{layer},{cells}\n")


def write_attention_pgm(profile: AttentionProfile, path: str | Path) -> None:
    """Greyscale P2 PGM, one row per layer, masses scaled linearly 0..255."""
    mass = np.clip(profile.mass, 0.0, 1.0)
    pixels = np.rint(mass * 255).astype(int)
    rows, cols = pixels.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{cols} {rows}\n255\n")
        for r in range(rows):
            fh.write(" ".join(str(v) for v in pixels[r]) + "\n")
