"""Synthetic unit-sequence classification tasks.

A task assigns to each class a hidden motif (a short sequence of base
symbols) plus a biased background process. Sampling a class utterance walks
a temperature-controlled Markov chain over base symbols, splices the motif
in at a random offset (each motif frame corrupted with probability
`noise_rate`), and emits one continuous feature frame per symbol: the
symbol's anchor point plus Gaussian jitter. Feature streams are quantized
back to discrete units by a k-means codebook, standing in for an upstream
SSL-feature + k-means front end.

Base symbols and units share the index space [0, k): the codebook fitted by
`fit_task_codebook` is relabeled so that unit i sits on anchor i, which
keeps motifs recognizable in quantized output and unit semantics stable
across runs.

All operations are pure functions of their inputs and seeds.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .seeding import derive_rng

FEATURE_DIM = 8
ANCHOR_SCALE = 3.0
FRAME_JITTER = 0.25
MOTIF_POOL_SIZE = 256
MAX_CLASSES = 8

# Fraction of unigram mass spread uniformly; the rest concentrates on a
# class-specific symbol subset so classes are separable by unit histograms.
BIAS_FLOOR_MASS = 0.15

TRAIN_GROUP = "train"
TEST_GROUP = "test"


class MotifPoolExhaustedError(ValueError):
    """Raised when a task requests more motifs than its group's pool holds."""


@dataclass(frozen=True)
class Difficulty:
    noise_rate: float = 0.05
    motif_len: int = 4

    def __post_init__(self) -> None:
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if self.motif_len < 2:
            raise ValueError("motif_len must be >= 2")


@dataclass(frozen=True)
class ClassGen:
    """Generative parameters for one class of a task."""

    motif: tuple[int, ...]
    unigram_bias: np.ndarray  # (k,) probabilities over base symbols
    transition_temp: float


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    num_classes: int
    class_gens: tuple[ClassGen, ...]
    difficulty: Difficulty
    group: str

    @property
    def n_symbols(self) -> int:
        return int(self.class_gens[0].unigram_bias.shape[0])

    def motifs(self) -> list[tuple[int, ...]]:
        return [g.motif for g in self.class_gens]


@dataclass
class Codebook:
    """k centroids in feature space; quantization maps frames to indices."""

    centroids: np.ndarray  # (k, d_feat)
    k: int
    inertia_trace: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2:
            raise ValueError("centroids must be a (k, d_feat) matrix")
        if self.k != self.centroids.shape[0] or self.k < 1:
            raise ValueError("k must match the number of centroid rows and be >= 1")


@lru_cache(maxsize=16)
def _anchors_cached(k: int, d_feat: int) -> np.ndarray:
    rng = derive_rng("anchors", k, d_feat)
    n_cand = max(8 * k, 256)
    cand = rng.standard_normal((n_cand, d_feat)) * ANCHOR_SCALE
    chosen = [0]
    d2 = ((cand - cand[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        idx = int(np.argmax(d2))
        chosen.append(idx)
        d2 = np.minimum(d2, ((cand - cand[idx]) ** 2).sum(axis=1))
    out = cand[chosen]
    out.setflags(write=False)
    return out


def anchors(k: int, d_feat: int = FEATURE_DIM) -> np.ndarray:
    """Deterministic well-separated anchor points, one per base symbol.

    Farthest-point selection from a fixed Gaussian candidate cloud keeps the
    minimum pairwise distance large relative to FRAME_JITTER, so quantizing
    a jittered anchor recovers its index essentially always.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    return _anchors_cached(k, d_feat)


def motif_pool(k: int, motif_len: int) -> tuple[tuple[tuple[int, ...], ...], tuple[tuple[int, ...], ...]]:
    """Deterministic pool of distinct motifs, split 50/50 into (train, test).

    Train-group and test-group tasks draw from disjoint halves, which
    enforces the unseen-task separation at the motif level.
    """
    space = k**motif_len
    pool_size = min(MOTIF_POOL_SIZE, space)
    pool_size -= pool_size % 2
    if pool_size < 4:
        raise ValueError("symbol space too small for a usable motif pool")
    rng = derive_rng("motif-pool", k, motif_len)
    if space <= 65536:
        all_motifs = list(itertools.product(range(k), repeat=motif_len))
        order = rng.permutation(len(all_motifs))
        motifs = [all_motifs[i] for i in order[:pool_size]]
    else:
        seen: set[tuple[int, ...]] = set()
        motifs = []
        while len(motifs) < pool_size:
            m = tuple(int(x) for x in rng.integers(0, k, size=motif_len))
            if m not in seen:
                seen.add(m)
                motifs.append(m)
    half = pool_size // 2
    return tuple(motifs[:half]), tuple(motifs[half:])


def _class_bias(rng: np.random.Generator, k: int) -> np.ndarray:
    support = max(3, round(0.18 * k))
    symbols = rng.choice(k, size=min(support, k), replace=False)
    bias = np.full(k, BIAS_FLOOR_MASS / k)
    bias[symbols] += (1.0 - BIAS_FLOOR_MASS) * rng.dirichlet(np.ones(len(symbols)))
    return bias / bias.sum()


def gen_task_spec(
    seed: int,
    num_classes: int,
    difficulty: Difficulty,
    group: str,
    *,
    n_units: int,
    transition_temp: float = 2.0,
) -> TaskSpec:
    """Deterministically build a task; motifs drawn without replacement
    from the group's half of the motif pool."""
    if group not in (TRAIN_GROUP, TEST_GROUP):
        raise ValueError(f"group must be '{TRAIN_GROUP}' or '{TEST_GROUP}'")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if transition_temp <= 0:
        raise ValueError("transition_temp must be positive")
    train_half, test_half = motif_pool(n_units, difficulty.motif_len)
    pool = train_half if group == TRAIN_GROUP else test_half
    if num_classes > len(pool):
        raise MotifPoolExhaustedError(
            f"motif pool exhausted: {num_classes} classes requested, "
            f"{len(pool)} motifs reserved for group '{group}'"
        )
    if num_classes > MAX_CLASSES:
        raise ValueError(f"num_classes must be <= {MAX_CLASSES}")

    task_id = f"{group}-{seed}"
    rng = derive_rng("task", group, seed, n_units)
    picks = rng.choice(len(pool), size=num_classes, replace=False)
    gens = tuple(
        ClassGen(
            motif=pool[int(i)],
            unigram_bias=_class_bias(rng, n_units),
            transition_temp=float(transition_temp),
        )
        for i in picks
    )
    return TaskSpec(task_id=task_id, num_classes=num_classes, class_gens=gens, difficulty=difficulty, group=group)


_TRANSITION_CACHE: dict[tuple, np.ndarray] = {}


def _transition_matrix(task: TaskSpec, class_idx: int) -> np.ndarray:
    """Class-conditioned Markov transition probabilities over base symbols.

    Rows mix the class unigram bias with a fixed random affinity matrix;
    higher transition_temp flattens toward the pure unigram.
    """
    gen = task.class_gens[class_idx]
    key = (task.task_id, class_idx, gen.transition_temp, gen.unigram_bias.tobytes())
    cached = _TRANSITION_CACHE.get(key)
    if cached is not None:
        return cached
    k = gen.unigram_bias.shape[0]
    affinity = derive_rng("transition", task.task_id, class_idx).standard_normal((k, k))
    logits = np.log(gen.unigram_bias)[None, :] + affinity / gen.transition_temp
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    if len(_TRANSITION_CACHE) > 256:
        _TRANSITION_CACHE.clear()
    _TRANSITION_CACHE[key] = probs
    return probs


def _sample_symbols(task: TaskSpec, class_idx: int, length: int, rng: np.random.Generator) -> np.ndarray:
    gen = task.class_gens[class_idx]
    k = gen.unigram_bias.shape[0]
    trans_cum = _transition_matrix(task, class_idx).cumsum(axis=1)
    bias_cum = gen.unigram_bias.cumsum()
    draws = rng.random(length)
    symbols = np.empty(length, dtype=np.int64)
    symbols[0] = min(int(np.searchsorted(bias_cum, draws[0], side="right")), k - 1)
    for t in range(1, length):
        row = trans_cum[symbols[t - 1]]
        symbols[t] = min(int(np.searchsorted(row, draws[t], side="right")), k - 1)

    # Splice the (noise-corrupted) motif at a random offset.
    motif_len = task.difficulty.motif_len
    offset = int(rng.integers(0, length - motif_len + 1))
    motif = np.array(gen.motif, dtype=np.int64)
    corrupt = rng.random(motif_len) < task.difficulty.noise_rate
    replacements = rng.integers(0, k, size=motif_len)
    symbols[offset : offset + motif_len] = np.where(corrupt, replacements, motif)
    return symbols


def sample_features(
    task: TaskSpec,
    class_idx: int,
    length: int,
    rng: np.random.Generator,
    *,
    d_feat: int = FEATURE_DIM,
) -> np.ndarray:
    """Sample a (length, d_feat) feature stream for one class utterance."""
    if not 0 <= class_idx < task.num_classes:
        raise ValueError(f"class_idx {class_idx} out of range for {task.num_classes} classes")
    if length < task.difficulty.motif_len:
        raise ValueError(f"length {length} shorter than motif_len {task.difficulty.motif_len}")
    symbols = _sample_symbols(task, class_idx, length, rng)
    points = anchors(task.n_symbols, d_feat)
    return points[symbols] + FRAME_JITTER * rng.standard_normal((length, d_feat))


def kmeans_fit(points: np.ndarray, k: int, max_iters: int = 50, seed: int = 0) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Deterministic under `seed`; inertia is non-increasing across iterations;
    empty clusters are re-seeded to the point farthest from its assigned
    centroid. Stops when assignments are stable or after max_iters.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be a (n, d_feat) matrix")
    n = pts.shape[0]
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    if np.unique(pts, axis=0).shape[0] < k:
        raise ValueError(f"need at least k={k} distinct points")

    rng = np.random.default_rng(seed)
    centroids = np.empty((k, pts.shape[1]))
    centroids[0] = pts[int(rng.integers(0, n))]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        cum = np.cumsum(d2 / d2.sum())
        idx = min(int(np.searchsorted(cum, rng.random(), side="right")), n - 1)
        centroids[j] = pts[idx]
        d2 = np.minimum(d2, ((pts - centroids[j]) ** 2).sum(axis=1))

    trace: list[float] = []
    prev_assign: np.ndarray | None = None
    for _ in range(max_iters):
        dist2 = _pairwise_sq_dists(pts, centroids)
        assign = dist2.argmin(axis=1)
        trace.append(float(dist2[np.arange(n), assign].sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        own = dist2[np.arange(n), assign]
        for j in range(k):
            members = assign == j
            if members.any():
                centroids[j] = pts[members].mean(axis=0)
        for j in range(k):
            if not (assign == j).any():
                far = int(np.argmax(own))
                centroids[j] = pts[far]
                own[far] = -1.0  # keep later reseeds off the same point
    else:
        dist2 = _pairwise_sq_dists(pts, centroids)
        assign = dist2.argmin(axis=1)
        trace.append(float(dist2[np.arange(n), assign].sum()))

    return Codebook(centroids=centroids, k=k, inertia_trace=trace)


def _pairwise_sq_dists(frames: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distances, (n, k), computed by direct
    differences at f64 (keeps ties reproducible)."""
    out = np.empty((frames.shape[0], centroids.shape[0]))
    chunk = max(1, 2_000_000 // max(1, centroids.shape[0] * centroids.shape[1]))
    for lo in range(0, frames.shape[0], chunk):
        hi = min(lo + chunk, frames.shape[0])
        diff = frames[lo:hi, None, :] - centroids[None, :, :]
        out[lo:hi] = (diff * diff).sum(axis=2)
    return out


def quantize(codebook: Codebook, features: np.ndarray) -> np.ndarray:
    """Map each frame to its nearest centroid index; ties break low."""
    frames = np.asarray(features, dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("features must be a (length, d_feat) matrix")
    if frames.shape[1] != codebook.centroids.shape[1]:
        raise ValueError(
            f"feature dim {frames.shape[1]} does not match codebook dim {codebook.centroids.shape[1]}"
        )
    return _pairwise_sq_dists(frames, codebook.centroids).argmin(axis=1).astype(np.int64)


def sample_utterance(
    task: TaskSpec,
    class_idx: int,
    length: int,
    codebook: Codebook,
    rng: np.random.Generator,
) -> np.ndarray:
    """Sample one quantized class utterance (composition of feature
    sampling and quantization)."""
    return quantize(codebook, sample_features(task, class_idx, length, rng, d_feat=codebook.centroids.shape[1]))


def fit_task_codebook(
    tasks: list[TaskSpec],
    k: int,
    *,
    d_feat: int = FEATURE_DIM,
    frames_per_class: int = 400,
    max_iters: int = 50,
    seed: int = 0,
) -> Codebook:
    """Fit the run's quantizer on feature streams sampled from `tasks`.

    After fitting, centroids are relabeled by greedy nearest-anchor matching
    so unit index i corresponds to base symbol i.
    """
    if not tasks:
        raise ValueError("need at least one task to fit a codebook")
    streams = []
    for t_idx, task in enumerate(tasks):
        for c in range(task.num_classes):
            rng = derive_rng("codebook-corpus", seed, t_idx, c)
            length = max(task.difficulty.motif_len, frames_per_class)
            streams.append(sample_features(task, c, length, rng, d_feat=d_feat))
    corpus = np.concatenate(streams, axis=0)
    fitted = kmeans_fit(corpus, k, max_iters=max_iters, seed=seed)

    ref = anchors(k, d_feat)
    order = np.full(k, -1, dtype=np.int64)
    taken = np.zeros(k, dtype=bool)
    dists = _pairwise_sq_dists(ref, fitted.centroids)
    for i in range(k):
        row = np.where(taken, np.inf, dists[i])
        j = int(np.argmin(row))
        order[i] = j
        taken[j] = True
    return Codebook(centroids=fitted.centroids[order], k=k, inertia_trace=fitted.inertia_trace)


# ---------------------------------------------------------------------------
# JSON serialization


def task_to_dict(task: TaskSpec) -> dict:
    return {
        "task_id": task.task_id,
        "num_classes": task.num_classes,
        "class_gens": [
            {
                "motif": list(g.motif),
                "unigram_bias": [float(x) for x in g.unigram_bias],
                "transition_temp": g.transition_temp,
            }
            for g in task.class_gens
        ],
        "difficulty": {"noise_rate": task.difficulty.noise_rate, "motif_len": task.difficulty.motif_len},
        "group": task.group,
    }


def task_from_dict(doc: dict) -> TaskSpec:
    gens = tuple(
        ClassGen(
            motif=tuple(int(x) for x in g["motif"]),
            unigram_bias=np.asarray(g["unigram_bias"], dtype=np.float64),
            transition_temp=float(g["transition_temp"]),
        )
        for g in doc["class_gens"]
    )
    return TaskSpec(
        task_id=str(doc["task_id"]),
        num_classes=int(doc["num_classes"]),
        class_gens=gens,
        difficulty=Difficulty(
            noise_rate=float(doc["difficulty"]["noise_rate"]),
            motif_len=int(doc["difficulty"]["motif_len"]),
        ),
        group=str(doc["group"]),
    )


def save_tasks(tasks: list[TaskSpec], path: str | Path) -> None:
    Path(path).write_text(json.dumps([task_to_dict(t) for t in tasks], indent=2) + "\n")


def load_tasks(path: str | Path) -> list[TaskSpec]:
    return [task_from_dict(doc) for doc in json.loads(Path(path).read_text())]
