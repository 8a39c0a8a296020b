"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

import uniticl as u
from uniticl.cli import RunConfig, build_tasks, vocab_layout
from uniticl.lm import loss_and_grads
from uniticl.tasks import fit_task_codebook
from uniticl.vocab import VocabLayout

TINY_K = 16


def tiny_lm_config(dtype: str = "f32", **kw) -> u.LmConfig:
    base = dict(vocab_size=VocabLayout(TINY_K).size, d_model=16, n_layers=2, n_heads=2,
                d_ff=32, max_seq_len=64, dtype=dtype)
    base.update(kw)
    return u.LmConfig(**base)


@pytest.fixture(scope="session")
def tiny_layout() -> VocabLayout:
    return VocabLayout(TINY_K)


@pytest.fixture(scope="session")
def tiny_tasks():
    diff = u.Difficulty(noise_rate=0.05, motif_len=2)
    train = [u.gen_task_spec(s, 4, diff, "train", n_units=TINY_K) for s in (1, 2)]
    test = [u.gen_task_spec(7, 4, diff, "test", n_units=TINY_K)]
    return train, test


@pytest.fixture(scope="session")
def tiny_codebook(tiny_tasks):
    train, test = tiny_tasks
    return fit_task_codebook(train + test, TINY_K, d_feat=8, frames_per_class=200, seed=0)


@pytest.fixture(scope="session")
def tiny_model():
    return u.init_model(tiny_lm_config(), seed=0)


def fd_max_rel_err(
    model: u.ModelParams,
    owner: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    prompts,
    tokens: np.ndarray,
    positions: np.ndarray,
    targets: np.ndarray,
    wrt: str,
    h: float = 1e-4,
    sample_per_tensor: int | None = None,
) -> float:
    """Worst per-coordinate relative error between analytic gradients and
    central finite differences; denominators are floored at 1e-6 so that
    coordinates where both sides vanish do not register as error."""
    worst = 0.0
    pick = np.random.default_rng(0)
    for name, g in grads.items():
        arr = owner[name]
        if sample_per_tensor is None or g.size <= sample_per_tensor:
            idxs = range(g.size)
        else:
            idxs = pick.choice(g.size, size=sample_per_tensor, replace=False)
        for i in idxs:
            orig = arr.flat[i]
            arr.flat[i] = orig + h
            lp, _ = loss_and_grads(model, tokens, prompts, positions, targets, wrt=wrt)
            arr.flat[i] = orig - h
            lm, _ = loss_and_grads(model, tokens, prompts, positions, targets, wrt=wrt)
            arr.flat[i] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(fd - g.flat[i]) / max(abs(fd), abs(g.flat[i]), 1e-6)
            worst = max(worst, rel)
    return worst


def small_run_config(**kw) -> RunConfig:
    """A very small, fast pipeline configuration for CLI tests."""
    base = dict(
        seed=11, k_units=TINY_K, utt_len=8, n_demos=2, n_classes=2,
        motif_len=2, noise_rate=0.05,
        d_model=32, n_layers=2, n_heads=2, d_ff=64, max_seq_len=64,
        n_train_tasks=2, n_test_tasks=1,
        codebook_frames_per_class=120, corpus_sequences=40, corpus_utts_per_seq=4,
        pretrain_steps=8, pretrain_batch=4,
        warmup_steps=8, warmup_batch=4,
        eval_episodes=6, eval_repeats=2, attention_episodes=4,
    )
    base.update(kw)
    return RunConfig(**base)


def build_small_world(cfg: RunConfig):
    train, test = build_tasks(cfg)
    layout = vocab_layout(cfg)
    codebook = fit_task_codebook(train + test, cfg.k_units, d_feat=cfg.d_feat,
                                 frames_per_class=cfg.codebook_frames_per_class, seed=cfg.seed)
    return train, test, layout, codebook
