"""Warmup training.

`warmup_train` optimizes only the prompt bank (per-layer key/value
prefixes plus the separator embedding) with cross-entropy on the target
label token, read at the final separator position of each warmup episode.
The transformer weights are never touched; `weights_sha256` before and
after the run is the frozen-backbone check.

`finetune_warmup` is the ablation: the same loop with gradients flowing to
every model parameter and no prompt bank.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import episodes as ep
from .lm import INIT_STD, ModelParams, PromptBank, loss_and_grads
from .optim import Adam, clip_global_norm, warmup_lr
from .seeding import derive_rng
from .tasks import Codebook, TaskSpec
from .vocab import VocabLayout

PROMPT_TUNING = "prompt_tuning"
FINE_TUNING = "fine_tuning"


@dataclass(frozen=True)
class WarmupConfig:
    mode: str = PROMPT_TUNING
    prompt_len: int = 5
    steps: int = 2000
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 100
    n_demos: int = 4
    utt_len: int | None = 50  # None = natural lengths (requires utt_len_range)
    utt_len_range: tuple[int, int] | None = None
    lr_warmup_steps: int = 100
    clip_norm: float = 1.0
    duplicate_target: bool = True  # off = probe the no-duplication instability

    def __post_init__(self) -> None:
        if self.mode not in (PROMPT_TUNING, FINE_TUNING):
            raise ValueError(f"mode must be '{PROMPT_TUNING}' or '{FINE_TUNING}'")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.prompt_len < 0:
            raise ValueError("prompt_len must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TraceRow:
    step: int
    mean_ce: float
    grad_norm: float
    mode: str


def calibrate_label_embeddings(model: ModelParams, layout: VocabLayout, seed: int = 0,
                               boundary_unit: int = 0) -> ModelParams:
    """Ground the reserved special-token embeddings in the pretrained unit
    space; run once after pretraining, before any warmup.

    Unit-only pretraining never touches the reserved rows, leaving them at
    init scale in directions the trained attention and (tied) readout have
    never operated on: label logits stay capped far below unit logits and
    the copy circuitry learned on units does not move them. GSLM-style
    models avoid this for free because their verbalizers reuse unit tokens.
    To keep reserved ids (and an unambiguous guessing rate) while restoring
    that property:

    - each label row becomes the negation of a distinct trained unit row,
      rescaled to the mean unit norm: negation keeps rows inside the span
      copy circuits know, distinct from every actual unit, and mutually
      separated; which unit each label borrows is a seeded random draw, so
      labels remain an arbitrary random mapping;
    - the separator row becomes a copy of the trained boundary ("silence")
      unit row, so episode separators look like the pauses the backbone
      was pretrained on (the row stays trainable during warmup);
    - the pad row is left tiny: padding should stay invisible.

    The frozen-backbone guarantee is measured on the calibrated weights.
    """
    out = model.copy()
    emb = out.tensors["embed.tok"]
    units = emb[: layout.n_units]
    unit_rms = float(np.sqrt((units**2).sum(axis=1).mean()))
    rng = np.random.default_rng(seed)
    donors = rng.choice(layout.n_units, size=min(layout.n_labels, layout.n_units), replace=False)
    for j, label in enumerate(layout.label_tokens()):
        row = -units[donors[j % len(donors)]]
        norm = float(np.sqrt((row**2).sum()))
        emb[label] = row * (unit_rms / norm) if norm > 0 else row
    emb[layout.sep] = units[boundary_unit].copy()
    return out


def init_prompts(model: ModelParams, prompt_len: int, seed: int) -> PromptBank:
    """Normal(0, 0.02) prefixes; the separator embedding starts from the
    pretrained separator row so prompt_len=0 reproduces the plain model."""
    if prompt_len < 0:
        raise ValueError("prompt_len must be >= 0")
    cfg = model.config
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    tensors: dict[str, np.ndarray] = {}
    for i in range(cfg.n_layers):
        tensors[f"prompt.layer{i}.key"] = rng.normal(0.0, INIT_STD, size=(prompt_len, cfg.d_model)).astype(dt)
        tensors[f"prompt.layer{i}.value"] = rng.normal(0.0, INIT_STD, size=(prompt_len, cfg.d_model)).astype(dt)
    tensors["embed.sep"] = model.tensors["embed.tok"][cfg.sep_token].copy()
    return PromptBank(prompt_len=prompt_len, sep_token=cfg.sep_token, tensors=tensors)


def _episode_batch(
    tasks: list[TaskSpec],
    cfg: WarmupConfig,
    codebook: Codebook,
    layout: VocabLayout,
    step: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One balanced warmup batch: episode j of a batch comes from task
    j mod len(tasks); seeds derive from (cfg.seed, step, j)."""
    batch = []
    for j in range(cfg.batch_size):
        task = tasks[j % len(tasks)]
        verb = ep.build_verbalizer(task, seed=cfg.seed * 1_000_003 + step * cfg.batch_size + j, layout=layout)
        rng = derive_rng("warmup-episode", cfg.seed, step, j)
        if cfg.duplicate_target:
            episode = ep.sample_warmup_episode(
                task, verb, cfg.n_demos, cfg.utt_len, codebook, rng,
                pad_token=layout.pad, utt_len_range=cfg.utt_len_range,
            )
        else:
            episode = ep.sample_icl_episode(
                task, verb, cfg.n_demos, cfg.utt_len, codebook, rng,
                pad_token=layout.pad, utt_len_range=cfg.utt_len_range,
            )
        batch.append(episode)
    tokens, positions = ep.assemble_batch(batch, layout)
    targets = np.array([e.target_label_token for e in batch], dtype=np.int64)
    return tokens, positions, targets


def warmup_train(
    model: ModelParams,
    codebook: Codebook,
    tasks: list[TaskSpec],
    cfg: WarmupConfig,
    layout: VocabLayout,
    *,
    log: bool = False,
) -> tuple[PromptBank, list[TraceRow]]:
    """Prompt-tuning warmup; the model is read-only throughout."""
    if cfg.mode != PROMPT_TUNING:
        raise ValueError("warmup_train requires mode == 'prompt_tuning'")
    if not tasks:
        raise ValueError("empty task set")
    bank = init_prompts(model, cfg.prompt_len, seed=cfg.seed)
    if cfg.steps == 0:
        return bank, []
    opt = Adam(bank.tensors, lr=cfg.lr)
    trace: list[TraceRow] = []
    for step in range(cfg.steps):
        tokens, positions, targets = _episode_batch(tasks, cfg, codebook, layout, step)
        loss, grads = loss_and_grads(model, tokens, bank, positions, targets, wrt="prompts_only")
        norm = clip_global_norm(grads, cfg.clip_norm)
        opt.step(bank.tensors, grads, lr_scale=warmup_lr(step, cfg.lr_warmup_steps))
        trace.append(TraceRow(step=step, mean_ce=loss, grad_norm=norm, mode=cfg.mode))
        if log and (step % cfg.eval_every == 0 or step == cfg.steps - 1):
            print(f"[warmup {cfg.mode}] step {step:5d}  ce {loss:.4f}  gnorm {norm:.3f}", flush=True)
    return bank, trace


def finetune_warmup(
    model: ModelParams,
    codebook: Codebook,
    tasks: list[TaskSpec],
    cfg: WarmupConfig,
    layout: VocabLayout,
    *,
    log: bool = False,
) -> tuple[ModelParams, list[TraceRow]]:
    """Full-model warmup ablation: same objective, gradients everywhere,
    no prompt bank. Returns the updated model (the input stays intact)."""
    if cfg.mode != FINE_TUNING:
        raise ValueError("finetune_warmup requires mode == 'fine_tuning'")
    if not tasks:
        raise ValueError("empty task set")
    tuned = model.copy()
    if cfg.steps == 0:
        return tuned, []
    opt = Adam(tuned.tensors, lr=cfg.lr)
    trace: list[TraceRow] = []
    for step in range(cfg.steps):
        tokens, positions, targets = _episode_batch(tasks, cfg, codebook, layout, step)
        loss, grads = loss_and_grads(tuned, tokens, None, positions, targets, wrt="full_model")
        norm = clip_global_norm(grads, cfg.clip_norm)
        opt.step(tuned.tensors, grads, lr_scale=warmup_lr(step, cfg.lr_warmup_steps))
        trace.append(TraceRow(step=step, mean_ce=loss, grad_norm=norm, mode=cfg.mode))
        if log and (step % cfg.eval_every == 0 or step == cfg.steps - 1):
            print(f"[warmup {cfg.mode}] step {step:5d}  ce {loss:.4f}  gnorm {norm:.3f}", flush=True)
    return tuned, trace


def write_trace_csv(trace: list[TraceRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,mean_ce,grad_norm,mode\n")
        for row in trace:
            fh.write(f"{row.step},{row.mean_ce:.6f},{row.grad_norm:.6f},{row.mode}\n")
