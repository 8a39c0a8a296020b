"""Experiment harness.

Five commands driven by a flat key=value config file with --key value
overrides: pretrain, warmup, eval, attention, ablate-length. Every run
writes its fully resolved config, checksums of its input files, its CSV
outputs, and a manifest of everything written, into the --out directory.

Exit codes: 0 success, 2 config error, 3 I/O error, 4 invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import evaluate as ev
from .checkpoint import CheckpointBundle, CheckpointError, load_checkpoint, save_checkpoint
from .episodes import InvariantViolation
from .lm import LmConfig, PromptBank, init_model, pretrain
from .seeding import derive_rng
from .tasks import Codebook, Difficulty, TaskSpec, fit_task_codebook, gen_task_spec, sample_utterance, save_tasks
from .train import (
    FINE_TUNING,
    PROMPT_TUNING,
    WarmupConfig,
    calibrate_label_embeddings,
    finetune_warmup,
    warmup_train,
    write_trace_csv,
)
from .vocab import VocabLayout


class ConfigError(ValueError):
    """Bad config file, unknown key, or inconsistent settings."""


@dataclass(frozen=True)
class RunConfig:
    # global
    seed: int = 0
    out: str = "runs/out"
    group: str = "desk"
    # tasks
    k_units: int = 100
    d_feat: int = 8
    n_train_tasks: int = 3
    n_test_tasks: int = 2
    n_classes: int = 4
    noise_rate: float = 0.05
    motif_len: int = 4
    transition_temp: float = 2.0
    codebook_frames_per_class: int = 400
    # model
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    dtype: str = "f32"
    tied_output: bool = True
    # pretraining
    pretrain_steps: int = 2000
    pretrain_batch: int = 16
    pretrain_lr: float = 3e-4
    pretrain_seq_len: int = 0  # 0 = use the episode layout length
    corpus_sequences: int = 600
    corpus_utts_per_seq: int = 6
    corpus_repeat_prob: float = 0.25
    corpus_phrasebook_frac: float = 0.7
    lr_warmup_steps: int = 100
    # episodes
    n_demos: int = 4
    utt_len: int = 50
    # warmup
    warmup_mode: str = PROMPT_TUNING
    prompt_len: int = 5
    warmup_steps: int = 2000
    warmup_batch: int = 32
    warmup_lr: float = 1e-3
    clip_norm: float = 1.0
    duplicate_target: bool = True
    # evaluation
    eval_episodes: int = 200
    eval_repeats: int = 5
    attention_episodes: int = 64
    # length ablation
    ablate_lengths: str = "10,30,50"
    ablate_not_fixed: bool = True
    # input artifacts
    checkpoint: str = ""
    prompts: str = ""


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    typ = _FIELD_TYPES[key]
    if typ == "bool" or typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean for {key!r}: {raw!r}")
    if typ == "int" or typ is int:
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse integer for {key!r}: {raw!r}") from exc
    if typ == "float" or typ is float:
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"cannot parse float for {key!r}: {raw!r}") from exc
    return raw


def parse_config_file(path: str | Path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, raw.strip())
    return values


def resolve_config(config_path: str | None, overrides: dict[str, str]) -> RunConfig:
    values = parse_config_file(config_path) if config_path else {}
    for key, raw in overrides.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    cfg = RunConfig(**values)
    if cfg.warmup_mode not in (PROMPT_TUNING, FINE_TUNING):
        raise ConfigError(f"warmup_mode must be '{PROMPT_TUNING}' or '{FINE_TUNING}'")
    if episode_length(cfg) > cfg.max_seq_len:
        raise ConfigError(
            f"episode layout length {episode_length(cfg)} exceeds max_seq_len {cfg.max_seq_len}"
        )
    return cfg


def episode_length(cfg: RunConfig) -> int:
    return cfg.n_demos * (cfg.utt_len + 3) + cfg.utt_len + 1


def config_to_text(cfg: RunConfig) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def vocab_layout(cfg: RunConfig) -> VocabLayout:
    return VocabLayout(n_units=cfg.k_units)


def lm_config(cfg: RunConfig) -> LmConfig:
    return LmConfig(
        vocab_size=vocab_layout(cfg).size,
        d_model=cfg.d_model,
        n_layers=cfg.n_layers,
        n_heads=cfg.n_heads,
        d_ff=cfg.d_ff,
        max_seq_len=cfg.max_seq_len,
        dtype=cfg.dtype,
        tied_output=cfg.tied_output,
    )


def build_tasks(cfg: RunConfig) -> tuple[list[TaskSpec], list[TaskSpec]]:
    diff = Difficulty(noise_rate=cfg.noise_rate, motif_len=cfg.motif_len)
    train = [
        gen_task_spec(cfg.seed * 100 + i, cfg.n_classes, diff, "train",
                      n_units=cfg.k_units, transition_temp=cfg.transition_temp)
        for i in range(cfg.n_train_tasks)
    ]
    test = [
        gen_task_spec(cfg.seed * 100 + i, cfg.n_classes, diff, "test",
                      n_units=cfg.k_units, transition_temp=cfg.transition_temp)
        for i in range(cfg.n_test_tasks)
    ]
    return train, test


def utt_len_range(cfg: RunConfig, L: int | None = None) -> tuple[int, int]:
    base = L if L is not None else cfg.utt_len
    return max(cfg.motif_len, round(0.7 * base)), max(cfg.motif_len, round(1.3 * base))


SILENCE_UNIT = 0  # conventional pause symbol between utterances in a stream


def _plain_stream(task: TaskSpec, codebook: Codebook, cfg: RunConfig, rng) -> np.ndarray:
    """Class utterances separated by pauses, with occasional verbatim
    repeats and class switches."""
    lo, hi = utt_len_range(cfg)
    chunks: list[np.ndarray] = []
    cls = int(rng.integers(0, task.num_classes))
    prev: np.ndarray | None = None
    for _ in range(cfg.corpus_utts_per_seq):
        if prev is not None and rng.random() < cfg.corpus_repeat_prob:
            utt = prev.copy()
        else:
            if rng.random() < 0.25:
                cls = int(rng.integers(0, task.num_classes))
            length = int(rng.integers(lo, hi + 1))
            utt = sample_utterance(task, cls, length, codebook, rng)
        chunks.append(utt)
        chunks.append(np.full(int(rng.integers(1, 3)), SILENCE_UNIT, dtype=np.int64))
        prev = utt
    return np.concatenate(chunks)


def _phrasebook_stream(task: TaskSpec, codebook: Codebook, cfg: RunConfig, rng) -> np.ndarray:
    """Recurring phrases with recurring continuations.

    A small per-stream phrasebook maps each sampled utterance to a short
    fixed continuation burst; the stream interleaves (utterance, pause,
    continuation, pause) blocks with every phrase recurring a few times.
    Predicting the burst after a pause then requires matching the
    utterance against its earlier occurrences, which is the long-range
    copy computation that demonstration layouts ask of the model.
    """
    lo, hi = utt_len_range(cfg)
    n_phrases = int(rng.integers(2, 5))
    burst_lo = max(3, task.difficulty.motif_len)
    phrases = []
    for _ in range(n_phrases):
        cls = int(rng.integers(0, task.num_classes))
        utt = sample_utterance(task, cls, int(rng.integers(lo, hi + 1)), codebook, rng)
        burst = sample_utterance(task, cls, int(rng.integers(burst_lo, burst_lo + 4)), codebook, rng)
        phrases.append((utt, burst))
    chunks: list[np.ndarray] = []
    n_blocks = max(cfg.corpus_utts_per_seq, 2 * n_phrases)
    for _ in range(n_blocks):
        utt, burst = phrases[int(rng.integers(0, n_phrases))]
        chunks += [utt, np.full(int(rng.integers(1, 3)), SILENCE_UNIT, dtype=np.int64),
                   burst, np.full(int(rng.integers(1, 3)), SILENCE_UNIT, dtype=np.int64)]
    return np.concatenate(chunks)


def build_pretrain_corpus(tasks: list[TaskSpec], codebook: Codebook, cfg: RunConfig) -> list[np.ndarray]:
    """Unit streams for next-token pretraining.

    Streams mix two speech-like compositions: plain pause-separated
    utterance sequences with occasional verbatim repeats, and phrasebook
    sequences where recurring utterances carry recurring continuations.
    Both push next-token training toward boundary detection and long-range
    match-and-copy circuitry, which is what in-context label prediction
    later reuses.
    """
    seqs = []
    for s in range(cfg.corpus_sequences):
        rng = derive_rng("corpus", cfg.seed, s)
        task = tasks[s % len(tasks)]
        if rng.random() < cfg.corpus_phrasebook_frac:
            seqs.append(_phrasebook_stream(task, codebook, cfg, rng))
        else:
            seqs.append(_plain_stream(task, codebook, cfg, rng))
    return seqs


def warmup_config(cfg: RunConfig, mode: str | None = None, utt_len: int | None = -1) -> WarmupConfig:
    L = cfg.utt_len if utt_len == -1 else utt_len
    return WarmupConfig(
        mode=mode or cfg.warmup_mode,
        prompt_len=cfg.prompt_len,
        steps=cfg.warmup_steps,
        batch_size=cfg.warmup_batch,
        lr=cfg.warmup_lr,
        seed=cfg.seed,
        n_demos=cfg.n_demos,
        utt_len=L,
        utt_len_range=None if L is not None else utt_len_range(cfg),
        lr_warmup_steps=cfg.lr_warmup_steps,
        clip_norm=cfg.clip_norm,
        duplicate_target=cfg.duplicate_target,
    )


# ---------------------------------------------------------------------------
# Run directory bookkeeping


class RunDir:
    def __init__(self, cfg: RunConfig, inputs: list[str | Path]):
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []
        self.write_text("resolved_config.txt", config_to_text(cfg))
        checksums = []
        for p in inputs:
            p = Path(p)
            digest = hashlib.sha256(p.read_bytes()).hexdigest()
            checksums.append(f"{digest}  {p.name}")
        self.write_text("input_checksums.txt", "\n".join(checksums) + "\n")

    def path(self, name: str) -> Path:
        return self.root / name

    def write_text(self, name: str, text: str) -> Path:
        p = self.root / name
        p.write_text(text)
        self.written.append(name)
        return p

    def register(self, name: str) -> Path:
        self.written.append(name)
        return self.root / name

    def finish(self) -> None:
        (self.root / "manifest.txt").write_text("\n".join(sorted(self.written)) + "\n")


# ---------------------------------------------------------------------------
# Commands


def cmd_pretrain(cfg: RunConfig, config_path: str | None) -> int:
    run = RunDir(cfg, [config_path] if config_path else [])
    train_tasks, test_tasks = build_tasks(cfg)
    layout = vocab_layout(cfg)
    codebook = fit_task_codebook(
        train_tasks, cfg.k_units, d_feat=cfg.d_feat,
        frames_per_class=cfg.codebook_frames_per_class, seed=cfg.seed,
    )
    corpus = build_pretrain_corpus(train_tasks, codebook, cfg)
    model = init_model(lm_config(cfg), seed=cfg.seed)
    seq_len = cfg.pretrain_seq_len or episode_length(cfg)
    model, trace = pretrain(
        model, corpus, cfg.pretrain_steps,
        batch_size=cfg.pretrain_batch, seq_len=seq_len, lr=cfg.pretrain_lr,
        lr_warmup_steps=cfg.lr_warmup_steps, clip_norm=cfg.clip_norm, seed=cfg.seed,
    )
    model = calibrate_label_embeddings(model, layout, seed=cfg.seed, boundary_unit=SILENCE_UNIT)
    save_checkpoint(model, codebook, None, model.config, run.register("model.ckpt"))
    save_tasks(train_tasks + test_tasks, run.register("tasks.json"))
    rows = "\n".join(f"{i},{loss:.6f}" for i, loss in enumerate(trace))
    run.write_text("pretrain_loss.csv", "step,mean_ce\n" + (rows + "\n" if rows else ""))
    run.finish()
    print(f"pretrain: wrote {run.path('model.ckpt')}  (layout vocab={layout.size}, seq_len={seq_len})")
    return 0


def _load_bundle(path: str, what: str) -> CheckpointBundle:
    if not path:
        raise ConfigError(f"missing required config key {what!r} (path to a checkpoint)")
    return load_checkpoint(path)


def cmd_warmup(cfg: RunConfig, config_path: str | None) -> int:
    bundle = _load_bundle(cfg.checkpoint, "checkpoint")
    inputs = [p for p in (config_path, cfg.checkpoint) if p]
    run = RunDir(cfg, inputs)
    train_tasks, test_tasks = build_tasks(cfg)
    layout = vocab_layout(cfg)
    if bundle.codebook is None:
        raise ConfigError("checkpoint has no codebook; run pretrain first")

    if cfg.warmup_mode == PROMPT_TUNING:
        wcfg = warmup_config(cfg, PROMPT_TUNING)
        bank, trace = warmup_train(bundle.model, bundle.codebook, train_tasks, wcfg, layout, log=True)
        save_checkpoint(bundle.model, bundle.codebook, bank, bundle.model.config, run.register("prompts.ckpt"))
        write_trace_csv(trace, run.register("warmup_loss.csv"))
        run.finish()
        print(f"warmup: wrote {run.path('prompts.ckpt')}")
        return 0

    # Fine-tuning ablation: tune the whole model, and also run the standard
    # prompt-tuning warmup so the report compares both methods.
    ft_cfg = warmup_config(cfg, FINE_TUNING)
    tuned, ft_trace = finetune_warmup(bundle.model, bundle.codebook, train_tasks, ft_cfg, layout, log=True)
    save_checkpoint(tuned, bundle.codebook, None, tuned.config, run.register("finetuned.ckpt"))
    write_trace_csv(ft_trace, run.register("finetune_loss.csv"))

    pt_cfg = warmup_config(cfg, PROMPT_TUNING)
    bank, pt_trace = warmup_train(bundle.model, bundle.codebook, train_tasks, pt_cfg, layout, log=True)
    save_checkpoint(bundle.model, bundle.codebook, bank, bundle.model.config, run.register("prompts.ckpt"))
    write_trace_csv(pt_trace, run.register("warmup_loss.csv"))

    eval_kw = dict(
        codebook=bundle.codebook, layout=layout, n_demos=cfg.n_demos,
        utt_len=cfg.utt_len, group=cfg.group,
    )
    all_tasks = train_tasks + test_tasks
    rows = ["group,task_id,split,method,accuracy_mean,accuracy_std"]
    pt_reports = ev.eval_accuracy(
        bundle.model, bank, all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed,
        method=PROMPT_TUNING, **eval_kw,
    )
    ft_reports = ev.eval_accuracy(
        tuned, None, all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed,
        method=FINE_TUNING, **eval_kw,
    )
    for r in pt_reports + ft_reports:
        rows.append(f"{r.group},{r.task_id},{r.split},{r.method},{r.accuracy_mean:.6f},{r.accuracy_std:.6f}")
    run.write_text("table4_analog.csv", "\n".join(rows) + "\n")
    run.finish()
    print(f"warmup (fine_tuning): wrote {run.path('finetuned.ckpt')} and table4_analog.csv")
    return 0


def _load_prompts(cfg: RunConfig) -> PromptBank | None:
    if not cfg.prompts:
        return None
    bundle = load_checkpoint(cfg.prompts)
    if bundle.prompts is None:
        raise ConfigError(f"{cfg.prompts} contains no prompt tensors")
    return bundle.prompts


def cmd_eval(cfg: RunConfig, config_path: str | None) -> int:
    bundle = _load_bundle(cfg.checkpoint, "checkpoint")
    prompts = _load_prompts(cfg)
    inputs = [p for p in (config_path, cfg.checkpoint, cfg.prompts) if p]
    run = RunDir(cfg, inputs)
    train_tasks, test_tasks = build_tasks(cfg)
    layout = vocab_layout(cfg)
    if bundle.codebook is None:
        raise ConfigError("checkpoint has no codebook; run pretrain first")
    all_tasks = train_tasks + test_tasks
    kw = dict(
        codebook=bundle.codebook, layout=layout, n_demos=cfg.n_demos,
        utt_len=cfg.utt_len, group=cfg.group,
    )

    reports: list[ev.EvalReport] = []
    if prompts is not None:
        reports += ev.eval_accuracy(
            bundle.model, prompts, all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed, **kw
        )
    reports += ev.eval_accuracy(
        bundle.model, None, all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed, **kw
    )
    reports += ev.random_baseline_reports(
        all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed, **kw
    )
    reports += ev.linear_clf_reports(
        all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed, **kw
    )
    ev.write_reports_csv(reports, run.register("table1_analog.csv"))

    # Guessing-rate summary by split (the Table-2 analog).
    lines = ["group,split,method,guessing_rate"]
    for split in (ev.TRAIN_SPLIT, ev.TEST_SPLIT):
        for method in ((ev.WITH_WARMUP,) if prompts is not None else ()) + (ev.WITHOUT_WARMUP,):
            vals = [r.guessing_rate for r in reports if r.split == split and r.method == method]
            if vals:
                lines.append(f"{cfg.group},{split},{method},{float(np.mean(vals)):.6f}")
    run.write_text("table2_analog.csv", "\n".join(lines) + "\n")

    # Constrained-decoding accuracy (argmax restricted to the label region),
    # reported alongside the headline unconstrained numbers.
    constrained: list[ev.EvalReport] = []
    if prompts is not None:
        constrained += ev.eval_accuracy(
            bundle.model, prompts, all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed,
            constrain_to_labels=True, **kw,
        )
    constrained += ev.eval_accuracy(
        bundle.model, None, all_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed,
        constrain_to_labels=True, **kw,
    )
    ev.write_reports_csv(constrained, run.register("table1_constrained.csv"))
    run.finish()
    print(f"eval: wrote {run.path('table1_analog.csv')}")
    return 0


def cmd_attention(cfg: RunConfig, config_path: str | None) -> int:
    bundle = _load_bundle(cfg.checkpoint, "checkpoint")
    prompts = _load_prompts(cfg)
    inputs = [p for p in (config_path, cfg.checkpoint, cfg.prompts) if p]
    run = RunDir(cfg, inputs)
    _, test_tasks = build_tasks(cfg)
    layout = vocab_layout(cfg)
    if bundle.codebook is None:
        raise ConfigError("checkpoint has no codebook; run pretrain first")
    episodes = []
    per_task = max(1, cfg.attention_episodes // max(1, len(test_tasks)))
    for task in test_tasks:
        episodes += ev.sample_eval_episodes(
            task, per_task, 0, cfg.seed,
            codebook=bundle.codebook, layout=layout, n_demos=cfg.n_demos, utt_len=cfg.utt_len,
        )
    profile = ev.attention_profile(bundle.model, prompts, episodes, layout=layout)
    ev.write_attention_csv(profile, run.register("attention_profile.csv"))
    ev.write_attention_pgm(profile, run.register("attention_profile.pgm"))
    run.finish()
    print(f"attention: wrote {run.path('attention_profile.csv')}")
    return 0


def cmd_ablate_length(cfg: RunConfig, config_path: str | None) -> int:
    bundle = _load_bundle(cfg.checkpoint, "checkpoint")
    inputs = [p for p in (config_path, cfg.checkpoint) if p]
    run = RunDir(cfg, inputs)
    train_tasks, test_tasks = build_tasks(cfg)
    layout = vocab_layout(cfg)
    if bundle.codebook is None:
        raise ConfigError("checkpoint has no codebook; run pretrain first")
    try:
        lengths: list[int | None] = [int(x) for x in cfg.ablate_lengths.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse ablate_lengths {cfg.ablate_lengths!r}") from exc
    if cfg.ablate_not_fixed:
        lengths.append(None)

    rows = ["group,task_id,split,length,accuracy_mean,accuracy_std"]
    for L in lengths:
        wcfg = warmup_config(cfg, PROMPT_TUNING, utt_len=L)
        bank, _ = warmup_train(bundle.model, bundle.codebook, train_tasks, wcfg, layout, log=True)
        reports = ev.eval_accuracy(
            bundle.model, bank, test_tasks, cfg.eval_episodes, cfg.eval_repeats, cfg.seed,
            codebook=bundle.codebook, layout=layout, n_demos=cfg.n_demos,
            utt_len=L, utt_len_range=None if L is not None else utt_len_range(cfg),
            group=cfg.group,
        )
        label = "not_fixed" if L is None else str(L)
        for r in reports:
            rows.append(f"{r.group},{r.task_id},{r.split},{label},{r.accuracy_mean:.6f},{r.accuracy_std:.6f}")
    run.write_text("table3_analog.csv", "\n".join(rows) + "\n")
    run.finish()
    print(f"ablate-length: wrote {run.path('table3_analog.csv')}")
    return 0


# ---------------------------------------------------------------------------
# Entry point

_COMMANDS = {
    "pretrain": cmd_pretrain,
    "warmup": cmd_warmup,
    "eval": cmd_eval,
    "attention": cmd_attention,
    "ablate-length": cmd_ablate_length,
}


def _parse_overrides(extra: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--") or i + 1 >= len(extra):
            raise ConfigError(f"overrides must come as '--key value' pairs, got {extra[i:]!r}")
        overrides[tok[2:].replace("-", "_")] = extra[i + 1]
        i += 2
    return overrides


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="uniticl", description=__doc__)
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", default=None, help="path to a key=value config file")
    parser.add_argument("--seed", default=None, help="override the run seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    args, extra = parser.parse_known_args(argv)

    try:
        overrides = _parse_overrides(extra)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        cfg = resolve_config(args.config, overrides)
        return _COMMANDS[args.command](cfg, args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 4
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
