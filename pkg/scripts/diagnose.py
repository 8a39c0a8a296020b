"""Diagnostics: which warmup variants can learn the episode task at all."""

import argparse
import time

import numpy as np

import uniticl as u
from uniticl.checkpoint import load_checkpoint
from uniticl.cli import RunConfig, build_tasks, vocab_layout
from uniticl.lm import loss_and_grads
from uniticl.optim import Adam, clip_global_norm, warmup_lr
from uniticl.train import WarmupConfig, _episode_batch, calibrate_label_embeddings, init_prompts
from uniticl import evaluate as ev

p = argparse.ArgumentParser()
p.add_argument("--mode", choices=["finetune", "prompts", "prompts_negunit"], required=True)
p.add_argument("--steps", type=int, default=400)
p.add_argument("--lr", type=float, default=1e-2)
p.add_argument("--clip", type=float, default=1.0)
p.add_argument("--probe-every", type=int, default=100)
args = p.parse_args()

cfg = RunConfig(seed=0, k_units=32, utt_len=20, n_demos=4, max_seq_len=160)
layout = vocab_layout(cfg)
train_tasks, test_tasks = build_tasks(cfg)
bundle = load_checkpoint("/root/notes/cal_model.ckpt")
model, codebook = bundle.model, bundle.codebook
model = calibrate_label_embeddings(model, layout, seed=cfg.seed)

if args.mode == "prompts_negunit":
    # map each label row onto the negation of a distinct trained unit row,
    # rescaled to unit RMS: keeps labels inside the span the pretrained
    # copy circuits know how to move around
    emb = model.tensors["embed.tok"]
    rng = np.random.default_rng(123)
    picks = rng.choice(cfg.k_units, size=layout.n_labels, replace=False)
    unit_rms = float(np.sqrt((emb[: cfg.k_units] ** 2).sum(axis=1).mean()))
    for j, lab in enumerate(layout.label_tokens()):
        row = -emb[picks[j]]
        emb[lab] = row * (unit_rms / max(1e-9, float(np.sqrt((row**2).sum()))))

t0 = time.time()


def probe(bank, tuned=None, n=60):
    m = tuned if tuned is not None else model
    out = {}
    for name, tasks in (("train", train_tasks), ("test", test_tasks)):
        rep = ev.eval_accuracy(m, bank, tasks, n, 1, 999, codebook=codebook, layout=layout,
                               n_demos=cfg.n_demos, utt_len=cfg.utt_len)
        out[name] = (float(np.mean([r.accuracy_mean for r in rep])),
                     float(np.mean([r.guessing_rate for r in rep])))
    return out


wc = WarmupConfig(steps=args.steps, batch_size=32, lr=args.lr, seed=0,
                  n_demos=cfg.n_demos, utt_len=cfg.utt_len, clip_norm=args.clip)

if args.mode == "finetune":
    tuned = model.copy()
    opt = Adam(tuned.tensors, lr=args.lr)
    bank = None
    losses = []
    for step in range(args.steps):
        tokens, positions, targets = _episode_batch(train_tasks, wc, codebook, layout, step)
        loss, grads = loss_and_grads(tuned, tokens, None, positions, targets, wrt="full_model")
        clip_global_norm(grads, args.clip)
        opt.step(tuned.tensors, grads, lr_scale=warmup_lr(step, 100))
        losses.append(loss)
        if (step + 1) % args.probe_every == 0:
            pr = probe(None, tuned)
            print(f"[{time.time()-t0:5.0f}s] step {step+1:4d} ce {np.mean(losses[-30:]):.3f} "
                  f"| train {pr['train']} | test {pr['test']}", flush=True)
else:
    bank = init_prompts(model, cfg.prompt_len, seed=0)
    opt = Adam(bank.tensors, lr=args.lr)
    losses = []
    for step in range(args.steps):
        tokens, positions, targets = _episode_batch(train_tasks, wc, codebook, layout, step)
        loss, grads = loss_and_grads(model, tokens, bank, positions, targets, wrt="prompts_only")
        clip_global_norm(grads, args.clip)
        opt.step(bank.tensors, grads, lr_scale=warmup_lr(step, 100))
        losses.append(loss)
        if (step + 1) % args.probe_every == 0:
            pr = probe(bank)
            print(f"[{time.time()-t0:5.0f}s] step {step+1:4d} ce {np.mean(losses[-30:]):.3f} "
                  f"| train {pr['train']} | test {pr['test']}", flush=True)
print("done")
