"""Warmup hyperparameter sweep against a cached pretrained checkpoint."""

import argparse
import pathlib
import time

import numpy as np

import uniticl as u
from uniticl.checkpoint import load_checkpoint, save_checkpoint
from uniticl.cli import RunConfig, build_pretrain_corpus, build_tasks, episode_length, lm_config, vocab_layout
from uniticl.lm import loss_and_grads
from uniticl.optim import Adam, clip_global_norm, warmup_lr
from uniticl.tasks import fit_task_codebook
from uniticl.train import WarmupConfig, _episode_batch, calibrate_label_embeddings, init_prompts
from uniticl import evaluate as ev

p = argparse.ArgumentParser()
p.add_argument("--pretrain-steps", type=int, default=1500)
p.add_argument("--steps", type=int, default=700)
p.add_argument("--probe-every", type=int, default=175)
p.add_argument("--lrs", type=str, default="0.01")
p.add_argument("--init-std", type=float, default=0.02)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--ckpt", type=str, default="/root/notes/cal_model.ckpt")
p.add_argument("--fresh", action="store_true")
args = p.parse_args()

cfg = RunConfig(seed=args.seed, k_units=32, utt_len=20, n_demos=4, max_seq_len=160,
                pretrain_steps=args.pretrain_steps)
layout = vocab_layout(cfg)
train_tasks, test_tasks = build_tasks(cfg)
t0 = time.time()

ckpt = pathlib.Path(args.ckpt)
if ckpt.exists() and not args.fresh:
    bundle = load_checkpoint(ckpt)
    model, codebook = bundle.model, bundle.codebook
    print(f"[{time.time()-t0:5.0f}s] loaded cached pretrain from {ckpt}", flush=True)
else:
    codebook = fit_task_codebook(train_tasks, cfg.k_units, d_feat=cfg.d_feat,
                                 frames_per_class=cfg.codebook_frames_per_class, seed=cfg.seed)
    corpus = build_pretrain_corpus(train_tasks, codebook, cfg)
    model = u.init_model(lm_config(cfg), seed=cfg.seed)
    model, trace = u.pretrain(model, corpus, cfg.pretrain_steps, batch_size=cfg.pretrain_batch,
                              seq_len=episode_length(cfg), lr=cfg.pretrain_lr, seed=cfg.seed)
    save_checkpoint(model, codebook, None, model.config, ckpt)
    print(f"[{time.time()-t0:5.0f}s] pretrained: ce {trace[0]:.3f} -> {np.mean(trace[-50:]):.3f}; cached", flush=True)

model = calibrate_label_embeddings(model, layout, seed=cfg.seed)


def probe(bank, n_eps=60):
    out = {}
    for name, tasks in (("train", train_tasks), ("test", test_tasks)):
        reports = ev.eval_accuracy(model, bank, tasks, n_eps, 1, 999,
                                   codebook=codebook, layout=layout,
                                   n_demos=cfg.n_demos, utt_len=cfg.utt_len)
        out[name] = (float(np.mean([r.accuracy_mean for r in reports])),
                     float(np.mean([r.guessing_rate for r in reports])))
    return out


for lr in [float(x) for x in args.lrs.split(",")]:
    print(f"=== warmup lr={lr} init_std={args.init_std} ===", flush=True)
    wc = WarmupConfig(steps=args.steps, batch_size=32, lr=lr, seed=cfg.seed,
                      n_demos=cfg.n_demos, utt_len=cfg.utt_len)
    bank = init_prompts(model, cfg.prompt_len, seed=cfg.seed)
    if args.init_std != 0.02:
        scale = args.init_std / 0.02
        for name, t in bank.tensors.items():
            if name.startswith("prompt."):
                t *= scale
    opt = Adam(bank.tensors, lr=lr)
    losses = []
    for step in range(args.steps):
        tokens, positions, targets = _episode_batch(train_tasks, wc, codebook, layout, step)
        loss, grads = loss_and_grads(model, tokens, bank, positions, targets, wrt="prompts_only")
        clip_global_norm(grads, wc.clip_norm)
        opt.step(bank.tensors, grads, lr_scale=warmup_lr(step, wc.lr_warmup_steps))
        losses.append(loss)
        if (step + 1) % args.probe_every == 0:
            pr = probe(bank)
            print(f"[{time.time()-t0:5.0f}s] step {step+1:5d} ce {np.mean(losses[-50:]):.3f} "
                  f"| train acc {pr['train'][0]:.3f} guess {pr['train'][1]:.3f} "
                  f"| test acc {pr['test'][0]:.3f} guess {pr['test'][1]:.3f}", flush=True)
