"""Desk-preset calibration run: pretrain -> warmup -> eval, with progress
probes. Not part of the package; used to pin the preset that the
acceptance suite runs."""

import argparse
import time

import numpy as np

import uniticl as u
from uniticl.cli import RunConfig, build_pretrain_corpus, build_tasks, episode_length, lm_config, vocab_layout
from uniticl.tasks import fit_task_codebook
from uniticl.train import WarmupConfig, warmup_train
from uniticl import evaluate as ev

p = argparse.ArgumentParser()
p.add_argument("--pretrain-steps", type=int, default=1500)
p.add_argument("--warmup-steps", type=int, default=2000)
p.add_argument("--warmup-lr", type=float, default=1e-3)
p.add_argument("--eval-episodes", type=int, default=200)
p.add_argument("--eval-repeats", type=int, default=5)
p.add_argument("--probe-every", type=int, default=250)
p.add_argument("--seed", type=int, default=0)
p.add_argument("--noise", type=float, default=0.05)
p.add_argument("--corpus-sequences", type=int, default=600)
p.add_argument("--repeat-prob", type=float, default=0.25)
args = p.parse_args()

cfg = RunConfig(
    seed=args.seed, k_units=32, utt_len=20, n_demos=4, max_seq_len=160,
    noise_rate=args.noise, corpus_sequences=args.corpus_sequences,
    corpus_repeat_prob=args.repeat_prob,
    pretrain_steps=args.pretrain_steps, warmup_steps=args.warmup_steps,
    warmup_lr=args.warmup_lr,
)
layout = vocab_layout(cfg)
train_tasks, test_tasks = build_tasks(cfg)
t_start = time.time()

codebook = fit_task_codebook(train_tasks, cfg.k_units, d_feat=cfg.d_feat,
                             frames_per_class=cfg.codebook_frames_per_class, seed=cfg.seed)
corpus = build_pretrain_corpus(train_tasks, codebook, cfg)
print(f"[{time.time()-t_start:6.0f}s] corpus: {sum(len(c) for c in corpus)} tokens", flush=True)

model = u.init_model(lm_config(cfg), seed=cfg.seed)
model, trace = u.pretrain(model, corpus, cfg.pretrain_steps, batch_size=cfg.pretrain_batch,
                          seq_len=episode_length(cfg), lr=cfg.pretrain_lr, seed=cfg.seed)
print(f"[{time.time()-t_start:6.0f}s] pretrain done: ce {trace[0]:.3f} -> "
      f"{np.mean(trace[-50:]):.3f} (ln V = {np.log(layout.size):.3f})", flush=True)


def probe(bank, n_eps=60):
    out = {}
    for name, tasks in (("train", train_tasks), ("test", test_tasks)):
        reports = ev.eval_accuracy(model, bank, tasks, n_eps, 1, 999,
                                   codebook=codebook, layout=layout,
                                   n_demos=cfg.n_demos, utt_len=cfg.utt_len)
        out[name] = (float(np.mean([r.accuracy_mean for r in reports])),
                     float(np.mean([r.guessing_rate for r in reports])))
    return out


wcfg = WarmupConfig(steps=args.probe_every, batch_size=cfg.warmup_batch, lr=cfg.warmup_lr,
                    seed=cfg.seed, n_demos=cfg.n_demos, utt_len=cfg.utt_len)
# manual warmup loop with probes: emulate one long run by chunked training
from uniticl.train import init_prompts, _episode_batch
from uniticl.optim import Adam, clip_global_norm, warmup_lr
from uniticl.lm import loss_and_grads

bank = init_prompts(model, cfg.prompt_len, seed=cfg.seed)
opt = Adam(bank.tensors, lr=args.warmup_lr)
full = WarmupConfig(steps=args.warmup_steps, batch_size=cfg.warmup_batch, lr=args.warmup_lr,
                    seed=cfg.seed, n_demos=cfg.n_demos, utt_len=cfg.utt_len)
losses = []
for step in range(args.warmup_steps):
    tokens, positions, targets = _episode_batch(train_tasks, full, codebook, layout, step)
    loss, grads = loss_and_grads(model, tokens, bank, positions, targets, wrt="prompts_only")
    clip_global_norm(grads, full.clip_norm)
    opt.step(bank.tensors, grads, lr_scale=warmup_lr(step, full.lr_warmup_steps))
    losses.append(loss)
    if (step + 1) % args.probe_every == 0:
        pr = probe(bank)
        print(f"[{time.time()-t_start:6.0f}s] step {step+1:5d} ce {np.mean(losses[-50:]):.3f} "
              f"| train acc {pr['train'][0]:.3f} guess {pr['train'][1]:.3f} "
              f"| test acc {pr['test'][0]:.3f} guess {pr['test'][1]:.3f}", flush=True)

print(f"[{time.time()-t_start:6.0f}s] final eval", flush=True)
all_tasks = train_tasks + test_tasks
kw = dict(codebook=codebook, layout=layout, n_demos=cfg.n_demos, utt_len=cfg.utt_len)
with_w = ev.eval_accuracy(model, bank, all_tasks, args.eval_episodes, args.eval_repeats, cfg.seed, **kw)
without = ev.eval_accuracy(model, None, all_tasks, args.eval_episodes, args.eval_repeats, cfg.seed, **kw)
rand = ev.random_baseline_reports(all_tasks, args.eval_episodes, args.eval_repeats, cfg.seed, **kw)
svc = ev.linear_clf_reports(all_tasks, args.eval_episodes, args.eval_repeats, cfg.seed, **kw)

print(f"{'task':<12} {'split':<12} {'warmup':>8} {'random':>8} {'no-warm':>8} {'svc':>8} {'guess_w':>8} {'guess_n':>8}")
for i, task in enumerate(all_tasks):
    print(f"{task.task_id:<12} {with_w[i].split:<12} {with_w[i].accuracy_mean:8.3f} "
          f"{rand[i].accuracy_mean:8.3f} {without[i].accuracy_mean:8.3f} {svc[i].accuracy_mean:8.3f} "
          f"{with_w[i].guessing_rate:8.3f} {without[i].guessing_rate:8.3f}")
for split in (ev.TRAIN_SPLIT, ev.TEST_SPLIT):
    ww = np.mean([r.accuracy_mean for r in with_w if r.split == split])
    rr = np.mean([r.accuracy_mean for r in rand if r.split == split])
    print(f"{split}: with_warmup-random margin = {ww-rr:+.3f}")
print(f"[{time.time()-t_start:6.0f}s] done")
