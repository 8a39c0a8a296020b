"""Miniature causal transformer over discrete tokens.

Decoder-only, pre-layer-norm blocks, learned absolute positional
embeddings, exact manual backpropagation, per-layer attention extraction,
and optional per-layer key/value prefixes (deep prompts). Parameters live
in a flat name -> ndarray dict so that checkpointing, optimizer state,
hashing, and finite-difference checks all share one tensor tree.

Prompt injection follows the prefix-tuning convention: each layer's
projected key/value sequences are prefixed with that layer's trainable
vectors. Prefix positions are attendable by every query, carry no
positional embedding, and produce no logits. When a prompt bank is
supplied, its separation-token embedding row replaces the model's own row
in both the input lookup and the tied output head, so the separator stays
trainable while the backbone is frozen.

forward / loss / gradient functions are pure: they never mutate the
parameter tree, so a frozen model can be shared across threads. Training
helpers copy their inputs and return new parameter sets.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

INIT_STD = 0.02


class ConfigError(ValueError):
    """Inconsistent model configuration."""


class MalformedEpisodeError(ValueError):
    """Token sequence is not a valid episode layout."""


@dataclass(frozen=True)
class LmConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 512
    max_seq_len: int = 512
    dtype: str = "f32"
    tied_output: bool = True

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be >= 2")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if min(self.d_model, self.n_layers, self.n_heads, self.d_ff, self.max_seq_len) < 1:
            raise ConfigError("all size fields must be >= 1")
        if self.dtype not in ("f32", "f64"):
            raise ConfigError("dtype must be 'f32' or 'f64'")

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.dtype == "f32" else np.float64)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def sep_token(self) -> int:
        # Layout convention: pad is the last id, separator the one before.
        return self.vocab_size - 2

    def to_json(self) -> str:
        return json.dumps(
            {
                "vocab_size": self.vocab_size,
                "d_model": self.d_model,
                "n_layers": self.n_layers,
                "n_heads": self.n_heads,
                "d_ff": self.d_ff,
                "max_seq_len": self.max_seq_len,
                "dtype": self.dtype,
                "tied_output": self.tied_output,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LmConfig":
        return cls(**json.loads(text))


@dataclass
class ModelParams:
    config: LmConfig
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class PromptBank:
    """Trainable per-layer key/value prefixes plus the separator embedding.

    Tensor names: "prompt.layer{i}.key" / "prompt.layer{i}.value", each
    (prompt_len, d_model) split into heads the same way as K/V, plus
    "embed.sep" (d_model,).
    """

    prompt_len: int
    sep_token: int
    tensors: dict[str, np.ndarray]

    def copy(self) -> "PromptBank":
        return PromptBank(self.prompt_len, self.sep_token, {k: v.copy() for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (seq_len, vocab)
    attentions: np.ndarray  # (n_layers, n_heads, seq_len, prompt_len + seq_len)
    prompt_len: int


def model_tensor_names(config: LmConfig) -> list[str]:
    names = ["embed.tok", "embed.pos"]
    for i in range(config.n_layers):
        p = f"layer{i}"
        names += [f"{p}.ln1.gamma", f"{p}.ln1.beta"]
        names += [f"{p}.attn.{w}" for w in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")]
        names += [f"{p}.ln2.gamma", f"{p}.ln2.beta"]
        names += [f"{p}.ff.w1", f"{p}.ff.b1", f"{p}.ff.w2", f"{p}.ff.b2"]
    names += ["final_ln.gamma", "final_ln.beta"]
    if not config.tied_output:
        names.append("head.w")
    return names


def init_model(config: LmConfig, seed: int) -> ModelParams:
    """Scaled-normal init (std 0.02; residual-writing projections scaled by
    1/sqrt(2 * n_layers)); deterministic under seed."""
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    d, dff, v = config.d_model, config.d_ff, config.vocab_size
    resid_std = INIT_STD / math.sqrt(2.0 * config.n_layers)

    def normal(shape, std=INIT_STD):
        return rng.normal(0.0, std, size=shape).astype(dt)

    t: dict[str, np.ndarray] = {}
    t["embed.tok"] = normal((v, d))
    t["embed.pos"] = normal((config.max_seq_len, d))
    for i in range(config.n_layers):
        p = f"layer{i}"
        t[f"{p}.ln1.gamma"] = np.ones(d, dtype=dt)
        t[f"{p}.ln1.beta"] = np.zeros(d, dtype=dt)
        t[f"{p}.attn.wq"] = normal((d, d))
        t[f"{p}.attn.bq"] = np.zeros(d, dtype=dt)
        t[f"{p}.attn.wk"] = normal((d, d))
        t[f"{p}.attn.bk"] = np.zeros(d, dtype=dt)
        t[f"{p}.attn.wv"] = normal((d, d))
        t[f"{p}.attn.bv"] = np.zeros(d, dtype=dt)
        t[f"{p}.attn.wo"] = normal((d, d), resid_std)
        t[f"{p}.attn.bo"] = np.zeros(d, dtype=dt)
        t[f"{p}.ln2.gamma"] = np.ones(d, dtype=dt)
        t[f"{p}.ln2.beta"] = np.zeros(d, dtype=dt)
        t[f"{p}.ff.w1"] = normal((d, dff))
        t[f"{p}.ff.b1"] = np.zeros(dff, dtype=dt)
        t[f"{p}.ff.w2"] = normal((dff, d), resid_std)
        t[f"{p}.ff.b2"] = np.zeros(d, dtype=dt)
    t["final_ln.gamma"] = np.ones(d, dtype=dt)
    t["final_ln.beta"] = np.zeros(d, dtype=dt)
    if not config.tied_output:
        t["head.w"] = normal((d, v))
    return ModelParams(config=config, tensors=t)


def model_n_params(model: ModelParams) -> int:
    return int(sum(v.size for v in model.tensors.values()))


def weights_sha256(model: ModelParams) -> str:
    """Digest of all backbone tensors (canonical name order)."""
    h = hashlib.sha256()
    for name in sorted(model.tensors):
        h.update(name.encode())
        h.update(model.tensors[name].tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Forward / backward core


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def _layer_norm_backward(dy: np.ndarray, gamma: np.ndarray, cache, want_params: bool = True):
    xhat, inv_std = cache
    if want_params:
        sum_axes = tuple(range(dy.ndim - 1))
        dgamma = (dy * xhat).sum(axis=sum_axes)
        dbeta = dy.sum(axis=sum_axes)
    else:
        dgamma = dbeta = None
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


_GELU_B = 1.702  # sigmoid-approximation constant


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid-approximation GELU, x * sigmoid(1.702 x).

    The sigmoid is evaluated branchlessly and stably through the identity
    sigmoid(z) = (1 + tanh(z/2)) / 2. Returns (gelu(x), sigmoid term) so
    the backward pass can reuse it.
    """
    s = np.tanh((0.5 * _GELU_B) * x)
    s += 1.0
    s *= 0.5
    return x * s, s


def _gelu_grad(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Exact derivative of the sigmoid-approximation GELU."""
    return s * (1.0 + _GELU_B * x * (1.0 - s))


def _split_heads_flat(x: np.ndarray, b: int, t: int, n_heads: int) -> np.ndarray:
    """(B*T, d) -> (B, H, T, dh), contiguous."""
    d = x.shape[-1]
    return np.ascontiguousarray(x.reshape(b, t, n_heads, d // n_heads).transpose(0, 2, 1, 3))


def _merge_heads_flat(x: np.ndarray) -> np.ndarray:
    """(B, H, T, dh) -> (B*T, d), contiguous."""
    b, h, t, dh = x.shape
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(b * t, h * dh)


def _bmm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stacked matmul over the leading batch/head axes."""
    return np.matmul(a, b)


def _effective_embedding(model: ModelParams, prompts: "PromptBank | None") -> np.ndarray:
    emb = model.tensors["embed.tok"]
    if prompts is None:
        return emb
    emb = emb.copy()
    emb[prompts.sep_token] = prompts.tensors["embed.sep"]
    return emb


def _validate_tokens(config: LmConfig, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ValueError("tokens must be a 1-D sequence or (batch, seq) matrix")
    if tokens.shape[1] < 1:
        raise ValueError("empty token sequence")
    if tokens.shape[1] > config.max_seq_len:
        raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {config.max_seq_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError("token id out of range")
    return tokens


def _forward_core(model: ModelParams, tokens: np.ndarray, prompts: "PromptBank | None", keep_cache: bool):
    """Batched forward pass.

    Returns (logits (B,T,V), list of per-layer attention probs, cache).
    Attention probs have shape (B,H,T,P+T); query t may attend all P prompt
    keys plus real keys 0..t. The cache is None unless keep_cache.
    """
    cfg = model.config
    t = model.tensors
    B, T = tokens.shape
    H, dh = cfg.n_heads, cfg.d_head
    plen = prompts.prompt_len if prompts is not None else 0
    scale = 1.0 / math.sqrt(dh)

    emb = _effective_embedding(model, prompts)
    # The residual stream is kept flat (B*T, d) so every projection runs as
    # one large GEMM; attention reshapes to (B, H, T, dh) views as needed.
    x = (emb[tokens] + t["embed.pos"][:T]).reshape(B * T, -1)

    # Additive mask: 0 on allowed keys (all prompt positions, causal real
    # positions), -inf elsewhere; exp of masked scores is exactly 0.
    mask_bias = np.zeros((T, plen + T), dtype=cfg.np_dtype)
    mask_bias[:, plen:][np.triu_indices(T, k=1)] = -np.inf

    caches: list[dict] = []
    attn_probs: list[np.ndarray] = []
    for i in range(cfg.n_layers):
        p = f"layer{i}"
        h, ln1_cache = _layer_norm(x, t[f"{p}.ln1.gamma"], t[f"{p}.ln1.beta"])
        q = _split_heads_flat(h @ t[f"{p}.attn.wq"] + t[f"{p}.attn.bq"], B, T, H)
        k = _split_heads_flat(h @ t[f"{p}.attn.wk"] + t[f"{p}.attn.bk"], B, T, H)
        v = _split_heads_flat(h @ t[f"{p}.attn.wv"] + t[f"{p}.attn.bv"], B, T, H)
        if plen > 0:
            pk = prompts.tensors[f"prompt.layer{i}.key"].reshape(plen, H, dh).transpose(1, 0, 2)
            pv = prompts.tensors[f"prompt.layer{i}.value"].reshape(plen, H, dh).transpose(1, 0, 2)
            k_full = np.concatenate([np.broadcast_to(pk, (B, H, plen, dh)), k], axis=2)
            v_full = np.concatenate([np.broadcast_to(pv, (B, H, plen, dh)), v], axis=2)
        else:
            k_full, v_full = k, v
        scores = _bmm(q, k_full.transpose(0, 1, 3, 2))
        scores *= scale
        scores += mask_bias
        scores -= scores.max(axis=-1, keepdims=True)
        probs = np.exp(scores, out=scores)
        probs /= probs.sum(axis=-1, keepdims=True)
        ctx = _merge_heads_flat(_bmm(probs, v_full))
        x = x + (ctx @ t[f"{p}.attn.wo"] + t[f"{p}.attn.bo"])
        h2, ln2_cache = _layer_norm(x, t[f"{p}.ln2.gamma"], t[f"{p}.ln2.beta"])
        u = h2 @ t[f"{p}.ff.w1"] + t[f"{p}.ff.b1"]
        gact, gelu_s = _gelu(u)
        x = x + (gact @ t[f"{p}.ff.w2"] + t[f"{p}.ff.b2"])
        attn_probs.append(probs)
        if keep_cache:
            caches.append(
                {
                    "h": h,
                    "ln1": ln1_cache,
                    "q": q,
                    "k_full": k_full,
                    "v_full": v_full,
                    "probs": probs,
                    "ctx": ctx,
                    "h2": h2,
                    "ln2": ln2_cache,
                    "u": u,
                    "gelu_s": gelu_s,
                    "gact": gact,
                }
            )

    xf, lnf_cache = _layer_norm(x, t["final_ln.gamma"], t["final_ln.beta"])
    logits = (xf @ emb.T if cfg.tied_output else xf @ t["head.w"]).reshape(B, T, -1)

    cache = None
    if keep_cache:
        cache = {
            "tokens": tokens,
            "prompts": prompts,
            "emb": emb,
            "layers": caches,
            "xf": xf,
            "lnf": lnf_cache,
        }
    return logits, attn_probs, cache


def _backward_core(model: ModelParams, cache: dict, dlogits: np.ndarray, wrt: str) -> dict[str, np.ndarray]:
    """Exact gradients from d(loss)/d(logits) down the cached forward pass.

    wrt="full_model": one entry per model tensor (the shadowed separator
    row of embed.tok gets zero gradient when prompts are attached).
    wrt="prompts_only": entries only for prompt prefixes and "embed.sep";
    no transformer tensor appears in the result.
    """
    if wrt not in ("full_model", "prompts_only"):
        raise ValueError("wrt must be 'full_model' or 'prompts_only'")
    cfg = model.config
    t = model.tensors
    tokens = cache["tokens"]
    prompts: PromptBank | None = cache["prompts"]
    emb = cache["emb"]
    B, T = tokens.shape
    H = cfg.n_heads
    plen = prompts.prompt_len if prompts is not None else 0
    scale = 1.0 / math.sqrt(cfg.d_head)
    want_model = wrt == "full_model"
    want_prompts = prompts is not None
    want_prompt_grads = want_prompts and wrt == "prompts_only"
    grads: dict[str, np.ndarray] = {}

    xf = cache["xf"]  # (B*T, d)
    dlog = dlogits.reshape(B * T, -1)
    dsep_head = None
    demb_head = None
    if cfg.tied_output:
        dxf = dlog @ emb
        if want_model:
            demb_head = dlog.T @ xf
        elif want_prompts:
            # Only the separator row of the tied head is trainable.
            dsep_head = dlog[:, prompts.sep_token] @ xf
    else:
        dxf = dlog @ t["head.w"].T
        if want_model:
            grads["head.w"] = xf.T @ dlog

    dx, dg, db = _layer_norm_backward(dxf, t["final_ln.gamma"], cache["lnf"], want_params=want_model)
    if want_model:
        grads["final_ln.gamma"] = dg
        grads["final_ln.beta"] = db

    for i in reversed(range(cfg.n_layers)):
        p = f"layer{i}"
        c = cache["layers"][i]
        # Feed-forward sublayer (x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2).
        dffo = dx
        dgact = dffo @ t[f"{p}.ff.w2"].T
        du = dgact * _gelu_grad(c["u"], c["gelu_s"])
        dh2 = du @ t[f"{p}.ff.w1"].T
        if want_model:
            grads[f"{p}.ff.w2"] = c["gact"].T @ dffo
            grads[f"{p}.ff.b2"] = dffo.sum(axis=0)
            grads[f"{p}.ff.w1"] = c["h2"].T @ du
            grads[f"{p}.ff.b1"] = du.sum(axis=0)
        dx_ln2, dg, db = _layer_norm_backward(dh2, t[f"{p}.ln2.gamma"], c["ln2"], want_params=want_model)
        if want_model:
            grads[f"{p}.ln2.gamma"] = dg
            grads[f"{p}.ln2.beta"] = db
        dx = dx + dx_ln2

        # Attention sublayer.
        dattn = dx
        dctx = dattn @ t[f"{p}.attn.wo"].T
        if want_model:
            grads[f"{p}.attn.wo"] = c["ctx"].T @ dattn
            grads[f"{p}.attn.bo"] = dattn.sum(axis=0)
        dctx_h = _split_heads_flat(dctx, B, T, H)
        probs = c["probs"]
        dprobs = _bmm(dctx_h, c["v_full"].transpose(0, 1, 3, 2))
        dv_full = _bmm(probs.transpose(0, 1, 3, 2), dctx_h)
        dscores = (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True)) * probs
        dq = _bmm(dscores, c["k_full"]) * scale
        dk_full = _bmm(dscores.transpose(0, 1, 3, 2), c["q"]) * scale
        if want_prompt_grads and plen > 0:
            grads[f"prompt.layer{i}.key"] = (
                dk_full[:, :, :plen].sum(axis=0).transpose(1, 0, 2).reshape(plen, cfg.d_model)
            )
            grads[f"prompt.layer{i}.value"] = (
                dv_full[:, :, :plen].sum(axis=0).transpose(1, 0, 2).reshape(plen, cfg.d_model)
            )
        dq_m = _merge_heads_flat(dq)
        dk_m = _merge_heads_flat(dk_full[:, :, plen:])
        dv_m = _merge_heads_flat(dv_full[:, :, plen:])
        dh = dq_m @ t[f"{p}.attn.wq"].T + dk_m @ t[f"{p}.attn.wk"].T + dv_m @ t[f"{p}.attn.wv"].T
        if want_model:
            hf = c["h"]
            grads[f"{p}.attn.wq"] = hf.T @ dq_m
            grads[f"{p}.attn.bq"] = dq_m.sum(axis=0)
            grads[f"{p}.attn.wk"] = hf.T @ dk_m
            grads[f"{p}.attn.bk"] = dk_m.sum(axis=0)
            grads[f"{p}.attn.wv"] = hf.T @ dv_m
            grads[f"{p}.attn.bv"] = dv_m.sum(axis=0)
        dx_ln1, dg, db = _layer_norm_backward(dh, t[f"{p}.ln1.gamma"], c["ln1"], want_params=want_model)
        if want_model:
            grads[f"{p}.ln1.gamma"] = dg
            grads[f"{p}.ln1.beta"] = db
        dx = dx + dx_ln1

    # Embedding tables. dx is now the gradient w.r.t. x0 = emb[tokens] + pos.
    if want_model:
        dtok = np.zeros_like(emb)
        np.add.at(dtok, tokens.reshape(-1), dx)
        if demb_head is not None:
            dtok += demb_head
        if want_prompts:
            dtok[prompts.sep_token] = 0.0  # shadowed by the bank's row
        dpos = np.zeros_like(t["embed.pos"])
        dpos[:T] = dx.reshape(B, T, -1).sum(axis=0)
        grads["embed.tok"] = dtok
        grads["embed.pos"] = dpos
    elif want_prompts:
        sep_mask = (tokens == prompts.sep_token).reshape(-1)
        dsep = dx[sep_mask].sum(axis=0)
        if dsep_head is not None:
            dsep = dsep + dsep_head
        grads["embed.sep"] = dsep.astype(cfg.np_dtype)

    if wrt == "prompts_only":
        grads = {k: v for k, v in grads.items() if k.startswith("prompt.") or k == "embed.sep"}
    return grads


# ---------------------------------------------------------------------------
# Public operations


def forward(model: ModelParams, tokens: np.ndarray, prompts: PromptBank | None = None) -> ForwardTrace:
    """Run one sequence through the model and return logits plus the full
    per-layer, per-head attention maps."""
    toks = _validate_tokens(model.config, tokens)
    if toks.shape[0] != 1:
        raise ValueError("forward takes a single sequence; use forward_batch for batches")
    logits, attn, _ = _forward_core(model, toks, prompts, keep_cache=False)
    plen = prompts.prompt_len if prompts is not None else 0
    return ForwardTrace(logits=logits[0], attentions=np.stack([a[0] for a in attn]), prompt_len=plen)


def forward_batch(model: ModelParams, tokens: np.ndarray, prompts: PromptBank | None = None) -> np.ndarray:
    """Batched logits, (B, T, vocab); no attention maps kept."""
    toks = _validate_tokens(model.config, tokens)
    logits, _, _ = _forward_core(model, toks, prompts, keep_cache=False)
    return logits


def loss_ce(trace: ForwardTrace, position: int, target_token: int) -> float:
    """Cross-entropy -log softmax(logits[position])[target]."""
    T, V = trace.logits.shape
    if not 0 <= position < T:
        raise ValueError(f"position {position} out of range for seq_len {T}")
    if not 0 <= target_token < V:
        raise ValueError(f"target token {target_token} out of range for vocab {V}")
    row = trace.logits[position]
    m = row.max()
    lse = m + np.log(np.exp(row - m).sum())
    return float(lse - row[target_token])


def loss_and_grads(
    model: ModelParams,
    tokens: np.ndarray,
    prompts: PromptBank | None,
    positions: np.ndarray,
    targets: np.ndarray,
    wrt: str,
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy at one position per sequence, plus its exact
    gradients for the selected parameter tree."""
    toks = _validate_tokens(model.config, tokens)
    B, T = toks.shape
    positions = np.asarray(positions, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if positions.shape != (B,) or targets.shape != (B,):
        raise ValueError("positions and targets must have one entry per sequence")
    if positions.min() < 0 or positions.max() >= T:
        raise ValueError("loss position out of range")
    if targets.min() < 0 or targets.max() >= model.config.vocab_size:
        raise ValueError("target token out of range")

    logits, _, cache = _forward_core(model, toks, prompts, keep_cache=True)
    rows = logits[np.arange(B), positions]
    m = rows.max(axis=1, keepdims=True)
    exps = np.exp(rows - m)
    denom = exps.sum(axis=1, keepdims=True)
    log_probs = (rows - m) - np.log(denom)
    loss = float(-log_probs[np.arange(B), targets].mean())

    drows = exps / denom
    drows[np.arange(B), targets] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[np.arange(B), positions] = drows / B
    grads = _backward_core(model, cache, dlogits, wrt)
    return loss, grads


def backward(
    model: ModelParams,
    tokens: np.ndarray,
    prompts: PromptBank | None,
    position: int,
    target: int,
    wrt: str = "full_model",
) -> dict[str, np.ndarray]:
    """Exact gradients of loss_ce(forward(...), position, target)."""
    toks = _validate_tokens(model.config, tokens)
    if toks.shape[0] != 1:
        raise ValueError("backward takes a single sequence")
    _, grads = loss_and_grads(model, toks, prompts, np.array([position]), np.array([target]), wrt)
    return grads


def next_token_loss_and_grads(
    model: ModelParams, tokens: np.ndarray, wrt: str = "full_model"
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean next-token cross-entropy over all positions of a batch."""
    toks = _validate_tokens(model.config, tokens)
    B, T = toks.shape
    if T < 2:
        raise ValueError("need sequences of length >= 2 for next-token loss")
    logits, _, cache = _forward_core(model, toks, None, keep_cache=True)
    pred = logits[:, :-1, :]
    tgt = toks[:, 1:]
    m = pred.max(axis=-1, keepdims=True)
    exps = np.exp(pred - m)
    denom = exps.sum(axis=-1, keepdims=True)
    log_probs = (pred - m) - np.log(denom)
    picked = np.take_along_axis(log_probs, tgt[:, :, None], axis=-1)[:, :, 0]
    loss = float(-picked.mean())

    n = B * (T - 1)
    dpred = exps / denom
    bidx = np.arange(B)[:, None]
    tidx = np.arange(T - 1)[None, :]
    dpred[bidx, tidx, tgt] -= 1.0
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1, :] = dpred / n
    grads = _backward_core(model, cache, dlogits, wrt)
    return loss, grads


def mean_next_token_loss(model: ModelParams, tokens: np.ndarray) -> float:
    """Forward-only variant of next_token_loss_and_grads."""
    toks = _validate_tokens(model.config, tokens)
    logits, _, _ = _forward_core(model, toks, None, keep_cache=False)
    pred = logits[:, :-1, :]
    tgt = toks[:, 1:]
    m = pred.max(axis=-1, keepdims=True)
    lse = m[:, :, 0] + np.log(np.exp(pred - m).sum(axis=-1))
    picked = np.take_along_axis(pred, tgt[:, :, None], axis=-1)[:, :, 0]
    return float((lse - picked).mean())


def validate_episode_layout(tokens: np.ndarray, sep_token: int) -> tuple[int, int]:
    """Check the interleaved demo/label layout; return (n_demos, utt_len).

    A valid layout has 2n+1 separator occurrences at the exact positions
    implied by n blocks of (utterance, sep, label, sep) followed by the
    target utterance and the final separator.
    """
    toks = np.asarray(tokens, dtype=np.int64).ravel()
    total = toks.shape[0]
    if total < 6 or toks[-1] != sep_token:
        raise MalformedEpisodeError("episode must end with the separation token")
    sep_positions = np.flatnonzero(toks == sep_token)
    if len(sep_positions) % 2 == 0 or len(sep_positions) < 3:
        raise MalformedEpisodeError("separator count does not match any demo layout")
    n = (len(sep_positions) - 1) // 2
    length = total - 1 - 3 * n
    if length % (n + 1) != 0:
        raise MalformedEpisodeError("token count does not fit n*(L+3)+L+1 for any L")
    L = length // (n + 1)
    if L < 1:
        raise MalformedEpisodeError("inferred utterance length < 1")
    expected = []
    for i in range(n):
        expected += [i * (L + 3) + L, i * (L + 3) + L + 2]
    expected.append(n * (L + 3) + L)
    if not np.array_equal(sep_positions, np.array(expected)):
        raise MalformedEpisodeError("separators not at the layout positions")
    return n, L


def predict_label(model: ModelParams, prompts: PromptBank | None, episode_tokens: np.ndarray) -> int:
    """Argmax over the full vocabulary of the logits at the final separator
    position; ties break to the lowest token id."""
    toks = _validate_tokens(model.config, episode_tokens)
    if toks.shape[0] != 1:
        raise ValueError("predict_label takes a single episode")
    validate_episode_layout(toks[0], model.config.sep_token)
    logits, _, _ = _forward_core(model, toks, prompts, keep_cache=False)
    return int(np.argmax(logits[0, -1]))


def predict_labels_batch(
    model: ModelParams,
    prompts: PromptBank | None,
    tokens: np.ndarray,
    positions: np.ndarray | None = None,
) -> np.ndarray:
    """Vectorized predict_label over a batch of assembled episodes.

    `positions` selects the logit row per sequence (defaults to the last
    position); layouts are assumed pre-validated by the episode builder.
    """
    toks = _validate_tokens(model.config, tokens)
    logits, _, _ = _forward_core(model, toks, prompts, keep_cache=False)
    if positions is None:
        rows = logits[:, -1, :]
    else:
        rows = logits[np.arange(toks.shape[0]), np.asarray(positions, dtype=np.int64)]
    return rows.argmax(axis=1)


def pretrain(
    model: ModelParams,
    corpus: list[np.ndarray],
    steps: int,
    *,
    batch_size: int = 16,
    seq_len: int = 128,
    lr: float = 3e-4,
    lr_warmup_steps: int = 100,
    clip_norm: float = 1.0,
    seed: int = 0,
) -> tuple[ModelParams, list[float]]:
    """Next-token pretraining with Adam on random windows of the packed
    corpus. Returns (updated params, per-step loss trace); the input model
    is left untouched."""
    from .optim import Adam, clip_global_norm, warmup_lr

    if steps < 0:
        raise ValueError("steps must be >= 0")
    model = model.copy()
    if steps == 0:
        return model, []
    if seq_len + 1 > model.config.max_seq_len:
        raise ValueError(f"seq_len {seq_len} leaves no room in max_seq_len {model.config.max_seq_len}")
    if not corpus:
        raise ValueError("empty corpus")
    stream = np.concatenate([np.asarray(c, dtype=np.int64).ravel() for c in corpus])
    if stream.shape[0] < seq_len + 1:
        raise ValueError(f"corpus too small: {stream.shape[0]} tokens for windows of {seq_len + 1}")
    if stream.min() < 0 or stream.max() >= model.config.vocab_size:
        raise ValueError("corpus token id out of range")

    rng = np.random.default_rng(seed)
    opt = Adam(model.tensors, lr=lr)
    trace: list[float] = []
    for step in range(steps):
        starts = rng.integers(0, stream.shape[0] - seq_len, size=batch_size)
        batch = np.stack([stream[s : s + seq_len + 1] for s in starts])
        loss, grads = next_token_loss_and_grads(model, batch, "full_model")
        clip_global_norm(grads, clip_norm)
        opt.step(model.tensors, grads, lr_scale=warmup_lr(step, lr_warmup_steps))
        trace.append(loss)
    return model, trace
