"""Tests for the miniature causal transformer."""

import numpy as np
import pytest

import uniticl as u
from conftest import TINY_K, tiny_lm_config
from uniticl.lm import (
    ConfigError,
    MalformedEpisodeError,
    forward_batch,
    mean_next_token_loss,
    model_n_params,
    predict_labels_batch,
    validate_episode_layout,
    weights_sha256,
)


def rand_tokens(rng, cfg, n, t):
    return rng.integers(0, cfg.vocab_size, size=(n, t))


class TestInit:
    def test_bitwise_deterministic(self):
        cfg = tiny_lm_config()
        a = u.init_model(cfg, seed=5)
        b = u.init_model(cfg, seed=5)
        assert weights_sha256(a) == weights_sha256(b)

    def test_divisibility_error(self):
        with pytest.raises(ConfigError, match="divisible"):
            tiny_lm_config(d_model=12, n_heads=5)

    def test_bad_dtype(self):
        with pytest.raises(ConfigError):
            tiny_lm_config(dtype="f16")

    def test_fresh_init_loss_near_uniform(self):
        cfg = tiny_lm_config()
        model = u.init_model(cfg, seed=0)
        rng = np.random.default_rng(0)
        loss = mean_next_token_loss(model, rand_tokens(rng, cfg, 8, 24))
        assert abs(loss - np.log(cfg.vocab_size)) < 0.1 * np.log(cfg.vocab_size)

    def test_param_count_reported(self):
        model = u.init_model(tiny_lm_config(), seed=0)
        assert model_n_params(model) == sum(v.size for v in model.tensors.values())


class TestForward:
    def test_attention_rows_normalized(self, tiny_model):
        rng = np.random.default_rng(1)
        for trial in range(5):
            toks = rand_tokens(rng, tiny_model.config, 1, 17)[0]
            trace = u.forward(tiny_model, toks)
            sums = trace.attentions.sum(axis=-1)
            assert np.all(np.abs(sums - 1.0) <= 1e-5)
            assert np.all(trace.attentions >= 0.0)

    def test_causal_mask_zeroes_future(self, tiny_model):
        toks = np.arange(10) % tiny_model.config.vocab_size
        trace = u.forward(tiny_model, toks)
        L, H, T, _ = trace.attentions.shape
        for t in range(T):
            assert np.all(trace.attentions[:, :, t, t + 1 :] == 0.0)

    def test_causality_bitwise(self, tiny_model):
        rng = np.random.default_rng(2)
        cfg = tiny_model.config
        for trial in range(10):
            toks = rand_tokens(rng, cfg, 1, 16)[0]
            j = int(rng.integers(1, 16))
            before = u.forward(tiny_model, toks).logits
            mutated = toks.copy()
            mutated[j] = (mutated[j] + 1) % cfg.vocab_size
            after = u.forward(tiny_model, mutated).logits
            assert np.array_equal(before[:j], after[:j])
            assert not np.array_equal(before[j:], after[j:])

    def test_empty_prefix_identity(self, tiny_model):
        bank = u.init_prompts(tiny_model, prompt_len=0, seed=0)
        toks = np.arange(12) % tiny_model.config.vocab_size
        plain = u.forward(tiny_model, toks).logits
        with_bank = u.forward(tiny_model, toks, bank).logits
        assert np.array_equal(plain, with_bank)

    def test_prompt_positions_attendable(self, tiny_model):
        bank = u.init_prompts(tiny_model, prompt_len=3, seed=1)
        toks = np.arange(8) % tiny_model.config.vocab_size
        trace = u.forward(tiny_model, toks, bank)
        assert trace.attentions.shape[-1] == 3 + 8
        assert trace.prompt_len == 3
        # even the first query reaches the prompt keys
        assert trace.attentions[:, :, 0, :3].sum() > 0.0

    def test_input_validation(self, tiny_model):
        cfg = tiny_model.config
        with pytest.raises(ValueError, match="max_seq_len"):
            u.forward(tiny_model, np.zeros(cfg.max_seq_len + 1, dtype=int))
        with pytest.raises(ValueError, match="range"):
            u.forward(tiny_model, np.array([0, cfg.vocab_size]))
        with pytest.raises(ValueError, match="empty"):
            u.forward(tiny_model, np.array([], dtype=int))


class TestLossCe:
    def test_uniform_logits(self):
        trace = u.ForwardTrace(logits=np.zeros((3, 114)), attentions=np.zeros((1, 1, 3, 3)), prompt_len=0)
        assert u.loss_ce(trace, 1, 7) == pytest.approx(np.log(114.0), abs=1e-9)
        assert u.loss_ce(trace, 1, 7) == pytest.approx(4.7362, abs=5e-4)

    def test_saturated_target(self):
        logits = np.zeros((2, 10))
        logits[0, 4] = 1e6
        trace = u.ForwardTrace(logits=logits, attentions=np.zeros((1, 1, 2, 2)), prompt_len=0)
        assert u.loss_ce(trace, 0, 4) == pytest.approx(0.0, abs=1e-9)

    def test_matches_f64_logsumexp_oracle(self, tiny_model):
        rng = np.random.default_rng(4)
        toks = rand_tokens(rng, tiny_model.config, 1, 9)[0]
        trace = u.forward(tiny_model, toks)
        for pos in (0, 4, 8):
            row = trace.logits[pos].astype(np.float64)
            target = int(rng.integers(0, row.shape[0]))
            oracle = float(np.log(np.exp(row - row.max()).sum()) + row.max() - row[target])
            assert u.loss_ce(trace, pos, target) == pytest.approx(oracle, rel=1e-5)

    def test_index_errors(self):
        trace = u.ForwardTrace(logits=np.zeros((3, 10)), attentions=np.zeros((1, 1, 3, 3)), prompt_len=0)
        with pytest.raises(ValueError):
            u.loss_ce(trace, 3, 0)
        with pytest.raises(ValueError):
            u.loss_ce(trace, 0, 10)


def constant_logit_model(target_rows: dict[int, float], vocab=None, seed=0):
    """A model whose final-layer norm is zeroed so every position's logits
    equal beta @ E^T; row boosts make the logits controllable exactly."""
    cfg = tiny_lm_config()
    model = u.init_model(cfg, seed=seed)
    model.tensors["final_ln.gamma"][:] = 0.0
    beta = np.zeros(cfg.d_model, dtype=np.float32)
    beta[0] = 1.0
    model.tensors["final_ln.beta"][:] = beta
    emb = model.tensors["embed.tok"]
    emb[:, 0] = 0.0
    for tok, value in target_rows.items():
        emb[tok, 0] = value
    return model


class TestPredictLabel:
    def episode_tokens(self, cfg, n=2, L=3):
        layout_len = n * (L + 3) + L + 1
        toks = np.zeros(layout_len, dtype=np.int64)
        sep = cfg.sep_token
        pos = 0
        for i in range(n):
            toks[pos : pos + L] = 1
            toks[pos + L] = sep
            toks[pos + L + 1] = TINY_K + i  # label region
            toks[pos + L + 2] = sep
            pos += L + 3
        toks[pos : pos + L] = 1
        toks[pos + L] = sep
        return toks

    def test_forced_one_hot(self):
        model = constant_logit_model({7: 50.0})
        toks = self.episode_tokens(model.config)
        assert u.predict_label(model, None, toks) == 7

    def test_tie_breaks_low(self):
        model = constant_logit_model({12: 50.0, 14: 50.0})
        toks = self.episode_tokens(model.config)
        assert u.predict_label(model, None, toks) == 12

    def test_malformed_layout_rejected(self, tiny_model):
        cfg = tiny_model.config
        good = self.episode_tokens(cfg)
        u.predict_label(tiny_model, None, good)  # sanity: does not raise
        with pytest.raises(MalformedEpisodeError):
            u.predict_label(tiny_model, None, good[:-1])  # no trailing separator
        bad = good.copy()
        bad[1] = cfg.sep_token  # stray separator inside an utterance
        with pytest.raises(MalformedEpisodeError):
            u.predict_label(tiny_model, None, bad)
        with pytest.raises(MalformedEpisodeError):
            u.predict_label(tiny_model, None, np.array([1, 2, 3, cfg.sep_token]))

    def test_untrained_model_guessing_is_low(self, tiny_model, tiny_layout):
        rng = np.random.default_rng(0)
        hits = 0
        n = 300
        toks = np.stack([self.episode_tokens(tiny_model.config) for _ in range(n)])
        for row in range(n):
            utt = rng.integers(0, TINY_K, size=toks.shape[1])
            mask = toks[row] < TINY_K
            toks[row, mask] = utt[mask]
        preds = predict_labels_batch(tiny_model, None, toks)
        labels = {TINY_K, TINY_K + 1}
        hits = sum(1 for p in preds if int(p) in labels)
        assert hits / n < 0.5

    def test_batch_matches_single(self, tiny_model):
        toks = np.stack([self.episode_tokens(tiny_model.config) for _ in range(4)])
        batch = predict_labels_batch(tiny_model, None, toks)
        singles = [u.predict_label(tiny_model, None, toks[i]) for i in range(4)]
        assert batch.tolist() == singles


class TestValidateLayout:
    def test_round_trip_with_assemble(self, tiny_layout):
        demos = [u.Demonstration(np.array([1, 2, 3]), tiny_layout.label_base)] * 2
        ep = u.Episode(demos=demos, target_utterance=np.array([4, 5, 6]),
                       target_label_token=tiny_layout.label_base, mode="warmup",
                       task_id="t", position_groups=[], length=3)
        tokens, _ = u.assemble(ep, tiny_layout.sep)
        n, L = validate_episode_layout(tokens, tiny_layout.sep)
        assert (n, L) == (2, 3)

    def test_wrong_count_rejected(self, tiny_layout):
        with pytest.raises(MalformedEpisodeError):
            validate_episode_layout(np.array([1, 2, tiny_layout.sep, 5, tiny_layout.sep]), tiny_layout.sep)


class TestPretrain:
    def corpus(self, cfg, n=30, t=40):
        rng = np.random.default_rng(7)
        return [rng.integers(0, TINY_K, size=t) for _ in range(n)]

    def test_zero_steps_bitwise_unchanged(self, tiny_model):
        out, trace = u.pretrain(tiny_model, self.corpus(tiny_model.config), 0)
        assert trace == []
        assert weights_sha256(out) == weights_sha256(tiny_model)
        assert out is not tiny_model

    def test_empty_corpus_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="empty corpus"):
            u.pretrain(tiny_model, [], 5, seq_len=20)

    def test_loss_decreases_below_uniform(self):
        cfg = tiny_lm_config()
        model = u.init_model(cfg, seed=0)
        # structured corpus: repeated blocks are predictable
        rng = np.random.default_rng(1)
        block = rng.integers(0, TINY_K, size=10)
        corpus = [np.tile(block, 6) for _ in range(10)]
        out, trace = u.pretrain(model, corpus, 120, batch_size=8, seq_len=30, lr=3e-3, seed=0)
        assert np.mean(trace[-10:]) < np.log(cfg.vocab_size) * 0.8

    def test_deterministic(self, tiny_model):
        corpus = self.corpus(tiny_model.config)
        a, ta = u.pretrain(tiny_model, corpus, 12, batch_size=4, seq_len=20, seed=3)
        b, tb = u.pretrain(tiny_model, corpus, 12, batch_size=4, seq_len=20, seed=3)
        assert ta == tb
        assert weights_sha256(a) == weights_sha256(b)

    def test_seq_len_must_fit(self, tiny_model):
        with pytest.raises(ValueError, match="max_seq_len"):
            u.pretrain(tiny_model, self.corpus(tiny_model.config), 1, seq_len=99)
