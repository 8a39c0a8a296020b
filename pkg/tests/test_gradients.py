"""Finite-difference verification of the analytic gradients.

Central differences at f64 on a tiny 2-layer, d_model=16 model; relative
error per coordinate must stay within 1e-4 (denominators floored at 1e-6
where both sides vanish).
"""

import numpy as np
import pytest

import uniticl as u
from conftest import fd_max_rel_err, tiny_lm_config
from uniticl.lm import loss_and_grads

TOL = 1e-4


@pytest.fixture(scope="module")
def setup():
    cfg = tiny_lm_config(dtype="f64")
    model = u.init_model(cfg, seed=3)
    bank = u.init_prompts(model, prompt_len=3, seed=4)
    # move the separator row off its pretrained value so the check runs at
    # a generic point
    bank.tensors["embed.sep"] += 0.01 * np.random.default_rng(7).standard_normal(cfg.d_model)
    rng = np.random.default_rng(11)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, 8))
    tokens[:, -1] = cfg.sep_token
    positions = np.array([7, 7])
    targets = np.array([3, 12])
    return model, bank, tokens, positions, targets


class TestFiniteDifferences:
    def test_full_model_without_prompts(self, setup):
        model, _, tokens, positions, targets = setup
        _, grads = loss_and_grads(model, tokens, None, positions, targets, wrt="full_model")
        assert set(grads) == set(model.tensors)
        err = fd_max_rel_err(model, model.tensors, grads, None, tokens, positions, targets,
                             "full_model", sample_per_tensor=48)
        assert err <= TOL

    def test_full_model_with_prompts_attached(self, setup):
        model, bank, tokens, positions, targets = setup
        _, grads = loss_and_grads(model, tokens, bank, positions, targets, wrt="full_model")
        assert set(grads) == set(model.tensors)
        err = fd_max_rel_err(model, model.tensors, grads, bank, tokens, positions, targets,
                             "full_model", sample_per_tensor=48)
        assert err <= TOL

    def test_prompts_only_every_coordinate(self, setup):
        model, bank, tokens, positions, targets = setup
        _, grads = loss_and_grads(model, tokens, bank, positions, targets, wrt="prompts_only")
        err = fd_max_rel_err(model, bank.tensors, grads, bank, tokens, positions, targets,
                             "prompts_only", sample_per_tensor=None)
        assert err <= TOL

    def test_prompts_only_excludes_transformer_weights(self, setup):
        model, bank, tokens, positions, targets = setup
        _, grads = loss_and_grads(model, tokens, bank, positions, targets, wrt="prompts_only")
        assert set(grads) == {"embed.sep"} | {
            f"prompt.layer{i}.{kv}" for i in range(model.config.n_layers) for kv in ("key", "value")
        }

    def test_untied_head_gradients(self):
        cfg = tiny_lm_config(dtype="f64", tied_output=False)
        model = u.init_model(cfg, seed=9)
        bank = u.init_prompts(model, prompt_len=2, seed=1)
        rng = np.random.default_rng(2)
        tokens = rng.integers(0, cfg.vocab_size, size=(1, 6))
        tokens[:, -1] = cfg.sep_token
        positions, targets = np.array([5]), np.array([4])
        _, g_full = loss_and_grads(model, tokens, None, positions, targets, wrt="full_model")
        assert "head.w" in g_full
        err = fd_max_rel_err(model, model.tensors, g_full, None, tokens, positions, targets,
                             "full_model", sample_per_tensor=40)
        assert err <= TOL
        _, g_p = loss_and_grads(model, tokens, bank, positions, targets, wrt="prompts_only")
        err = fd_max_rel_err(model, bank.tensors, g_p, bank, tokens, positions, targets,
                             "prompts_only", sample_per_tensor=None)
        assert err <= TOL

    def test_saturated_softmax_has_vanishing_gradient(self):
        cfg = tiny_lm_config(dtype="f64")
        model = u.init_model(cfg, seed=0)
        # force a huge margin on the target's tied embedding row
        model.tensors["final_ln.gamma"][:] = 0.0
        beta = np.zeros(cfg.d_model)
        beta[0] = 1.0
        model.tensors["final_ln.beta"][:] = beta
        model.tensors["embed.tok"][:, 0] = 0.0
        model.tensors["embed.tok"][4, 0] = 1e9
        bank = u.init_prompts(model, prompt_len=2, seed=0)
        tokens = np.array([[1, 2, 3, cfg.sep_token]])
        _, grads = loss_and_grads(model, tokens, bank, np.array([3]), np.array([4]), wrt="prompts_only")
        norm = np.sqrt(sum(float((g**2).sum()) for g in grads.values()))
        assert norm <= 1e-6
