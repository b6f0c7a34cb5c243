import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import random_tokens, random_weights, small_config

from uatlite.encoder import (
    ConfigError,
    EncoderConfig,
    EncoderWeights,
    StochasticityPlan,
    VocabularyError,
    attention_logits,
    embed,
    forward,
    modulate_logits,
)
from uatlite.linalg import ShapeError, softmax_rows


class TestConfig:
    def test_defaults(self):
        c = EncoderConfig()
        assert (c.dropout_embedding, c.dropout_attention, c.dropout_ffn) == (0.1, 0.2, 0.3)
        assert c.lam == 0.5 and c.mc_samples == 5
        assert c.head_dim == c.model_dim // c.num_heads

    @pytest.mark.parametrize("kw", [dict(model_dim=10, num_heads=4), dict(dropout_ffn=1.0), dict(lam=-1.0), dict(mc_samples=0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            EncoderConfig(**kw)

    def test_dict_round_trip(self):
        c = small_config(lam=0.25)
        assert EncoderConfig.from_dict(c.to_dict()) == c


class TestAttentionLogits:
    def test_identity_rows(self):
        q = np.eye(3)[:, :1]
        np.testing.assert_array_equal(attention_logits(q, q, 1), q @ q.T)

    def test_hand_value(self):
        assert attention_logits([[2.0]], [[3.0]], 4)[0, 0] == 3.0

    def test_matches_loop(self, rng):
        q, k = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        ref = np.array([[sum(q[i, c] * k[j, c] for c in range(4)) / 2.0 for j in range(5)] for i in range(5)])
        np.testing.assert_allclose(attention_logits(q, k, 4), ref, atol=1e-12, rtol=0)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            attention_logits(np.ones((2, 3)), np.ones((2, 4)), 3)


class TestModulation:
    def test_lambda_zero_is_bitwise_identity(self, rng):
        a = rng.normal(size=(4, 4))
        np.testing.assert_array_equal(modulate_logits(a, rng.random(4), 0.0), a)

    def test_zero_uncertainty_is_identity(self, rng):
        a = rng.normal(size=(4, 4))
        np.testing.assert_array_equal(modulate_logits(a, np.zeros(4), 0.7), a)

    def test_hand_value(self):
        out = modulate_logits([[1.0, 1.0]], [0.0, math.log(2)], 1.0)
        np.testing.assert_allclose(out, [[1.0, 0.5]], atol=1e-15)
        np.testing.assert_allclose(softmax_rows(out), [[0.6225, 0.3775]], atol=1e-3)

    def test_negative_uncertainty_rejected(self):
        with pytest.raises(ValueError):
            modulate_logits(np.ones((2, 2)), [0.1, -0.1], 0.5)

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            modulate_logits(np.ones((2, 2)), [0.1, 0.1], -0.5)

    def test_key_locality(self, rng):
        a = rng.normal(size=(2, 6, 6))
        u = rng.random(6)
        j = 3
        u2 = u.copy()
        u2[j] *= 2.5
        before, after = modulate_logits(a, u, 0.5), modulate_logits(a, u2, 0.5)
        others = [c for c in range(6) if c != j]
        np.testing.assert_array_equal(before[..., others], after[..., others])
        assert not np.array_equal(before[..., j], after[..., j])

    def test_monotone_damping_for_positive_logits(self, rng):
        a = rng.normal(size=(5, 5))
        j = 2
        a[:, j] = np.abs(a[:, j]) + 0.1
        u = rng.random(5)
        prev = None
        for uj in np.linspace(0, 3, 13):
            u[j] = uj
            alpha = softmax_rows(modulate_logits(a, u, 0.8))[:, j]
            if prev is not None:
                assert np.all(alpha <= prev + 1e-15)
            prev = alpha

    def test_negative_logit_moves_toward_zero(self):
        # documented consequence of the multiplicative form: damping a negative logit raises it
        a = np.array([[0.0, -2.0]])
        lo = softmax_rows(modulate_logits(a, [0.0, 0.0], 1.0))[0, 1]
        hi = softmax_rows(modulate_logits(a, [0.0, 1.0], 1.0))[0, 1]
        assert hi > lo


class TestEmbed:
    def test_deterministic_plan_repeatable(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        plan = StochasticityPlan.deterministic()
        np.testing.assert_array_equal(embed(toks, weights, plan), embed(toks, weights, plan))

    def test_zero_rate_equals_deterministic(self, rng):
        w = random_weights(small_config(dropout_embedding=0.0))
        toks = random_tokens(rng, w.config)
        np.testing.assert_array_equal(
            embed(toks, w, StochasticityPlan.all_layers(3, 1)), embed(toks, w, StochasticityPlan.deterministic())
        )

    def test_stochastic_passes_differ(self, rng):
        w = random_weights(EncoderConfig(), std=0.1)  # T*d = 512
        toks = random_tokens(rng, w.config)
        z1 = embed(toks, w, StochasticityPlan.all_layers(0, 0))
        z2 = embed(toks, w, StochasticityPlan.all_layers(0, 1))
        assert z1.shape == (16, 32)
        assert not np.array_equal(z1, z2)

    def test_out_of_vocabulary(self, weights):
        with pytest.raises(VocabularyError, match="20"):
            embed([0, 5, 20], weights, StochasticityPlan.deterministic())

    def test_too_long(self, weights):
        with pytest.raises(VocabularyError):
            embed(np.zeros(9, dtype=int), weights, StochasticityPlan.deterministic())


class TestForward:
    def test_repeatable(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        a = forward(toks, weights).logits
        b = forward(toks, weights).logits
        np.testing.assert_array_equal(a, b)

    def test_zero_u_equals_lambda_zero(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        u = rng.random(len(toks))
        base = forward(toks, weights, replace(weights.config, lam=0.0), token_uncertainty=u).logits
        zero_u = forward(toks, weights, token_uncertainty=np.zeros(len(toks))).logits
        plain = forward(toks, weights).logits
        np.testing.assert_array_equal(base, plain)
        np.testing.assert_array_equal(zero_u, plain)

    def test_modulation_changes_logits(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        u = rng.random(len(toks))
        assert not np.allclose(forward(toks, weights, token_uncertainty=u).logits, forward(toks, weights).logits)

    def test_trace_structure(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        tr = forward(toks, weights, plan=StochasticityPlan.all_layers(0), token_uncertainty=rng.random(len(toks)))
        c = weights.config
        assert len(tr.hidden) == c.num_layers + 1
        assert tr.num_layers == c.num_layers
        assert tr.logits.shape == (c.num_classes,)
        for att in tr.attention:
            assert att.shape == (c.num_heads, len(toks), len(toks))
            np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-9)

    def test_hidden_zero_is_embedding(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        plan = StochasticityPlan.all_layers(4, 2)
        np.testing.assert_array_equal(forward(toks, weights, plan=plan).hidden[0], embed(toks, weights, plan))

    def test_single_layer_zero_rate_is_deterministic(self, rng):
        w = random_weights(small_config(dropout_attention=0.0, dropout_ffn=0.0))
        toks = random_tokens(rng, w.config)
        det = forward(toks, w).logits
        np.testing.assert_array_equal(forward(toks, w, plan=StochasticityPlan.single_layer(1, seed=5)).logits, det)

    def test_deterministic_plan_applies_no_dropout(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        zero = replace(weights.config, dropout_embedding=0.0, dropout_attention=0.0, dropout_ffn=0.0)
        np.testing.assert_array_equal(
            forward(toks, weights, plan=StochasticityPlan.deterministic()).logits,
            forward(toks, weights, zero, plan=StochasticityPlan.all_layers(1)).logits,
        )

    def test_padding_keys_get_zero_attention(self, weights):
        toks = np.array([0, 5, 6, 7, 1, 1])
        tr = forward(toks, weights, token_uncertainty=np.full(6, 0.3))
        for att in tr.attention:
            assert np.all(att[..., 4:] == 0.0)
            np.testing.assert_allclose(att.sum(axis=-1), 1.0, atol=1e-9)

    def test_plan_modes(self):
        assert StochasticityPlan.deterministic().mode == "deterministic"
        assert StochasticityPlan.all_layers(0).mode == "all-layers"
        assert StochasticityPlan.single_layer(2, 0).mode == "single-layer(2)"
        assert StochasticityPlan.component_subset(["ffn"], 0).mode == "component-subset"
        with pytest.raises(ConfigError):
            StochasticityPlan.component_subset(["decoder"], 0)

    def test_component_subset_only_drops_listed_components(self, rng):
        w = random_weights(small_config(dropout_embedding=0.0, dropout_attention=0.0))
        toks = random_tokens(rng, w.config)
        plan_ffn = StochasticityPlan.component_subset(["ffn"], 0)
        plan_all = StochasticityPlan.all_layers(0)
        np.testing.assert_array_equal(forward(toks, w, plan=plan_ffn).logits, forward(toks, w, plan=plan_all).logits)

    def test_architecture_mismatch(self, weights, rng):
        with pytest.raises(ConfigError):
            forward(random_tokens(rng, weights.config), weights, replace(weights.config, num_classes=5))

    def test_uncertainty_length_checked(self, weights):
        with pytest.raises(ShapeError):
            forward([0, 3, 4], weights, token_uncertainty=[0.1, 0.2])

    def test_same_weights_object_for_baseline_and_modulated(self, weights, rng):
        toks = random_tokens(rng, weights.config)
        before = {k: v.copy() for k, v in weights.params.items()}
        n = weights.num_parameters()
        forward(toks, weights, token_uncertainty=rng.random(len(toks)))
        assert weights.num_parameters() == n
        for k, v in before.items():
            np.testing.assert_array_equal(weights.params[k], v)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, weights):
        path = tmp_path / "w.npz"
        weights.save(path)
        back = EncoderWeights.load(path)
        assert back.config == weights.config
        assert set(back.params) == set(weights.params)
        for k in weights.params:
            assert back.params[k].tobytes() == weights.params[k].tobytes()

    def test_bad_shapes_rejected(self, weights):
        params = dict(weights.params)
        params["cls_w"] = np.ones((3, 3))
        with pytest.raises(ValueError):
            EncoderWeights(weights.config, params)
