"""Optimizer, schedule, and training-loop behavior."""

import math

import numpy as np
import pytest
import torch

from moeup.corpus import Batch, gen_synthetic_domain
from moeup.counters import CostCounters
from moeup.errors import ConfigError, DivergenceError, NonFiniteError
from moeup.model import ModelConfig, forward, init_params, lm_loss, lm_loss_sum
from moeup.moerging import assemble_moe
from moeup.trainer import (
    ADAM_EPS,
    OptimizerState,
    TrainConfig,
    _adam_step,
    backward,
    finetune_routers,
    lr_at,
    train,
)

TINY = ModelConfig(
    vocab_size=17, hidden_size=16, n_layers=2, n_heads=2, mlp_hidden=24, max_seq_len=24, pad_id=16
)
# byte-vocab variant for tests that feed real synthetic corpora
TINYB = ModelConfig(
    vocab_size=257, hidden_size=16, n_layers=2, n_heads=2, mlp_hidden=24, max_seq_len=32,
    pad_id=256,
)


def tiny_batch(seed=0, B=3, T=12, vocab=16):
    rng = np.random.default_rng(seed)
    tokens = rng.integers(0, vocab, size=(B, T)).astype(np.int64)
    return Batch(tokens=tokens, mask=np.ones((B, T), dtype=bool), domain_id=0)


class TestSchedule:
    def test_matches_closed_form(self):
        cfg = TrainConfig(learning_rate=3e-4, warmup_steps=10, total_steps=100, batch_size=4)
        for step in range(100):
            if step < 10:
                want = 3e-4 * (step + 1) / 10
            else:
                prog = (step - 10) / 90
                want = 3e-4 * (0.1 + 0.9 * 0.5 * (1 + math.cos(math.pi * prog)))
            assert lr_at(cfg, step) == pytest.approx(want, rel=1e-12)

    def test_peak_and_floor(self):
        cfg = TrainConfig(learning_rate=1.0, warmup_steps=5, total_steps=1005, batch_size=4)
        assert lr_at(cfg, 5) == pytest.approx(1.0)
        assert lr_at(cfg, 1004) == pytest.approx(0.1, rel=1e-4)
        assert all(lr_at(cfg, s) >= 0.1 - 1e-12 for s in range(1005))

    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=-1.0, warmup_steps=1, total_steps=2, batch_size=4)
        with pytest.raises(ConfigError):
            TrainConfig(learning_rate=1e-4, warmup_steps=5, total_steps=2, batch_size=4)


class TestBackward:
    def test_finite_difference_agreement(self):
        cfg = ModelConfig(
            vocab_size=11, hidden_size=8, n_layers=1, n_heads=2, mlp_hidden=12,
            max_seq_len=12, pad_id=10,
        )
        params = init_params(cfg, 3, dtype=torch.float64)
        batch = tiny_batch(1, B=2, T=10, vocab=10)
        grads, _ = backward(params, batch)

        rng = np.random.default_rng(0)
        h = 1e-5
        for name in ("embed", "layers.0.attn.wq", "layers.0.mlp.w_gate", "head"):
            t = params.tensors[name]
            flat = t.view(-1)
            idx = int(rng.integers(0, flat.numel()))
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(lm_loss(forward(params, batch).logits, batch))
                flat[idx] = orig - h
                dn = float(lm_loss(forward(params, batch).logits, batch))
                flat[idx] = orig
            fd = (up - dn) / (2 * h)
            an = grads[name].view(-1)[idx].item()
            assert abs(fd - an) <= 1e-6 + 1e-4 * abs(fd)

    def test_pad_embedding_row_untouched(self):
        params = init_params(TINY, 4)
        tokens = np.array([[1, 2, 3, 16, 16]], dtype=np.int64)
        mask = np.array([[True, True, True, False, False]])
        grads, _ = backward(params, Batch(tokens=tokens, mask=mask, domain_id=0))
        assert torch.equal(grads["embed"][16], torch.zeros(16))

    def test_loss_sum_additive_over_rows(self):
        params = init_params(TINY, 5)
        a = tiny_batch(1, B=2)
        b = tiny_batch(2, B=3)
        both = Batch(
            tokens=np.concatenate([a.tokens, b.tokens]),
            mask=np.concatenate([a.mask, b.mask]),
            domain_id=0,
        )
        sa, na = lm_loss_sum(forward(params, a).logits, a)
        sb, nb = lm_loss_sum(forward(params, b).logits, b)
        sc, nc = lm_loss_sum(forward(params, both).logits, both)
        assert nc == na + nb
        assert float(sc) == pytest.approx(float(sa) + float(sb), rel=1e-5)

    def test_leaves_params_frozen_and_unchanged(self):
        params = init_params(TINY, 6)
        before = {k: t.clone() for k, t in params.tensors.items()}
        counters = CostCounters()
        backward(params, tiny_batch(3), counters)
        assert counters.forward_passes == 1
        assert counters.backward_passes == 1
        for k, t in params.tensors.items():
            assert not t.requires_grad
            assert t.grad is None
            assert torch.equal(t, before[k])


class TestAdamStep:
    def test_first_step_closed_form(self):
        # fresh state: mhat = g, vhat = g*g, update = -lr * g / (|g| + eps)
        p = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64)
        g = torch.tensor([0.3, -0.1, 0.0], dtype=torch.float64)
        p.grad = g.clone()
        state = OptimizerState.for_tensors({"p": p})
        _adam_step(state, {"p": p}, lr=0.01)
        want = torch.tensor([1.0, -2.0, 0.5], dtype=torch.float64) - 0.01 * g / (
            g.abs() + ADAM_EPS
        )
        assert torch.allclose(p, want, atol=1e-12)

    def test_nonfinite_gradient_rejected(self):
        p = torch.tensor([1.0])
        p.grad = torch.tensor([float("inf")])
        state = OptimizerState.for_tensors({"p": p})
        with pytest.raises(NonFiniteError):
            _adam_step(state, {"p": p}, lr=0.01)


class TestTrain:
    def test_zero_steps_is_identity(self):
        params = init_params(TINYB, 7)
        corpus = gen_synthetic_domain("prose", 8, 0)
        cfg = TrainConfig(learning_rate=1e-3, warmup_steps=0, total_steps=0, batch_size=4)
        out, history = train(params, corpus, cfg)
        assert history == []
        for k in params.tensors:
            assert torch.equal(out.tensors[k], params.tensors[k])

    def test_run_is_deterministic(self):
        params = init_params(TINYB, 8)
        corpus = gen_synthetic_domain("arith", 12, 1)
        cfg = TrainConfig(learning_rate=1e-3, warmup_steps=2, total_steps=8, batch_size=4, seed=3)
        out1, h1 = train(params, corpus, cfg)
        out2, h2 = train(params, corpus, cfg)
        assert h1 == h2
        for k in out1.tensors:
            assert torch.equal(out1.tensors[k], out2.tensors[k])

    def test_loss_decreases(self):
        params = init_params(TINYB, 9)
        corpus = gen_synthetic_domain("brackets", 24, 2)
        cfg = TrainConfig(learning_rate=3e-3, warmup_steps=5, total_steps=60, batch_size=4)
        _, history = train(params, corpus, cfg)
        first = np.mean([r[2] for r in history[:5]])
        last = np.mean([r[2] for r in history[-5:]])
        assert last < 0.8 * first

    def test_input_params_untouched(self):
        params = init_params(TINYB, 10)
        before = {k: t.clone() for k, t in params.tensors.items()}
        corpus = gen_synthetic_domain("prose", 8, 3)
        cfg = TrainConfig(learning_rate=1e-3, warmup_steps=1, total_steps=3, batch_size=4)
        train(params, corpus, cfg)
        for k, t in params.tensors.items():
            assert torch.equal(t, before[k])

    def test_divergence_detected(self):
        params = init_params(TINYB, 11)
        corpus = gen_synthetic_domain("prose", 8, 4)
        cfg = TrainConfig(learning_rate=1e38, warmup_steps=1, total_steps=50, batch_size=4)
        with pytest.raises((DivergenceError, NonFiniteError)):
            train(params, corpus, cfg)

    def test_grad_accum_counts_backwards(self):
        params = init_params(TINYB, 12)
        corpus = gen_synthetic_domain("prose", 8, 5)
        counters = CostCounters()
        cfg = TrainConfig(
            learning_rate=1e-3, warmup_steps=1, total_steps=4, batch_size=4, grad_accum=2
        )
        train(params, corpus, cfg, counters)
        assert counters.backward_passes == 8
        assert counters.forward_passes == 8


class TestFinetuneRouters:
    def make_moe(self):
        experts = [init_params(TINYB, 20 + d) for d in range(2)]
        return assemble_moe(experts, routers="random", top_k=1, router_seed=0,
                            domain_names=["a", "b"])

    def corpora(self):
        return [
            gen_synthetic_domain("arith", 12, 6, domain_id=0),
            gen_synthetic_domain("prose", 12, 7, domain_id=1),
        ]

    def test_requires_routers_only_mode(self):
        moe = self.make_moe()
        cfg = TrainConfig(learning_rate=1e-3, warmup_steps=1, total_steps=2, batch_size=4)
        with pytest.raises(ConfigError):
            finetune_routers(moe, self.corpora(), cfg)

    def test_requires_initialized_routers(self):
        experts = [init_params(TINYB, 30 + d) for d in range(2)]
        moe = assemble_moe(experts, routers="uninitialized", top_k=1, domain_names=["a", "b"])
        cfg = TrainConfig(
            learning_rate=1e-3, warmup_steps=1, total_steps=2, batch_size=4,
            trainable="routers-only",
        )
        with pytest.raises(ConfigError):
            finetune_routers(moe, self.corpora(), cfg)

    def test_only_routers_move(self):
        # with top_k=1 the gate renormalizes to exactly 1, which would kill the
        # router gradient; a nonzero update here proves raw gates are used
        moe = self.make_moe()
        trunk_before = {k: t.clone() for k, t in moe.trunk.items()}
        routers_before = [w.clone() for w in moe.routers]
        cfg = TrainConfig(
            learning_rate=1e-2, warmup_steps=1, total_steps=6, batch_size=4, seed=1,
            trainable="routers-only",
        )
        counters = CostCounters()
        tuned, history = finetune_routers(moe, self.corpora(), cfg, counters)
        assert len(history) == 6
        assert counters.backward_passes == 6
        for k, t in tuned.trunk.items():
            assert torch.equal(t, trunk_before[k])
        for layer in range(TINYB.n_layers):
            for d in range(2):
                for k, t in tuned.experts[layer][d].items():
                    assert torch.equal(t, moe.experts[layer][d][k])
        moved = max(
            (a - b).abs().max().item() for a, b in zip(tuned.routers, routers_before)
        )
        assert moved > 0
        for w in tuned.routers:
            assert not w.requires_grad

    def test_original_moe_routers_untouched(self):
        moe = self.make_moe()
        before = [w.clone() for w in moe.routers]
        cfg = TrainConfig(
            learning_rate=1e-2, warmup_steps=1, total_steps=3, batch_size=4,
            trainable="routers-only",
        )
        finetune_routers(moe, self.corpora(), cfg)
        for w, b in zip(moe.routers, before):
            assert torch.equal(w, b)
