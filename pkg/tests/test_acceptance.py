"""Acceptance gate: ten criteria, one printed pass/fail line each.

Run with ``pytest -s tests/test_acceptance.py`` to see every criterion line
as it completes. The desk-scale criteria (5, 6, 7, 8) share one set of
trained suites via the session fixtures in conftest.py; the cheap numerical
criteria build their own tiny models. Oracles here are re-derived with plain
numpy rather than calling back into the code under test.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
import torch

from moeup.corpus import gen_synthetic_domain, make_batches, make_domain_suite
from moeup.counters import CostCounters
from moeup.eval_harness import (
    normalized_score,
    routing_accuracy,
    run_sweep,
    train_suite,
)
from moeup.model import Batch, ModelConfig, forward, init_params, lm_loss
from moeup.moerging import RoutingPolicy, assemble_moe, moe_forward
from moeup.ridge_router import (
    accumulate,
    add_domain,
    fit_routers_pipeline,
    merge_stats,
    new_stats,
    solve_routers,
)
from moeup.trainer import TrainConfig, backward, finetune_routers, train


pytestmark = pytest.mark.acceptance


def criterion(n: int, ok: bool, detail: str) -> None:
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})", flush=True)
    assert ok, f"criterion {n}: {detail}"


def capture_features(moe, batches):
    """Per-layer router features and one-hot targets, stacked densely in f64."""
    feats = [[] for _ in range(moe.n_layers)]
    targs = [[] for _ in range(moe.n_layers)]
    for batch in batches:
        trace, _ = moe_forward(moe, batch, RoutingPolicy.deterministic_domain(), capture=True)
        for l, act in enumerate(trace.activations):
            a = act.to(torch.float64).numpy()
            for i in range(a.shape[0]):
                for t in range(a.shape[1]):
                    if batch.mask[i, t]:
                        feats[l].append(a[i, t])
                        row = np.zeros(moe.n_experts)
                        row[batch.domain_id] = 1.0
                        targs[l].append(row)
    return [np.stack(f) for f in feats], [np.stack(t) for t in targs]


def small_stats_problem():
    """A routed model plus a dozen real batches for the statistics criteria."""
    config = ModelConfig()  # desk shape: H=64, L=4
    experts = [init_params(config, 31 + d) for d in range(2)]
    moe = assemble_moe(experts, "uninitialized", top_k=1, domain_names=["arith", "prose"])
    corpora = make_domain_suite(["arith", "prose"], 24, 77)
    batches = []
    for c in corpora:
        batches.extend(make_batches(c, "train", 4, config.max_seq_len, 1))
    return moe, batches


def test_criterion_1_streaming_matches_stacked():
    t0 = time.perf_counter()
    lam = 0.01
    moe, batches = small_stats_problem()
    assert len(batches) >= 5
    stats = new_stats(moe.config, moe.n_experts)
    for b in batches:
        accumulate(stats, moe, b)
    W_stream = solve_routers(stats, lam=lam, normalize=False).W

    feats, targs = capture_features(moe, batches)
    H = moe.config.hidden_size
    W_stacked = [
        np.linalg.solve(F.T @ F + lam * np.eye(H), F.T @ Y) for F, Y in zip(feats, targs)
    ]
    err_stacked = max(np.abs(ws - wd).max() for ws, wd in zip(W_stream, W_stacked))

    rev = new_stats(moe.config, moe.n_experts)
    for b in reversed(batches):
        accumulate(rev, moe, b)
    W_rev = solve_routers(rev, lam=lam, normalize=False).W
    err_order = max(np.abs(w1 - w2).max() for w1, w2 in zip(W_stream, W_rev))

    elapsed = time.perf_counter() - t0
    criterion(
        1,
        err_stacked < 1e-8 and err_order < 1e-8 and elapsed < 10,
        f"streaming vs stacked max err {err_stacked:.2e}, "
        f"batch-order permutation err {err_order:.2e}, {len(batches)} batches, {elapsed:.1f}s",
    )


def test_criterion_2_shard_merge_matches_single_pass():
    t0 = time.perf_counter()
    moe, batches = small_stats_problem()
    single = new_stats(moe.config, moe.n_experts)
    for b in batches:
        accumulate(single, moe, b)
    shards = [new_stats(moe.config, moe.n_experts) for _ in range(3)]
    for i, b in enumerate(batches):
        accumulate(shards[i % 3], moe, b)
    merged = merge_stats(merge_stats(shards[0], shards[1]), shards[2])

    rel = 0.0
    for l in range(moe.n_layers):
        rel = max(rel, np.abs(merged.A[l] - single.A[l]).max() / np.abs(single.A[l]).max())
        rel = max(rel, np.abs(merged.b[l] - single.b[l]).max() / np.abs(single.b[l]).max())
    counts_equal = np.array_equal(merged.token_count, single.token_count)
    elapsed = time.perf_counter() - t0
    criterion(
        2,
        rel < 1e-10 and counts_equal and elapsed < 10,
        f"3-shard merge vs single pass rel err {rel:.2e}, "
        f"token counts equal {counts_equal}, {elapsed:.1f}s",
    )


def test_criterion_3_gradients_match_finite_differences():
    t0 = time.perf_counter()
    config = ModelConfig(
        vocab_size=29, hidden_size=8, n_layers=2, n_heads=2, mlp_hidden=16,
        max_seq_len=12, pad_id=28,
    )
    params = init_params(config, 5, dtype=torch.float64)
    rng = np.random.default_rng(17)
    tokens = rng.integers(0, 28, size=(2, 12))
    mask = np.ones((2, 12), dtype=bool)
    mask[1, -2:] = False
    tokens[~mask] = config.pad_id
    batch = Batch(tokens=tokens, mask=mask, domain_id=0)

    grads, _ = backward(params, batch)

    def loss_at():
        with torch.no_grad():
            return float(lm_loss(forward(params, batch).logits, batch))

    h = 1e-6
    worst_rel = 0.0
    worst_abs = 0.0
    checked = 0
    for name, tensor in params.tensors.items():
        flat = tensor.view(-1)
        idx = rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False)
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + h
            up = loss_at()
            flat[i] = orig - h
            down = loss_at()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = float(grads[name].view(-1)[i])
            if abs(fd) > 1e-7:
                worst_rel = max(worst_rel, abs(an - fd) / abs(fd))
            else:
                worst_abs = max(worst_abs, abs(an - fd))
            checked += 1
    elapsed = time.perf_counter() - t0
    criterion(
        3,
        worst_rel < 1e-3 and worst_abs < 1e-6 and elapsed < 60,
        f"{checked} coords on a 2-layer H=8 f64 model, worst rel err {worst_rel:.2e}, "
        f"worst near-zero abs err {worst_abs:.2e}, {elapsed:.1f}s",
    )


def test_criterion_4_identical_experts_equal_dense():
    t0 = time.perf_counter()
    config = ModelConfig(hidden_size=32, n_layers=2, n_heads=2, mlp_hidden=48, max_seq_len=48)
    dense = init_params(config, 11)
    experts = [dense.clone() for _ in range(3)]
    moe = assemble_moe(
        experts, "random", top_k=1, router_seed=3, domain_names=["a", "b", "c"]
    )
    corpus = gen_synthetic_domain("arith", 8, 2, domain_id=0)
    batch = make_batches(corpus, "train", 4, config.max_seq_len, 0)[0]
    want = forward(dense, batch).logits

    worst = 0.0
    for policy in (RoutingPolicy.learned(), RoutingPolicy.oracle(), RoutingPolicy.random(0)):
        trace, _ = moe_forward(moe, batch, policy)
        worst = max(worst, float((trace.logits - want).abs().max()))
    elapsed = time.perf_counter() - t0
    criterion(
        4,
        worst < 1e-5 and elapsed < 10,
        f"D=3 identical experts vs dense, worst policy max-norm {worst:.2e}, {elapsed:.1f}s",
    )


def test_criterion_5_router_quality(desk, desk_report):
    report = desk_report.report
    rome = report.methods["rome"]
    oracle = report.methods["oracle"]
    acc = float(np.mean([layers[1] for layers in rome.per_seed_routing]))
    pbar = rome.pbar_mean
    oracle_gap = oracle.pbar_mean - pbar
    elapsed = desk.train_seconds + desk_report.ladder_seconds
    criterion(
        5,
        acc >= 0.90
        and pbar >= 85.0
        and oracle_gap <= 6.0
        and len(desk.seeds) == 3
        and elapsed < 1800,
        f"layer-1 routing accuracy {acc:.3f}, pbar(rome) {pbar:.2f}, "
        f"oracle-rome {oracle_gap:+.2f}, {len(desk.seeds)} seeds, {elapsed:.0f}s",
    )


def test_criterion_6_ladder_ordering(desk_report):
    report = desk_report.report
    random_ = report.methods["random"].pbar_mean
    averaging = report.methods["model_averaging"].pbar_mean
    rome = report.methods["rome"].pbar_mean
    rome_plus = report.methods["rome_plus"].pbar_mean
    criterion(
        6,
        random_ < averaging + 3 and rome > random_ + 5 and rome_plus >= rome - 0.5,
        f"random {random_:.2f} < averaging {averaging:.2f} + 3; "
        f"rome {rome:.2f} > random + 5 (gap {rome - random_:.2f}); "
        f"rome+ {rome_plus:.2f} >= rome - 0.5",
    )


def test_criterion_7_fit_needs_no_backward(desk):
    spec = desk.spec
    moe = assemble_moe(
        desk.suites[0].experts,
        "uninitialized",
        top_k=spec.top_k,
        domain_names=[c.name for c in desk.corpora],
    )
    counters = CostCounters()
    fit_routers_pipeline(
        moe,
        desk.corpora,
        lam=spec.lam,
        max_tokens=spec.max_tokens,
        batch_size=spec.eval_batch_size,
        seq_len=spec.model.max_seq_len,
        normalize=spec.normalize,
        counters=counters,
    )
    expected = sum(
        len(make_batches(c, "train", spec.eval_batch_size, spec.model.max_seq_len, 0))
        for c in desk.corpora
    )

    tiny = ModelConfig(
        vocab_size=257, hidden_size=16, n_layers=2, n_heads=2, mlp_hidden=24,
        max_seq_len=32, pad_id=256,
    )
    btx_moe = assemble_moe(
        [init_params(tiny, 60 + d) for d in range(2)], "random", top_k=2, router_seed=1,
        domain_names=["arith", "prose"],
    )
    btx_corpora = [
        gen_synthetic_domain("arith", 16, 0, domain_id=0),
        gen_synthetic_domain("prose", 16, 1, domain_id=1),
    ]
    btx_tc = TrainConfig(
        learning_rate=1e-4, warmup_steps=1, total_steps=4, batch_size=4,
        trainable="routers-only",
    )
    btx_counters = CostCounters()
    finetune_routers(btx_moe, btx_corpora, btx_tc, counters=btx_counters)

    criterion(
        7,
        counters.backward_passes == 0
        and counters.forward_passes == expected
        and btx_counters.backward_passes > 0,
        f"ridge fit: {counters.backward_passes} backwards, "
        f"{counters.forward_passes} forwards for {expected} statistics batches; "
        f"btx: {btx_counters.backward_passes} backwards",
    )


def test_criterion_8_token_budget_and_lambda_insensitivity(desk):
    t0 = time.perf_counter()
    mt_values = [2, 8, 32, 128, None]
    mt_rows = run_sweep(
        desk.spec, desk.corpora, desk.seeds, "max_tokens", mt_values, suites=desk.suites
    )
    lam_rows = run_sweep(
        desk.spec, desk.corpora, desk.seeds, "lambda", [1e-4, 1e-2, 1.0], suites=desk.suites
    )
    elapsed = time.perf_counter() - t0

    means = {v: m for v, m, _ in mt_rows}
    stds = {v: s for v, _, s in mt_rows}
    monotone = all(
        means[b] >= means[a] - max(stds[a], 1e-9)
        for a, b in zip([2, 8, 32], [8, 32, 128])
    )
    two_enough = means[2] >= 0.9 * means[None]
    lam_means = [m for _, m, _ in lam_rows]
    lam_spread = max(lam_means) - min(lam_means)
    total = desk.train_seconds + elapsed
    criterion(
        8,
        monotone and two_enough and lam_spread < 3.0 and total < 2700,
        "max_tokens pbar "
        + " ".join(f"{v}:{means[v]:.2f}" for v in mt_values)
        + f", monotone within 1 std {monotone}, pbar(2) >= 0.9*pbar(inf) {two_enough}, "
        f"lambda spread {lam_spread:.2f}, {total:.0f}s",
    )


def test_criterion_9_continual_domain_addition(desk):
    t0 = time.perf_counter()
    spec = desk.spec
    corpora2 = make_domain_suite(["arith", "prose"], 400, 1234)
    names2 = [c.name for c in corpora2]
    suite = train_suite(spec, corpora2, seed=0)

    def fresh_fit():
        moe = assemble_moe(
            suite.experts, "uninitialized", top_k=spec.top_k, domain_names=names2
        )
        return fit_routers_pipeline(
            moe,
            corpora2,
            lam=spec.lam,
            max_tokens=spec.max_tokens,
            batch_size=spec.eval_batch_size,
            seq_len=spec.model.max_seq_len,
            normalize=spec.normalize,
        )

    moe2, stats2 = fresh_fit()
    before = routing_accuracy(moe2, corpora2, batch_size=spec.eval_batch_size)

    new_corpus = gen_synthetic_domain("hexcode", 400, 1234 + 9999, domain_id=2)
    new_expert, _ = train(
        suite.seed_params, new_corpus, replace(spec.expert_train, seed=207)
    )
    grown, _ = add_domain(
        stats2,
        moe2,
        new_expert,
        new_corpus,
        lam=spec.lam,
        max_tokens=spec.max_tokens,
        batch_size=spec.eval_batch_size,
        seq_len=spec.model.max_seq_len,
        normalize=spec.normalize,
        reaverage_trunk=True,
    )
    after = routing_accuracy(grown, corpora2, batch_size=spec.eval_batch_size)
    acc_kept = after[1] >= before[1] - 0.05

    # incremental vs from-scratch statistics under a pinned trunk
    moe2p, stats2p = fresh_fit()
    grown_pin, stats_inc = add_domain(
        stats2p,
        moe2p,
        new_expert,
        new_corpus,
        lam=spec.lam,
        max_tokens=spec.max_tokens,
        batch_size=spec.eval_batch_size,
        seq_len=spec.model.max_seq_len,
        normalize=spec.normalize,
        reaverage_trunk=False,
    )
    scratch = new_stats(spec.model, 3, domain_names=stats_inc.domain_names)
    for c in list(corpora2) + [new_corpus]:
        for b in make_batches(c, "train", spec.eval_batch_size, spec.model.max_seq_len, 0):
            accumulate(scratch, grown_pin, b, max_tokens=spec.max_tokens)
    rel = 0.0
    for l in range(spec.model.n_layers):
        rel = max(rel, np.abs(scratch.A[l] - stats_inc.A[l]).max() / np.abs(stats_inc.A[l]).max())
        rel = max(rel, np.abs(scratch.b[l] - stats_inc.b[l]).max() / np.abs(stats_inc.b[l]).max())
    counts_equal = np.array_equal(scratch.token_count, stats_inc.token_count)
    elapsed = time.perf_counter() - t0
    criterion(
        9,
        acc_kept and rel < 1e-8 and counts_equal and elapsed < 900,
        f"layer-1 accuracy on original domains {before[1]:.3f} -> {after[1]:.3f}, "
        f"incremental vs scratch stats rel err {rel:.2e}, "
        f"counts equal {counts_equal}, {elapsed:.0f}s",
    )


def test_criterion_10_metric_identities():
    t0 = time.perf_counter()
    p_hat = np.array([3.7, 11.25, 0.5, 92.0])
    scores, pbar = normalized_score(p_hat, p_hat)
    self_exact = all(s == 100.0 for s in scores) and pbar == 100.0
    scores2, pbar2 = normalized_score(2.0 * p_hat, p_hat)
    doubled_exact = all(s == 50.0 for s in scores2) and pbar2 == 50.0
    elapsed = time.perf_counter() - t0
    criterion(
        10,
        self_exact and doubled_exact and elapsed < 1,
        f"matching expert scores exactly 100 ({self_exact}), "
        f"doubled perplexity gives pbar exactly 50 ({doubled_exact}), {elapsed:.2f}s",
    )
